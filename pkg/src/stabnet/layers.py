"""Network layers, including the stochastic ones (dropout, jittered max-pooling).

A network is a flat list of :class:`LayerSpec` plus per-layer parameter
tensors. Stochastic layers draw from named streams held by
:class:`StochasticMode`; each dropout/randpool layer owns its own stream
(``dropout/0``, ``dropout/1``, ``randpool/0`` ...), so adding a layer of one
kind never shifts the draws of another.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DimensionError, ParameterError, ParseError
from .rng import RngStreams
from .tensor import Tensor, make_node

KINDS = ("conv", "fc", "relu", "dropout", "randpool", "softmax")
CHECKPOINT_MAGIC = b"SSLCKPT1"


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``out`` is channels for conv and units for fc."""

    kind: str
    out: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    p: float = 0.0
    window: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.kind == "dropout" and not 0.0 <= self.p < 1.0:
            raise ParameterError(f"dropout p must lie in [0, 1), got {self.p}")
        if self.kind == "randpool" and (self.window < 2 or self.stride < 1):
            raise ParameterError(f"randpool needs window >= 2 and stride >= 1, got {self.window}/{self.stride}")
        if self.kind == "conv" and (self.out < 1 or self.kernel < 1 or self.stride < 1 or self.pad < 0):
            raise ParameterError(f"bad conv parameters: {self}")
        if self.kind == "fc" and self.out < 1:
            raise ParameterError(f"fc needs out >= 1, got {self.out}")

    _KEYS = {
        "conv": ("out", "kernel", "stride", "pad"),
        "fc": ("out",),
        "dropout": ("p",),
        "randpool": ("window", "stride"),
    }

    def to_text(self) -> str:
        keys = self._KEYS.get(self.kind, ())
        return " ".join([self.kind] + [f"{k}={getattr(self, k)!r}" for k in keys])

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        """Inverse of :meth:`to_text`, e.g. ``"conv out=32 kernel=5 pad=2"``."""
        parts = text.split()
        if not parts:
            raise ParameterError("empty layer description")
        kind, kwargs = parts[0], {}
        types = {f.name: f.type for f in fields(cls)}
        for item in parts[1:]:
            key, sep, value = item.partition("=")
            if not sep or key not in types or key == "kind":
                raise ParameterError(f"bad layer field {item!r} in {text!r}")
            try:
                kwargs[key] = float(value) if key == "p" else int(value)
            except ValueError:
                raise ParameterError(f"bad value for {key} in {text!r}") from None
        return cls(kind, **kwargs)


def parse_architecture(text: str) -> list[LayerSpec]:
    """Parse ``;``-separated layer descriptions."""
    return [LayerSpec.parse(chunk) for chunk in text.split(";") if chunk.strip()]


def format_architecture(specs: list[LayerSpec]) -> str:
    return "; ".join(s.to_text() for s in specs)


def ramp_dropout(specs: list[LayerSpec], p_first: float, p_last: float) -> list[LayerSpec]:
    """Assign dropout ratios rising linearly from ``p_first`` to ``p_last`` over the dropout layers.

    A single dropout layer gets ``p_last``.
    """
    idx = [i for i, s in enumerate(specs) if s.kind == "dropout"]
    out = list(specs)
    for rank, i in enumerate(idx):
        t = 1.0 if len(idx) == 1 else rank / (len(idx) - 1)
        out[i] = LayerSpec("dropout", p=p_first + t * (p_last - p_first))
    return out


def mnist_convnet(num_classes: int = 10, conv1: int = 32, conv2: int = 64, hidden: int = 256,
                  p_first: float = 0.1, p_last: float = 0.5, dropout_after_pool: bool = False) -> list[LayerSpec]:
    """conv5 -> randpool2 -> conv5 -> randpool2 -> fc -> dropout -> fc -> softmax.

    ``dropout_after_pool`` inserts a dropout layer after each pooling stage as
    well; ratios then ramp from ``p_first`` to ``p_last``.
    """
    drop = [LayerSpec("dropout")] if dropout_after_pool else []
    specs = [
        LayerSpec("conv", out=conv1, kernel=5, pad=2), LayerSpec("relu"),
        LayerSpec("randpool", window=2, stride=2), *drop,
        LayerSpec("conv", out=conv2, kernel=5, pad=2), LayerSpec("relu"),
        LayerSpec("randpool", window=2, stride=2), *drop,
        LayerSpec("fc", out=hidden), LayerSpec("relu"), LayerSpec("dropout"),
        LayerSpec("fc", out=num_classes), LayerSpec("softmax"),
    ]
    return ramp_dropout(specs, p_first, p_last)


def mlp(num_classes: int = 2, hidden: tuple[int, ...] = (32, 32), p_first: float = 0.1,
        p_last: float = 0.5) -> list[LayerSpec]:
    specs: list[LayerSpec] = []
    for h in hidden:
        specs += [LayerSpec("fc", out=h), LayerSpec("relu"), LayerSpec("dropout")]
    specs += [LayerSpec("fc", out=num_classes), LayerSpec("softmax")]
    return ramp_dropout(specs, p_first, p_last)


# ---------------------------------------------------------------------------
# stochasticity


@dataclass
class StochasticMode:
    """Either ``deterministic`` (every layer a pure function) or ``stochastic``
    with a set of named streams; ``namespace`` prefixes every stream name."""

    mode: str = "deterministic"
    streams: RngStreams | None = None
    namespace: str = "train"

    def __post_init__(self):
        if self.mode not in ("stochastic", "deterministic"):
            raise ParameterError(f"mode must be 'stochastic' or 'deterministic', got {self.mode!r}")
        if self.mode == "stochastic" and self.streams is None:
            raise ParameterError("stochastic mode needs rng streams")

    @classmethod
    def stochastic(cls, seed: int | RngStreams, namespace: str = "train") -> "StochasticMode":
        streams = seed if isinstance(seed, RngStreams) else RngStreams(seed)
        return cls("stochastic", streams, namespace)

    @classmethod
    def deterministic(cls) -> "StochasticMode":
        return cls("deterministic")

    @property
    def is_stochastic(self) -> bool:
        return self.mode == "stochastic"

    def rng(self, name: str) -> np.random.Generator:
        return self.streams.get(f"{self.namespace}/{name}")


DETERMINISTIC = StochasticMode()


def dropout_forward(x: Tensor, p: float, mode: StochasticMode, stream: str = "dropout/0") -> Tensor:
    """Inverted dropout: zero each unit with probability ``p``, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout p must lie in [0, 1), got {p}")
    if not mode.is_stochastic or p == 0.0:
        return x
    keep = mode.rng(stream).random(x.shape) >= p
    mask = keep.astype(x.data.dtype) * x.data.dtype.type(1.0 / (1.0 - p))
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def randpool_forward(x: Tensor, window: int, stride: int, mode: StochasticMode,
                     stream: str = "randpool/0") -> Tensor:
    """Max-pooling whose window anchors are jittered per pass.

    Window (i, j) normally starts at (i*stride, j*stride). In stochastic mode
    every window of every sample and channel is shifted by independent offsets
    drawn from {0, ..., stride-1} along each axis, clamped so the window stays
    inside the input. The gradient goes to the first maximum in row-major order.
    """
    if x.ndim != 4:
        raise DimensionError(f"randpool expects [B, C, H, W], got {x.shape}")
    if window < 2 or stride < 1:
        raise ParameterError(f"randpool needs window >= 2 and stride >= 1, got {window}/{stride}")
    B, C, H, W = x.shape
    if H < window or W < window:
        raise DimensionError(f"randpool window {window} larger than input {H}x{W}")
    oh = (H - window) // stride + 1
    ow = (W - window) // stride + 1
    rows = (np.arange(oh) * stride)[None, None, :, None]
    cols = (np.arange(ow) * stride)[None, None, None, :]
    if mode.is_stochastic and stride > 1:
        gen = mode.rng(stream)
        rows = np.minimum(rows + gen.integers(0, stride, size=(B, C, oh, ow)), H - window)
        cols = np.minimum(cols + gen.integers(0, stride, size=(B, C, oh, ow)), W - window)
    else:
        rows = np.broadcast_to(rows, (B, C, oh, ow))
        cols = np.broadcast_to(cols, (B, C, oh, ow))

    # flat offset of each window's top-left corner in x.data
    anchor = (np.arange(B * C) * (H * W)).reshape(B, C, 1, 1) + rows * W + cols
    flat = x.data.reshape(-1)
    out = src = None
    for u in range(window):
        for v in range(window):
            idx = anchor + (u * W + v)
            val = flat[idx]
            if out is None:
                out, src = val, idx
            else:
                # strict '>' keeps the first maximum in row-major order
                better = val > out
                out = np.where(better, val, out)
                src = np.where(better, idx, src)
    src = src.ravel()

    def backward(g):
        gx = np.bincount(src, weights=g.ravel(), minlength=x.data.size).astype(g.dtype)
        return (gx.reshape(x.shape),)

    return make_node(out, (x,), backward, "randpool")


# ---------------------------------------------------------------------------
# network


@dataclass
class Network:
    """A layer stack with its parameters; ``input_shape`` excludes the batch axis."""

    specs: list[LayerSpec]
    input_shape: tuple[int, ...]
    params: list[list[Tensor]] = field(default_factory=list)
    shapes: list[tuple[int, ...]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.shapes = infer_shapes(self.specs, self.input_shape)
        if not self.params:
            self.params = [[] for _ in self.specs]

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.params for t in layer]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def forward(self, x, mode: StochasticMode = DETERMINISTIC) -> Tensor:
        return network_forward(self, x, mode)

    def copy(self) -> "Network":
        params = [[Tensor(t.data.copy(), requires_grad=t.requires_grad) for t in layer] for layer in self.params]
        return Network(list(self.specs), self.input_shape, params)


def param_shapes(spec: LayerSpec, in_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    if spec.kind == "conv":
        return [(spec.out, in_shape[0], spec.kernel, spec.kernel), (spec.out,)]
    if spec.kind == "fc":
        return [(math.prod(in_shape), spec.out), (spec.out,)]
    return []


def infer_shapes(specs: list[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-layer output shapes (without batch axis); raises ConfigError at the first break."""
    if not specs:
        raise ConfigError("architecture has no layers")
    shape = tuple(input_shape)
    out = []
    for i, s in enumerate(specs):
        if s.kind == "conv":
            if len(shape) != 3:
                raise ConfigError(f"layer {i} (conv) needs a [C, H, W] input, got {shape}")
            c, h, w = shape
            if h + 2 * s.pad < s.kernel or w + 2 * s.pad < s.kernel:
                raise ConfigError(f"layer {i} (conv) kernel {s.kernel} exceeds padded input {shape}")
            shape = (s.out, tc.conv_output_size(h, s.kernel, s.stride, s.pad),
                     tc.conv_output_size(w, s.kernel, s.stride, s.pad))
        elif s.kind == "randpool":
            if len(shape) != 3:
                raise ConfigError(f"layer {i} (randpool) needs a [C, H, W] input, got {shape}")
            c, h, w = shape
            if h < s.window or w < s.window:
                raise ConfigError(f"layer {i} (randpool) window {s.window} exceeds input {shape}")
            shape = (c, (h - s.window) // s.stride + 1, (w - s.window) // s.stride + 1)
        elif s.kind == "fc":
            shape = (s.out,)
        elif s.kind == "softmax":
            if len(shape) != 1 or shape[0] < 2:
                raise ConfigError(f"layer {i} (softmax) needs a flat input of width >= 2, got {shape}")
        out.append(shape)
    if specs[-1].kind != "softmax":
        raise ConfigError(f"layer {len(specs) - 1} ({specs[-1].kind}) must be softmax")
    return out


def init_network(specs: list[LayerSpec], input_shape: tuple[int, ...], seed: int | RngStreams) -> Network:
    """Fan-in scaled uniform weights, U(-sqrt(6/fan_in), sqrt(6/fan_in)); zero biases."""
    streams = seed if isinstance(seed, RngStreams) else RngStreams(seed)
    net = Network(list(specs), input_shape)
    in_shapes = [tuple(input_shape)] + net.shapes[:-1]
    for i, (s, in_shape) in enumerate(zip(specs, in_shapes)):
        shapes = param_shapes(s, in_shape)
        if not shapes:
            continue
        gen = streams.fresh("init", i)
        w_shape, b_shape = shapes
        fan_in = math.prod(w_shape[1:]) if s.kind == "conv" else w_shape[0]
        bound = math.sqrt(6.0 / fan_in)
        w = gen.uniform(-bound, bound, size=w_shape)
        net.params[i] = [Tensor(w, requires_grad=True), Tensor(np.zeros(b_shape), requires_grad=True)]
    return net


def network_forward(net: Network, x, mode: StochasticMode = DETERMINISTIC) -> Tensor:
    """Run ``x`` ([B, *input_shape]) through the stack; returns probabilities [B, C]."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if tuple(x.shape[1:]) != net.input_shape:
        raise DimensionError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    counters = {"dropout": 0, "randpool": 0}
    h = x
    for i, s in enumerate(net.specs):
        if s.kind == "conv":
            w, b = net.params[i]
            h = tc.add_bias(tc.conv2d(h, w, s.stride, s.pad), b)
        elif s.kind == "fc":
            w, b = net.params[i]
            if h.ndim != 2:
                h = tc.reshape(h, (h.shape[0], -1))
            h = tc.add_bias(tc.matmul(h, w), b)
        elif s.kind == "relu":
            h = tc.relu(h)
        elif s.kind == "dropout":
            h = dropout_forward(h, s.p, mode, f"dropout/{counters['dropout']}")
            counters["dropout"] += 1
        elif s.kind == "randpool":
            h = randpool_forward(h, s.window, s.stride, mode, f"randpool/{counters['randpool']}")
            counters["randpool"] += 1
        elif s.kind == "softmax":
            h = tc.softmax(h)
    return h


# ---------------------------------------------------------------------------
# checkpoint I/O
#
#   SSLCKPT1\n
#   input <d1> <d2> ...\n
#   layers <k>\n
#   <LayerSpec.to_text()>\n      (k lines)
#   end\n
#   little-endian float32 blocks, per layer in order: weight then bias


def save_network(net: Network, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + b"\n")
    buf.write(("input " + " ".join(str(d) for d in net.input_shape) + "\n").encode())
    buf.write(f"layers {len(net.specs)}\n".encode())
    for s in net.specs:
        buf.write((s.to_text() + "\n").encode())
    buf.write(b"end\n")
    for layer in net.params:
        for t in layer:
            buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_network(path) -> Network:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC + b"\n"):
        raise ParseError(f"{path}: wrong magic, not a checkpoint")
    end = raw.find(b"\nend\n")
    if end < 0:
        raise ParseError(f"{path}: truncated header")
    lines = raw[len(CHECKPOINT_MAGIC) + 1 : end].decode("utf-8", errors="replace").split("\n")
    try:
        if not lines[0].startswith("input ") or not lines[1].startswith("layers "):
            raise ValueError("header fields out of order")
        input_shape = tuple(int(v) for v in lines[0].split()[1:])
        count = int(lines[1].split()[1])
        specs = [LayerSpec.parse(line) for line in lines[2:]]
        if len(specs) != count:
            raise ValueError(f"header lists {len(specs)} layers, expected {count}")
        net = Network(specs, input_shape)
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: bad header ({exc})") from None

    body = memoryview(raw)[end + len(b"\nend\n") :]
    in_shapes = [input_shape] + net.shapes[:-1]
    offset = 0
    for i, (s, in_shape) in enumerate(zip(specs, in_shapes)):
        tensors = []
        for shape in param_shapes(s, in_shape):
            nbytes = 4 * math.prod(shape)
            if offset + nbytes > len(body):
                raise ParseError(f"{path}: truncated weights")
            arr = np.frombuffer(body[offset : offset + nbytes], dtype="<f4").reshape(shape)
            tensors.append(Tensor(arr.astype(np.float32), requires_grad=True))
            offset += nbytes
        net.params[i] = tensors
    if offset != len(body):
        raise ParseError(f"{path}: {len(body) - offset} trailing bytes after weights")
    return net
