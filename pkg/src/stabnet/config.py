"""Flat ``key = value`` run configuration files.

One setting per line, ``#`` starts a comment, unknown keys are rejected and
missing keys take the defaults in :data:`DEFAULTS`. Empty values mean
"unset" for the optional keys.
"""

from __future__ import annotations

from pathlib import Path

from .augment import TransformSpec
from .errors import ConfigError
from .layers import mlp, mnist_convnet, parse_architecture
from .losses import LossWeights
from .trainer import TrainConfig

DEFAULTS: dict[str, str] = {
    # data
    "dataset": "mnist",  # mnist | blobs
    "data_dir": "data/mnist",
    "manifest": "",  # split manifest to load; empty -> build from per_class/seed
    "per_class": "10",
    "unlabeled_count": "",  # empty -> whole training set
    "test_count": "",  # empty -> whole test set
    "data_seed": "0",
    "blobs_n_per_class": "500",
    "blobs_test_per_class": "500",
    "blobs_centers": "-2,0; 2,0",
    "blobs_sigma": "0.5",
    # output
    "out_dir": "runs/default",
    # optimisation
    "epochs": "20",
    "lr": "0.05",
    "momentum": "0.9",
    "lr_decay": "0.95",
    "lambda1": "0.1",
    "lambda2": "1.0",
    "normalize_pairs": "false",
    "warmup_epochs": "0",
    "n": "4",
    "groups_per_batch": "32",
    "labeled_fraction": "0.5",
    "steps_per_epoch": "",  # empty -> one pass over the unlabeled set
    "seed": "0",
    # transforms
    "transform": "false",
    "crop": "",  # e.g. 24x24
    "max_rotation": "0",
    "hflip": "false",
    # network
    "arch": "mnist",  # mnist | mlp | explicit layer list separated by ';'
    "dropout_first": "0.1",
    "dropout_last": "0.5",
    "hidden": "",  # fc width(s): mnist -> one int, mlp -> comma list
    "conv_channels": "",  # mnist preset only, e.g. 16,32
    "dropout_after_pool": "false",
    # evaluation / logging
    "eval_passes": "1",
    "eval_stochastic": "false",
    "record_wall_time": "false",
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def apply_overrides(values: dict[str, str], overrides: list[str]) -> dict[str, str]:
    out = dict(values)
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"override must be key=value, got {item!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r} in override")
        out[key] = value.strip()
    return out


class RunConfig:
    """Resolved settings: file values over defaults, with typed accessors."""

    def __init__(self, values: dict[str, str] | None = None, base_dir: Path | None = None):
        self.values = {**DEFAULTS, **(values or {})}
        unknown = set(self.values) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")
        self.base_dir = base_dir or Path.cwd()

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        path = Path(path)
        values = parse_text(path.read_text(), str(path))
        return cls(apply_overrides(values, overrides or []), path.parent)

    def to_text(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in DEFAULTS)

    def path(self, key: str) -> Path | None:
        raw = self.values[key]
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    # typed access ------------------------------------------------------------

    def as_str(self, key: str) -> str:
        return self.values[key]

    def as_int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {self.values[key]!r}") from None

    def opt_int(self, key: str) -> int | None:
        return self.as_int(key) if self.values[key] else None

    def as_float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {self.values[key]!r}") from None

    def as_bool(self, key: str) -> bool:
        v = self.values[key].lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key} must be true/false, got {self.values[key]!r}")

    def ints(self, key: str) -> list[int]:
        try:
            return [int(v) for v in self.values[key].split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"{key} must be a comma-separated list of integers") from None

    # derived objects ---------------------------------------------------------

    def blob_centers(self) -> list[tuple[float, float]]:
        try:
            pts = [tuple(float(v) for v in chunk.split(",")) for chunk in self.values["blobs_centers"].split(";")]
        except ValueError:
            raise ConfigError("blobs_centers must look like 'x,y; x,y; ...'") from None
        if any(len(p) != 2 for p in pts):
            raise ConfigError("blobs_centers entries must be 2-D points")
        return pts

    def transform(self) -> TransformSpec:
        if not self.as_bool("transform"):
            return TransformSpec.identity()
        crop = None
        if self.values["crop"]:
            try:
                h, w = (int(v) for v in self.values["crop"].lower().split("x"))
            except ValueError:
                raise ConfigError(f"crop must look like 24x24, got {self.values['crop']!r}") from None
            crop = (h, w)
        return TransformSpec(crop, self.as_float("max_rotation"), self.as_bool("hflip"), True)

    def architecture(self, num_classes: int):
        arch = self.values["arch"]
        p0, p1 = self.as_float("dropout_first"), self.as_float("dropout_last")
        if arch == "mnist":
            kwargs = {}
            if self.values["conv_channels"]:
                chans = self.ints("conv_channels")
                if len(chans) != 2:
                    raise ConfigError("conv_channels needs two values for the mnist preset")
                kwargs.update(conv1=chans[0], conv2=chans[1])
            if self.values["hidden"]:
                kwargs["hidden"] = self.as_int("hidden")
            return mnist_convnet(num_classes, p_first=p0, p_last=p1,
                                 dropout_after_pool=self.as_bool("dropout_after_pool"), **kwargs)
        if arch == "mlp":
            hidden = tuple(self.ints("hidden")) if self.values["hidden"] else (32, 32)
            return mlp(num_classes, hidden, p0, p1)
        try:
            return parse_architecture(arch)
        except ValueError as exc:
            raise ConfigError(f"bad arch: {exc}") from None

    def train_config(self, num_classes: int) -> TrainConfig:
        try:
            weights = LossWeights(self.as_float("lambda1"), self.as_float("lambda2"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return TrainConfig(
            epochs=self.as_int("epochs"),
            lr=self.as_float("lr"),
            momentum=self.as_float("momentum"),
            lr_decay=self.as_float("lr_decay"),
            weights=weights,
            n=self.as_int("n"),
            groups_per_batch=self.as_int("groups_per_batch"),
            labeled_fraction=self.as_float("labeled_fraction"),
            seed=self.as_int("seed"),
            transform=self.transform(),
            architecture=self.architecture(num_classes),
            normalize_pairs=self.as_bool("normalize_pairs"),
            warmup_epochs=self.as_int("warmup_epochs"),
            steps_per_epoch=self.opt_int("steps_per_epoch"),
            eval_passes=self.as_int("eval_passes"),
            eval_stochastic=self.as_bool("eval_stochastic"),
            record_wall_time=self.as_bool("record_wall_time"),
        )
