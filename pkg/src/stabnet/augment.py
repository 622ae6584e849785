"""Random per-replica input transforms: rotation, horizontal flip, random crop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError


@dataclass(frozen=True)
class TransformSpec:
    crop_to: tuple[int, int] | None = None
    max_rotation_deg: float = 0.0
    hflip: bool = False
    enabled: bool = True

    def __post_init__(self):
        if self.max_rotation_deg < 0:
            raise ParameterError(f"max_rotation_deg must be >= 0, got {self.max_rotation_deg}")
        if self.crop_to is not None and (len(self.crop_to) != 2 or min(self.crop_to) < 1):
            raise ParameterError(f"crop_to must be a pair of positive ints, got {self.crop_to}")

    @classmethod
    def identity(cls) -> "TransformSpec":
        return cls(enabled=False)

    @property
    def is_identity(self) -> bool:
        return not self.enabled or (self.max_rotation_deg == 0 and not self.hflip and self.crop_to is None)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if not self.enabled or self.crop_to is None:
            return tuple(shape)
        return (*shape[:-2], *self.crop_to)

    def check(self, shape: tuple[int, ...]) -> None:
        if not self.enabled:
            return
        if len(shape) != 3:
            raise ParameterError(f"transforms apply to [C, H, W] samples, got {shape}")
        if self.crop_to is not None and (self.crop_to[0] > shape[1] or self.crop_to[1] > shape[2]):
            raise ParameterError(f"crop {self.crop_to} larger than input {shape[1]}x{shape[2]}")


def rotate(x: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate each channel about the image centre; bilinear, zero fill."""
    return ndimage.rotate(x, angle_deg, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)


def apply_transform(x: np.ndarray, spec: TransformSpec, rng: np.random.Generator) -> np.ndarray:
    """Rotate by U(-max, max) degrees, flip horizontally with p=0.5, then crop at a random anchor."""
    if not spec.enabled:
        return x
    spec.check(x.shape)
    out = x
    if spec.max_rotation_deg > 0:
        angle = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg)
        out = rotate(out, angle).astype(x.dtype, copy=False)
    if spec.hflip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    if spec.crop_to is not None:
        ch, cw = spec.crop_to
        top = int(rng.integers(0, out.shape[1] - ch + 1))
        left = int(rng.integers(0, out.shape[2] - cw + 1))
        out = out[:, top : top + ch, left : left + cw]
    return np.ascontiguousarray(out)


def replicate_with_transforms(x: np.ndarray, n: int, spec: TransformSpec, rng) -> list[np.ndarray]:
    """n independent transform draws of the same sample.

    ``rng`` is either one generator shared by all replicas or a callable
    ``rng(j)`` returning the generator for replica j.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if not spec.enabled:
        return [x.copy() for _ in range(n)]
    spec.check(x.shape)
    pick = rng if callable(rng) else (lambda j: rng)
    return [apply_transform(x, spec, pick(j)) for j in range(n)]
