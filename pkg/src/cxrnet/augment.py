"""On-the-fly image augmentation.

Five transforms, each gated by a policy flag: rotation, translation,
horizontal flip, additive intensity shift and isotropic zoom.  Geometry is
applied as one combined affine warp (rotation about the center, then zoom,
then translation, then optional flip) in a single bilinear resampling pass
with nearest-edge fill; the intensity shift and a final clip to [0, 1] follow.

Parameter draws consume the random stream only for enabled transforms, in the
fixed flag order, so a policy's outputs never depend on a disabled range.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

FLAG_ORDER = ("rotation", "translation", "horizontal_flip", "intensity_shift", "zoom")

#: total count of apply() invocations, for contamination auditing
apply_call_count = 0


def reset_apply_counter() -> None:
    global apply_call_count
    apply_call_count = 0


@dataclass(frozen=True)
class AugmentationPolicy:
    rotation: bool = False
    translation: bool = False
    horizontal_flip: bool = False
    intensity_shift: bool = False
    zoom: bool = False
    rotation_deg: float = 10.0
    translation_frac: float = 0.10
    intensity_frac: float = 0.10
    zoom_frac: float = 0.15

    def enabled_flags(self) -> tuple[str, ...]:
        return tuple(f for f in FLAG_ORDER if getattr(self, f))

    @property
    def any_enabled(self) -> bool:
        return bool(self.enabled_flags())

    def label(self) -> str:
        flags = self.enabled_flags()
        if not flags:
            return "none"
        if len(flags) == len(FLAG_ORDER):
            return "all"
        return "+".join(flags)

    def to_json(self) -> dict:
        return {f: getattr(self, f) for f in FLAG_ORDER} | {
            "rotation_deg": self.rotation_deg,
            "translation_frac": self.translation_frac,
            "intensity_frac": self.intensity_frac,
            "zoom_frac": self.zoom_frac,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AugmentationPolicy":
        allowed = set(FLAG_ORDER) | {"rotation_deg", "translation_frac",
                                     "intensity_frac", "zoom_frac"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown keys in augmentation policy: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class AugmentationParams:
    theta_deg: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    flip: bool = False
    delta_intensity: float = 0.0
    zoom_factor: float = 1.0

    @property
    def geometry_identity(self) -> bool:
        return (self.theta_deg == 0.0 and self.shift_x == 0.0 and self.shift_y == 0.0
                and not self.flip and self.zoom_factor == 1.0)

    @property
    def is_identity(self) -> bool:
        return self.geometry_identity and self.delta_intensity == 0.0


IDENTITY_PARAMS = AugmentationParams()


def sample_params(policy: AugmentationPolicy, rng: np.random.Generator) -> AugmentationParams:
    """Draw transform parameters for one image; disabled flags draw nothing."""
    theta = rng.uniform(-policy.rotation_deg, policy.rotation_deg) if policy.rotation else 0.0
    if policy.translation:
        shift_x = rng.uniform(-policy.translation_frac, policy.translation_frac)
        shift_y = rng.uniform(-policy.translation_frac, policy.translation_frac)
    else:
        shift_x = shift_y = 0.0
    flip = bool(rng.random() < 0.5) if policy.horizontal_flip else False
    delta = rng.uniform(-policy.intensity_frac, policy.intensity_frac) if policy.intensity_shift else 0.0
    zoom = 1.0 + rng.uniform(-policy.zoom_frac, policy.zoom_frac) if policy.zoom else 1.0
    return AugmentationParams(theta, shift_x, shift_y, flip, delta, zoom)


def _warp(image: np.ndarray, params: AugmentationParams) -> np.ndarray:
    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    x = xx - cx
    y = yy - cy
    theta = math.radians(params.theta_deg)
    c, s = math.cos(theta), math.sin(theta)
    # invert each stage in reverse: rotation, zoom, translation, flip
    xr = c * x + s * y
    yr = -s * x + c * y
    xz = xr / params.zoom_factor
    yz = yr / params.zoom_factor
    xt = xz - params.shift_x * w
    yt = yz - params.shift_y * h
    if params.flip:
        xt = -xt
    sx = np.clip(xt + cx, 0.0, w - 1.0)
    sy = np.clip(yt + cy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[:, :, None]
    fy = (sy - y0)[:, :, None]
    top = (1.0 - fx) * image[y0, x0] + fx * image[y0, x1]
    bottom = (1.0 - fx) * image[y1, x0] + fx * image[y1, x1]
    out = (1.0 - fy) * top + fy * bottom
    return out.astype(image.dtype, copy=False)


def apply(image: np.ndarray, params: AugmentationParams) -> np.ndarray:
    """Transform one HWC image in [0, 1]; identity params return an exact copy."""
    global apply_call_count
    apply_call_count += 1
    if image.ndim != 3:
        raise ValueError(f"apply expects an HWC image, got shape {image.shape}")
    if params.is_identity:
        return image.copy()
    out = image
    if not params.geometry_identity:
        out = _warp(out, params)
    if params.delta_intensity:
        out = out + out.dtype.type(params.delta_intensity)
    return np.clip(out, 0.0, 1.0)


def enumerate_policies(base: AugmentationPolicy | None = None) -> list[AugmentationPolicy]:
    """The 32 flag subsets in sweep order: none, all, singles, pairs, triples,
    quadruples; lexicographic over the flag order within each group.

    Range fields are taken from ``base`` when given.
    """
    ranges = {}
    if base is not None:
        ranges = {"rotation_deg": base.rotation_deg,
                  "translation_frac": base.translation_frac,
                  "intensity_frac": base.intensity_frac,
                  "zoom_frac": base.zoom_frac}
    policies = [AugmentationPolicy(**ranges),
                AugmentationPolicy(**{f: True for f in FLAG_ORDER}, **ranges)]
    for k in range(1, len(FLAG_ORDER)):
        for combo in itertools.combinations(FLAG_ORDER, k):
            policies.append(AugmentationPolicy(**{f: True for f in combo}, **ranges))
    return policies
