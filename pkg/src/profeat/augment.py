"""Weak (pad-crop-flip) and strong (fixed two-op policy + pad-crop-flip)
augmentations, and the teacher/student view pairings.

Every random draw is taken from a generator keyed on ``(seed, sample id,
side, stage)``, so an augmentation is a pure function of its inputs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageBatch


class AugmentConfigError(ValueError):
    pass


# Largest magnitude accepted by each strong op; magnitude 0 is the identity.
OP_RANGES = {
    "shear_x": 0.3,        # shear coefficient
    "shear_y": 0.3,
    "translate_x": 0.45,   # fraction of image size
    "translate_y": 0.45,
    "rotate": 30.0,        # degrees
    "color": 0.9,          # saturation factor 1 +- m
    "posterize": 4.0,      # bits dropped
    "solarize": 1.0,       # threshold 1 - m
    "contrast": 0.9,
    "brightness": 0.9,
    "sharpness": 0.9,
    "autocontrast": 1.0,   # blend weight towards the full op
    "equalize": 1.0,
}

DEFAULT_STRONG_OPS = (
    ("shear_x", 0.3), ("shear_y", 0.3), ("translate_x", 0.25), ("translate_y", 0.25),
    ("rotate", 30.0), ("color", 0.9), ("posterize", 4.0), ("solarize", 0.5),
    ("contrast", 0.9), ("brightness", 0.9), ("sharpness", 0.9),
    ("autocontrast", 1.0), ("equalize", 1.0),
)

_SIGNED = {"shear_x", "shear_y", "translate_x", "translate_y", "rotate",
           "color", "contrast", "brightness", "sharpness"}
_GEOMETRIC = {"shear_x", "shear_y", "translate_x", "translate_y", "rotate"}


@dataclass(frozen=True)
class AugPolicy:
    kind: str = "weak_pc"
    pad: int = 4
    flip_p: float = 0.5
    ops: tuple = ()
    num_ops: int = 2
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("weak_pc", "strong_auto", "identity"):
            raise AugmentConfigError(f"unknown policy kind {self.kind!r}")
        if self.pad < 0:
            raise AugmentConfigError("pad must be non-negative")
        if not 0.0 <= self.flip_p <= 1.0:
            raise AugmentConfigError("flip_p must lie in [0, 1]")
        ops = tuple((str(n), float(m)) for n, m in self.ops)
        for name, mag in ops:
            if name not in OP_RANGES:
                raise AugmentConfigError(
                    f"unknown strong op {name!r}; known ops: {sorted(OP_RANGES)}"
                )
            if not 0.0 <= mag <= OP_RANGES[name]:
                raise AugmentConfigError(
                    f"magnitude {mag} for {name!r} outside [0, {OP_RANGES[name]}]"
                )
        object.__setattr__(self, "ops", ops)
        if self.num_ops < 0:
            raise AugmentConfigError("num_ops must be non-negative")
        if not 0.0 <= self.scale <= 1.0:
            raise AugmentConfigError("scale must lie in [0, 1]")

    @classmethod
    def weak(cls, pad: int = 4, flip_p: float = 0.5) -> "AugPolicy":
        return cls("weak_pc", pad=pad, flip_p=flip_p)

    @classmethod
    def strong(cls, ops=DEFAULT_STRONG_OPS, num_ops: int = 2, pad: int = 4,
               flip_p: float = 0.5, scale: float = 1.0) -> "AugPolicy":
        return cls("strong_auto", pad=pad, flip_p=flip_p, ops=tuple(ops), num_ops=num_ops,
                   scale=scale)

    @classmethod
    def identity(cls) -> "AugPolicy":
        return cls("identity", pad=0, flip_p=0.0)


class PairingMode(str, enum.Enum):
    COMMON_WEAK = "common_weak"
    COMMON_STRONG = "common_strong"
    INDEPENDENT_WEAK = "independent_weak"
    INDEPENDENT_STRONG = "independent_strong"
    STRONG_TEACHER_WEAK_STUDENT = "strong_teacher_weak_student"
    WEAK_TEACHER_STRONG_STUDENT = "weak_teacher_strong_student"


PAIRING_ALIASES = {
    "AG1": PairingMode.COMMON_WEAK,
    "AG2": PairingMode.COMMON_STRONG,
    "AG3": PairingMode.INDEPENDENT_WEAK,
    "AG4": PairingMode.INDEPENDENT_STRONG,
    "AG5": PairingMode.STRONG_TEACHER_WEAK_STUDENT,
    "ours": PairingMode.WEAK_TEACHER_STRONG_STUDENT,
}


def resolve_pairing(name) -> PairingMode:
    if isinstance(name, PairingMode):
        return name
    if name in PAIRING_ALIASES:
        return PAIRING_ALIASES[name]
    try:
        return PairingMode(name)
    except ValueError:
        allowed = list(PAIRING_ALIASES) + [m.value for m in PairingMode]
        raise AugmentConfigError(f"unknown pairing {name!r}; allowed: {allowed}") from None


def _rng(seed: int, sample_id: int, side: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(sample_id), side, stage])


# ---------------------------------------------------------------------------
# weak: reflect pad, random crop, horizontal flip
# ---------------------------------------------------------------------------

def _pad_crop_flip(x: torch.Tensor, ids, seed: int, side: int, pad: int, flip_p: float):
    n, _, h, w = x.shape
    if pad >= min(h, w):
        raise AugmentConfigError(f"pad={pad} must be smaller than the image side {min(h, w)}")
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect") if pad else x
    out = torch.empty_like(x)
    for i in range(n):
        rng = _rng(seed, ids[i], side, 0)
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        flip = rng.random() < flip_p
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop.flip(-1) if flip else crop
    return out


def weak_augment(b: ImageBatch, seed: int, policy: Optional[AugPolicy] = None,
                 side: int = 0) -> ImageBatch:
    policy = policy or AugPolicy.weak()
    if policy.kind == "identity":
        return b
    ids = b.ids.tolist()
    return b.with_pixels(_pad_crop_flip(b.pixels, ids, seed, side, policy.pad, policy.flip_p))


# ---------------------------------------------------------------------------
# strong ops; each takes a batch and a per-sample signed magnitude tensor
# ---------------------------------------------------------------------------

def _gray(x):
    return (0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]).unsqueeze(1)


def _blend(degenerate, x, factor):
    return (degenerate + factor.view(-1, 1, 1, 1) * (x - degenerate)).clamp(0, 1)


def _affine(x, name, mag):
    n = x.shape[0]
    theta = torch.zeros(n, 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = 1
    theta[:, 1, 1] = 1
    if name == "shear_x":
        theta[:, 0, 1] = mag
    elif name == "shear_y":
        theta[:, 1, 0] = mag
    elif name == "translate_x":
        theta[:, 0, 2] = 2 * mag
    elif name == "translate_y":
        theta[:, 1, 2] = 2 * mag
    else:
        rad = mag * math.pi / 180
        theta[:, 0, 0] = torch.cos(rad)
        theta[:, 0, 1] = -torch.sin(rad)
        theta[:, 1, 0] = torch.sin(rad)
        theta[:, 1, 1] = torch.cos(rad)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    # sampling (x - 0.5) with zero padding fills uncovered pixels with mid-gray
    out = F.grid_sample(x - 0.5, grid, mode="bilinear", padding_mode="zeros",
                        align_corners=False) + 0.5
    return out.clamp(0, 1)


def _posterize(x, mag):
    bits = mag.round().to(torch.int64).clamp(0, 8)
    step = (2 ** bits).to(x.dtype).view(-1, 1, 1, 1)
    v = (x * 255).round()
    out = (torch.floor(v / step) * step / 255).clamp(0, 1)
    return torch.where((bits == 0).view(-1, 1, 1, 1), x, out)


def _solarize(x, mag):
    thr = (1 - mag).view(-1, 1, 1, 1)
    return torch.where(x > thr, 1 - x, x)


def _sharpen(x, factor):
    c = x.shape[1]
    k = torch.tensor([[1., 1., 1.], [1., 5., 1.], [1., 1., 1.]], dtype=x.dtype) / 13
    blurred = F.conv2d(x, k.expand(c, 1, 3, 3).contiguous(), groups=c)
    degenerate = x.clone()
    degenerate[:, :, 1:-1, 1:-1] = blurred
    return _blend(degenerate, x, factor)


def _autocontrast(x):
    lo = x.amin(dim=(2, 3), keepdim=True)
    hi = x.amax(dim=(2, 3), keepdim=True)
    scale = torch.where(hi > lo, hi - lo, torch.ones_like(hi))
    return torch.where(hi > lo, (x - lo) / scale, x)


def _equalize(x):
    n, c, h, w = x.shape
    v = (x * 255).round().long().clamp(0, 255).reshape(n * c, -1)
    hist = torch.zeros(n * c, 256, dtype=x.dtype).scatter_add_(1, v, torch.ones_like(v, dtype=x.dtype))
    cdf = hist.cumsum(1)
    cdf_min = torch.where(hist > 0, cdf, torch.full_like(cdf, float("inf"))).amin(1, keepdim=True)
    total = cdf[:, -1:]
    denom = total - cdf_min
    lut = ((cdf - cdf_min).clamp(min=0) / denom.clamp(min=1) * 255).round() / 255
    eq = torch.gather(lut, 1, v)
    flat = x.reshape(n * c, -1)
    eq = torch.where(denom > 0, eq, flat)
    return eq.reshape(n, c, h, w)


def apply_op(x: torch.Tensor, name: str, mag: torch.Tensor) -> torch.Tensor:
    """Apply one strong op with per-sample (signed, where relevant) magnitudes."""
    mag = mag.to(x.dtype)
    if name in _GEOMETRIC:
        return _affine(x, name, mag)
    if name == "color":
        return _blend(_gray(x).expand_as(x), x, 1 + mag)
    if name == "contrast":
        mean = _gray(x).mean(dim=(1, 2, 3), keepdim=True).expand_as(x)
        return _blend(mean, x, 1 + mag)
    if name == "brightness":
        return _blend(torch.zeros_like(x), x, 1 + mag)
    if name == "sharpness":
        return _sharpen(x, 1 + mag)
    if name == "posterize":
        return _posterize(x, mag)
    if name == "solarize":
        return _solarize(x, mag)
    if name == "autocontrast":
        return _blend(x, _autocontrast(x), mag)
    if name == "equalize":
        return _blend(x, _equalize(x), mag)
    raise AugmentConfigError(f"unknown strong op {name!r}")


def strong_augment(b: ImageBatch, seed: int, policy: Optional[AugPolicy] = None,
                   side: int = 0) -> ImageBatch:
    """``num_ops`` randomly chosen ops per image, then pad-crop-flip."""
    policy = policy or AugPolicy.strong()
    if policy.kind != "strong_auto":
        raise AugmentConfigError(f"strong_augment needs a strong_auto policy, got {policy.kind!r}")
    x = b.pixels
    n = x.shape[0]
    if policy.ops and policy.num_ops:
        ids = b.ids.tolist()
        names = [name for name, _ in policy.ops]
        chosen = np.zeros((n, len(names)), dtype=np.float64)
        for i in range(n):
            rng = _rng(seed, ids[i], side, 1)
            picks = rng.choice(len(names), size=policy.num_ops,
                              replace=policy.num_ops > len(names))
            signs = rng.choice([-1.0, 1.0], size=policy.num_ops)
            for p, s in zip(picks, signs):
                name, mag = policy.ops[p]
                chosen[i, p] = (s if name in _SIGNED else 1.0) * mag * policy.scale
        chosen = torch.from_numpy(chosen)
        for j, name in enumerate(names):
            mags = chosen[:, j]
            active = mags != 0
            if not bool(active.any()):
                continue
            idx = active.nonzero().squeeze(1)
            x = x.clone() if x is b.pixels else x
            x[idx] = apply_op(x[idx], name, mags[idx])
    return weak_augment(b.with_pixels(x), seed, AugPolicy.weak(policy.pad, policy.flip_p), side)


def augment(b: ImageBatch, policy: AugPolicy, seed: int, side: int = 0) -> ImageBatch:
    if policy.kind == "identity":
        return b
    if policy.kind == "weak_pc":
        return weak_augment(b, seed, policy, side)
    return strong_augment(b, seed, policy, side)


@dataclass(frozen=True)
class ViewPolicies:
    weak: AugPolicy = field(default_factory=AugPolicy.weak)
    strong: AugPolicy = field(default_factory=AugPolicy.strong)


def make_view_pair(b: ImageBatch, pairing, seed: int,
                   policies: Optional[ViewPolicies] = None) -> tuple:
    """Return ``(teacher_view, student_view)`` for the given pairing mode."""
    pairing = resolve_pairing(pairing)
    pol = policies or ViewPolicies()
    weak, strong = pol.weak, pol.strong
    if pairing is PairingMode.COMMON_WEAK:
        v = augment(b, weak, seed)
        return v, v
    if pairing is PairingMode.COMMON_STRONG:
        v = augment(b, strong, seed)
        return v, v
    if pairing is PairingMode.INDEPENDENT_WEAK:
        return augment(b, weak, seed, side=0), augment(b, weak, seed, side=1)
    if pairing is PairingMode.INDEPENDENT_STRONG:
        return augment(b, strong, seed, side=0), augment(b, strong, seed, side=1)
    if pairing is PairingMode.STRONG_TEACHER_WEAK_STUDENT:
        return augment(b, strong, seed, side=0), augment(b, weak, seed, side=1)
    return augment(b, weak, seed, side=0), augment(b, strong, seed, side=1)
