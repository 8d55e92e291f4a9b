"""Domain types, validity contracts, and deterministic seeding.

All spatial arrays follow the [height, width, channel] axis order. Flow
fields store per-pixel displacement in pixels with component 0 = horizontal
(u) and component 1 = vertical (v); positive flow points toward the
correspondence in the later frame.

Types hold torch tensors so downstream modules can differentiate through
them; constructors accept numpy arrays and convert losslessly.
"""

from __future__ import annotations

import enum
import hashlib
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np
import torch

from .errors import InvariantViolation

ArrayLike = Union[np.ndarray, torch.Tensor]

MIN_FRAME_SIDE = 8

# Validation on domain-typed inputs runs by default; export KINFLOW_SKIP_VALIDATE=1
# (or call set_validation(False)) to skip it in tuned release runs.
_validation_enabled = os.environ.get("KINFLOW_SKIP_VALIDATE", "0") != "1"


def set_validation(enabled: bool) -> None:
    global _validation_enabled
    _validation_enabled = bool(enabled)


def validation_enabled() -> bool:
    return _validation_enabled


def as_float_tensor(data: ArrayLike, name: str = "array") -> torch.Tensor:
    """Convert to a float torch tensor, preserving float32/float64 bits."""
    if isinstance(data, torch.Tensor):
        t = data
    elif isinstance(data, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(data))
    else:
        t = torch.as_tensor(data)
    if not t.is_floating_point():
        t = t.to(torch.float32)
    return t


class FeatureStage(enum.Enum):
    RAW = "raw"
    POS_EMBEDDED = "pos_embedded"
    SELF_ATTENDED = "self_attended"
    CROSS_ATTENDED = "cross_attended"


@dataclass(frozen=True)
class Frame:
    """An H x W x C image with values in [0, 1].

    ``time_tag`` is the frame timestamp in units of the inter-frame
    interval (0.0 for the first frame of a pair, 1.0 for the second).
    """

    pixels: torch.Tensor
    time_tag: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "pixels", as_float_tensor(self.pixels, "pixels"))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def numpy(self) -> np.ndarray:
        return self.pixels.detach().cpu().numpy()


@dataclass(frozen=True)
class FlowField:
    """Dense per-pixel displacement map, uv shape [H, W, 2], in pixels.

    ``valid``, when present, marks pixels whose ground truth is defined
    (KITTI-style sparse annotations); metrics and losses read only those.
    """

    uv: torch.Tensor
    valid: Optional[torch.Tensor] = None

    def __post_init__(self):
        object.__setattr__(self, "uv", as_float_tensor(self.uv, "uv"))
        if self.valid is not None:
            v = self.valid
            if isinstance(v, np.ndarray):
                v = torch.from_numpy(np.ascontiguousarray(v))
            object.__setattr__(self, "valid", v.to(torch.bool))

    @property
    def height(self) -> int:
        return self.uv.shape[0]

    @property
    def width(self) -> int:
        return self.uv.shape[1]

    def numpy(self) -> np.ndarray:
        return self.uv.detach().cpu().numpy()


@dataclass(frozen=True)
class FlowSequence:
    """Ordered intermediate flow predictions; the last item is final."""

    items: tuple

    def __init__(self, items: Sequence[FlowField]):
        object.__setattr__(self, "items", tuple(items))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[FlowField]:
        return iter(self.items)

    def __getitem__(self, i) -> FlowField:
        return self.items[i]

    @property
    def final(self) -> FlowField:
        return self.items[-1]


@dataclass(frozen=True)
class FeatureMap:
    """Latent H' x W' x D tensor at ``scale``-fold downsampling.

    For a source frame of size H x W, H' = ceil(H / scale) and
    W' = ceil(W / scale).
    """

    data: torch.Tensor
    stage: FeatureStage = FeatureStage.RAW
    scale: int = 8

    def __post_init__(self):
        object.__setattr__(self, "data", as_float_tensor(self.data, "data"))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class OcclusionMap:
    """Per-pixel occlusion probability in [0, 1]; 1 = visible at t0 only."""

    occ: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "occ", as_float_tensor(self.occ, "occ"))

    @property
    def height(self) -> int:
        return self.occ.shape[0]

    @property
    def width(self) -> int:
        return self.occ.shape[1]

    def binary(self, threshold: float = 0.5) -> torch.Tensor:
        return self.occ > threshold

    def numpy(self) -> np.ndarray:
        return self.occ.detach().cpu().numpy()


@dataclass(frozen=True)
class RngSeed:
    """Root seed; identical seed + identical config reproduce runs bit-exactly."""

    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise InvariantViolation(f"seed must be a nonnegative integer, got {self.seed!r}")


def _fail(type_name: str, invariant: str, detail: str = "") -> None:
    msg = f"{type_name}: invariant '{invariant}' violated"
    if detail:
        msg += f" ({detail})"
    raise InvariantViolation(msg)


def _first_bad_index(mask: torch.Tensor):
    idx = mask.reshape(-1).nonzero()
    if idx.numel() == 0:
        return None
    flat = int(idx[0])
    return np.unravel_index(flat, tuple(mask.shape))


def _check_finite(t: torch.Tensor, type_name: str) -> None:
    bad = ~torch.isfinite(t)
    if bool(bad.any()):
        _fail(type_name, "finite", f"non-finite value at index {_first_bad_index(bad)}")


def validate(obj) -> None:
    """Check every invariant of a domain-typed value; silent iff all hold.

    Idempotent and side-effect free. Raises InvariantViolation naming the
    failed invariant and the first offending index.
    """
    if isinstance(obj, Frame):
        p = obj.pixels
        if p.ndim != 3 or p.shape[2] not in (1, 3):
            _fail("Frame", "shape [H, W, C] with C in {1, 3}", f"got {tuple(p.shape)}")
        if p.shape[0] < MIN_FRAME_SIDE or p.shape[1] < MIN_FRAME_SIDE:
            _fail("Frame", f"H, W >= {MIN_FRAME_SIDE}", f"got {tuple(p.shape[:2])}")
        _check_finite(p, "Frame")
        bad = (p < 0) | (p > 1)
        if bool(bad.any()):
            _fail("Frame", "values in [0, 1]", f"out-of-range value at index {_first_bad_index(bad)}")
    elif isinstance(obj, FlowField):
        uv = obj.uv
        if uv.ndim != 3 or uv.shape[2] != 2:
            _fail("FlowField", "last dim = 2", f"got shape {tuple(uv.shape)}")
        _check_finite(uv, "FlowField")
        if obj.valid is not None and tuple(obj.valid.shape) != tuple(uv.shape[:2]):
            _fail("FlowField", "valid mask matches [H, W]",
                  f"mask {tuple(obj.valid.shape)} vs flow {tuple(uv.shape[:2])}")
    elif isinstance(obj, FlowSequence):
        if len(obj.items) < 1:
            _fail("FlowSequence", "length >= 1")
        shapes = {tuple(f.uv.shape[:2]) for f in obj.items}
        if len(shapes) != 1:
            _fail("FlowSequence", "all items share H, W", f"got {sorted(shapes)}")
        for f in obj.items:
            validate(f)
    elif isinstance(obj, FeatureMap):
        d = obj.data
        if d.ndim != 3:
            _fail("FeatureMap", "shape [H', W', D]", f"got {tuple(d.shape)}")
        if not isinstance(obj.stage, FeatureStage):
            _fail("FeatureMap", "stage is a FeatureStage", f"got {obj.stage!r}")
        if obj.scale < 1:
            _fail("FeatureMap", "scale >= 1", f"got {obj.scale}")
        _check_finite(d, "FeatureMap")
    elif isinstance(obj, OcclusionMap):
        o = obj.occ
        if o.ndim != 2:
            _fail("OcclusionMap", "shape [H, W]", f"got {tuple(o.shape)}")
        _check_finite(o, "OcclusionMap")
        bad = (o < 0) | (o > 1)
        if bool(bad.any()):
            _fail("OcclusionMap", "values in [0, 1]",
                  f"out-of-range value at index {_first_bad_index(bad)}")
    elif isinstance(obj, RngSeed):
        pass  # checked at construction
    else:
        raise InvariantViolation(f"validate: unknown domain type {type(obj).__name__}")


def maybe_validate(*objs) -> None:
    """validate() each argument unless validation is switched off."""
    if _validation_enabled:
        for obj in objs:
            validate(obj)


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    digest = hashlib.md5(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_rng(seed: Union[int, RngSeed], *keys) -> np.random.Generator:
    """Independent numpy Generator for (seed, *keys); stable across runs.

    Keys may be ints or strings; the same tuple always yields the same
    stream, so any consumer can be reconstructed mid-run from its step index.
    """
    root = seed.seed if isinstance(seed, RngSeed) else int(seed)
    entropy = [root & 0xFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def torch_seed_for(seed: Union[int, RngSeed], *keys) -> int:
    """64-bit torch seed derived from (seed, *keys)."""
    rng = derive_rng(seed, *keys)
    return int(rng.integers(0, 2**63 - 1))
