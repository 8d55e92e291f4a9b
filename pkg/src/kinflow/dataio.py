"""Flow file formats, synthetic labeled pairs, and dataset iteration.

Synthetic pairs follow the resampling convention used throughout the
package: ``frame1(p) = bilinear(frame0, p + gt_flow(p))`` with zero fill
where the sample point leaves the frame. Ground-truth flow is the analytic
displacement of the chosen motion kind, so the photometric identity between
the pair holds exactly by construction on non-occluded pixels.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from . import warp as warp_ops
from .core import (
    FlowField,
    Frame,
    OcclusionMap,
    RngSeed,
    derive_rng,
    maybe_validate,
    validate,
)
from .errors import ConfigError, FormatError, IoError, RangeError, SpecError

FLO_MAGIC = 202021.25

MOTION_KINDS = ("translation", "rotation", "zoom", "affine")

TEXTURE_SIGMA = 2.0  # band-limits the noise so bilinear resampling is well-posed


@dataclass(frozen=True)
class SampleRecord:
    """One training/evaluation sample: a frame pair plus optional labels."""

    frame0: Frame
    frame1: Frame
    gt_flow: Optional[FlowField] = None
    gt_occ: Optional[OcclusionMap] = None
    id: str = ""

    def __post_init__(self):
        if self.frame0.pixels.shape != self.frame1.pixels.shape:
            raise SpecError(
                f"SampleRecord {self.id!r}: frame shapes differ "
                f"{tuple(self.frame0.pixels.shape)} vs {tuple(self.frame1.pixels.shape)}"
            )
        h, w = self.frame0.height, self.frame0.width
        if self.gt_flow is not None and (self.gt_flow.height, self.gt_flow.width) != (h, w):
            raise SpecError(f"SampleRecord {self.id!r}: gt_flow shape mismatch")
        if self.gt_occ is not None and (self.gt_occ.height, self.gt_occ.width) != (h, w):
            raise SpecError(f"SampleRecord {self.id!r}: gt_occ shape mismatch")


@dataclass(frozen=True)
class SyntheticMotionSpec:
    """Parameters of one analytic motion: kind + kind-specific params.

    params keys by kind:
      translation: dx, dy (pixels)
      rotation:    angle (radians), optional cx, cy (default frame center)
      zoom:        factor in [0.5, 2.0], optional cx, cy
      affine:      a, b, c, d, tx, ty for p -> A p + t, A = [[a, b], [c, d]]
    """

    kind: str
    params: dict
    texture_seed: RngSeed = field(default_factory=RngSeed)

    def __post_init__(self):
        if self.kind not in MOTION_KINDS:
            raise SpecError(f"unknown motion kind {self.kind!r}; expected one of {MOTION_KINDS}")


# ---------------------------------------------------------------------------
# .flo (Middlebury) format
# ---------------------------------------------------------------------------

def write_flo(flow: FlowField, path) -> None:
    """Write a flow field in the little-endian .flo layout.

    A valid-mask is not representable in .flo; use write_kitti_png instead.
    """
    maybe_validate(flow)
    if flow.valid is not None:
        raise FormatError(".flo cannot carry a valid mask; use the KITTI PNG format")
    uv = np.ascontiguousarray(flow.numpy(), dtype="<f4")
    h, w = uv.shape[:2]
    header = (
        np.array([FLO_MAGIC], dtype="<f4").tobytes()
        + np.array([w, h], dtype="<i4").tobytes()
    )
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(uv.tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_flo(path) -> FlowField:
    """Read a little-endian .flo file into a FlowField."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad magic constant {magic!r}")
    w, h = (int(x) for x in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: nonsensical size {w}x{h}")
    expected = 12 + 4 * 2 * w * h
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)")
    uv = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(uv=uv.copy())


# ---------------------------------------------------------------------------
# KITTI 16-bit PNG format
# ---------------------------------------------------------------------------

def write_kitti_png(flow: FlowField, path) -> None:
    """Encode flow as 16-bit RGB PNG: R = u*64 + 2^15, G likewise, B = valid.

    Values are clamped to the representable range [-512, 511.984375] and
    quantized to 1/64 px. Pixels with valid = false are stored as zeros.
    """
    maybe_validate(flow)
    uv = flow.numpy().astype(np.float64)
    h, w = uv.shape[:2]
    q = np.rint(uv * 64.0 + 2.0 ** 15)
    q = np.clip(q, 0, 65535).astype(np.uint16)
    valid = np.ones((h, w), np.uint16) if flow.valid is None else (
        flow.valid.numpy().astype(np.uint16)
    )
    q[valid == 0] = 0
    rgb = np.dstack([q[..., 0], q[..., 1], valid]).astype(np.uint16)
    bgr = rgb[..., ::-1]
    if not cv2.imwrite(str(path), bgr):
        raise IoError(f"cannot write {path}")


def read_kitti_png(path) -> FlowField:
    """Decode a KITTI-style 16-bit flow PNG: u = (R - 2^15)/64, valid = B > 0."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise IoError(f"cannot read {path}")
    if img.dtype != np.uint16:
        raise FormatError(f"{path}: expected 16-bit PNG, got dtype {img.dtype}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"{path}: expected 3 channels, got shape {img.shape}")
    rgb = img[..., ::-1].astype(np.float64)
    u = (rgb[..., 0] - 2.0 ** 15) / 64.0
    v = (rgb[..., 1] - 2.0 ** 15) / 64.0
    valid = rgb[..., 2] > 0
    uv = np.stack([u, v], axis=-1).astype(np.float32)
    uv[~valid] = 0.0
    return FlowField(uv=uv, valid=valid)


# ---------------------------------------------------------------------------
# Frame / occlusion image I/O
# ---------------------------------------------------------------------------

def write_frame_png(frame: Frame, path, bits: int = 16) -> None:
    """Write a frame as an 8- or 16-bit PNG (16-bit keeps training precision)."""
    maybe_validate(frame)
    arr = frame.numpy()
    peak = 65535.0 if bits == 16 else 255.0
    dtype = np.uint16 if bits == 16 else np.uint8
    img = np.rint(arr * peak).astype(dtype)
    if img.shape[2] == 1:
        img = img[..., 0]
    else:
        img = img[..., ::-1]  # cv2 writes BGR
    if not cv2.imwrite(str(path), img):
        raise IoError(f"cannot write {path}")


def read_frame_png(path, time_tag: float = 0.0) -> Frame:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise IoError(f"cannot read {path}")
    peak = 65535.0 if img.dtype == np.uint16 else 255.0
    arr = img.astype(np.float32) / peak
    if arr.ndim == 2:
        arr = arr[..., None]
    else:
        arr = arr[..., ::-1].copy()  # BGR -> RGB
        if arr.shape[2] == 4:
            arr = arr[..., :3]
    return Frame(pixels=arr, time_tag=time_tag)


def write_occ_png(occ: OcclusionMap, path) -> None:
    img = np.rint(occ.numpy() * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), img):
        raise IoError(f"cannot write {path}")


def read_occ_png(path) -> OcclusionMap:
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise IoError(f"cannot read {path}")
    return OcclusionMap(occ=img.astype(np.float32) / 255.0)


# ---------------------------------------------------------------------------
# Analytic motions and synthetic pairs
# ---------------------------------------------------------------------------

def _grid(h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def _motion_matrices(spec: SyntheticMotionSpec, size: Tuple[int, int]):
    """Return (A, t) with  M(p) = A p + t  in (x, y) coordinates."""
    h, w = size
    p = spec.params
    cx = float(p.get("cx", (w - 1) / 2.0))
    cy = float(p.get("cy", (h - 1) / 2.0))
    if spec.kind == "translation":
        dx, dy = float(p["dx"]), float(p["dy"])
        if abs(dx) > w / 4 or abs(dy) > h / 4:
            raise SpecError(f"translation ({dx}, {dy}) exceeds (W/4, H/4) = ({w/4}, {h/4})")
        return np.eye(2), np.array([dx, dy])
    if spec.kind == "rotation":
        ang = float(p["angle"])
        ca, sa = math.cos(ang), math.sin(ang)
        a = np.array([[ca, -sa], [sa, ca]])
        c = np.array([cx, cy])
        return a, c - a @ c
    if spec.kind == "zoom":
        z = float(p["factor"])
        if not 0.5 <= z <= 2.0:
            raise SpecError(f"zoom factor {z} outside [0.5, 2.0]")
        a = np.eye(2) * z
        c = np.array([cx, cy])
        return a, c - a @ c
    # affine
    a = np.array([[float(p["a"]), float(p["b"])], [float(p["c"]), float(p["d"])]])
    t = np.array([float(p.get("tx", 0.0)), float(p.get("ty", 0.0))])
    if abs(np.linalg.det(a)) < 1e-6:
        raise SpecError("affine matrix is singular")
    return a, t


def analytic_flow(spec: SyntheticMotionSpec, size: Tuple[int, int],
                  inverse: bool = False) -> FlowField:
    """Dense flow of the spec's motion: M(p) - p, or M^{-1}(p) - p."""
    h, w = size
    a, t = _motion_matrices(spec, size)
    if inverse:
        a_inv = np.linalg.inv(a)
        a, t = a_inv, -a_inv @ t
    xs, ys = _grid(h, w)
    u = (a[0, 0] - 1.0) * xs + a[0, 1] * ys + t[0]
    v = a[1, 0] * xs + (a[1, 1] - 1.0) * ys + t[1]
    return FlowField(uv=np.stack([u, v], axis=-1).astype(np.float32))


def make_texture(seed: RngSeed, size: Tuple[int, int], channels: int = 3) -> Frame:
    """Band-limited random texture: Gaussian-smoothed uniform noise in [0, 1]."""
    h, w = size
    rng = derive_rng(seed, "texture")
    noise = rng.uniform(0.0, 1.0, size=(h, w, channels))
    smooth = np.stack(
        [gaussian_filter(noise[..., c], sigma=TEXTURE_SIGMA, mode="reflect")
         for c in range(channels)],
        axis=-1,
    )
    lo, hi = smooth.min(), smooth.max()
    if hi - lo < 1e-9:
        smooth = np.full_like(smooth, 0.5)
    else:
        smooth = (smooth - lo) / (hi - lo)
    return Frame(pixels=smooth.astype(np.float32), time_tag=0.0)


def resample_through_flow(frame: Frame, flow: FlowField) -> Tuple[Frame, np.ndarray]:
    """out(p) = bilinear(frame, p + flow(p)); zero fill outside the frame.

    Returns (resampled frame, bool map of out-of-frame sample points).
    """
    pix = frame.numpy().astype(np.float32)
    uv = flow.numpy().astype(np.float32)
    h, w = pix.shape[:2]
    xs, ys = _grid(h, w)
    x = (xs + uv[..., 0]).astype(np.float32)
    y = (ys + uv[..., 1]).astype(np.float32)
    out_of_frame = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xc - x0).astype(np.float32)[..., None]
    wy = (yc - y0).astype(np.float32)[..., None]
    v00 = pix[y0, x0]
    v01 = pix[y0, x1]
    v10 = pix[y1, x0]
    v11 = pix[y1, x1]
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)
    out[out_of_frame] = 0.0
    return Frame(pixels=out, time_tag=frame.time_tag), out_of_frame


def forward_coverage_occlusion(flow: FlowField) -> OcclusionMap:
    """Brute-force mapping oracle: a pixel is occluded iff its forward target
    p + flow(p) leaves the frame.

    For the injective analytic motions generated here this is the exact
    ground truth; it is the independent reference the consistency-based
    occlusion estimate is checked against.
    """
    uv = flow.numpy()
    h, w = uv.shape[:2]
    occ = np.zeros((h, w), np.float32)
    for i in range(h):
        for j in range(w):
            tx = j + uv[i, j, 0]
            ty = i + uv[i, j, 1]
            if tx < 0 or tx > w - 1 or ty < 0 or ty > h - 1:
                occ[i, j] = 1.0
    return OcclusionMap(occ=occ)


def synth_pair(spec: SyntheticMotionSpec, size: Tuple[int, int],
               channels: int = 3) -> SampleRecord:
    """Generate a labeled pair with exact analytic flow and occlusion.

    frame1 is frame0 resampled backward through gt_flow (zero fill outside);
    gt_occ comes from forward-backward consistency of the analytic flow pair,
    which for these injective motions equals the out-of-frame set.
    """
    h, w = size
    frame0 = make_texture(spec.texture_seed, size, channels)
    fwd = analytic_flow(spec, size, inverse=False)
    bwd = analytic_flow(spec, size, inverse=True)
    frame1, _ = resample_through_flow(frame0, fwd)
    frame1 = Frame(pixels=frame1.pixels, time_tag=1.0)
    gt_occ = warp_ops.occlusion_oracle(fwd, bwd)
    rec_id = f"{spec.kind}_{spec.texture_seed.seed}"
    return SampleRecord(frame0=frame0, frame1=frame1, gt_flow=fwd, gt_occ=gt_occ, id=rec_id)


def make_subsampled_pair(record: SampleRecord, alpha: float) -> SampleRecord:
    """Rebuild the pair at intermediate time t0 + alpha * dt.

    Under the constant-velocity construction the intermediate flow is exactly
    alpha * gt_flow; frame1 and the occlusion map are regenerated through it.
    alpha = 1 reproduces the record bit-exactly.
    """
    if record.gt_flow is None:
        raise SpecError("make_subsampled_pair requires gt_flow")
    if not 0.0 < alpha <= 1.0:
        raise RangeError(f"alpha must lie in (0, 1], got {alpha}")
    sub_uv = record.gt_flow.uv * alpha
    sub_flow = FlowField(uv=sub_uv, valid=record.gt_flow.valid)
    frame1, out_of_frame = resample_through_flow(record.frame0, sub_flow)
    frame1 = Frame(pixels=frame1.pixels, time_tag=float(alpha))
    gt_occ = OcclusionMap(occ=torch.from_numpy(out_of_frame.astype(np.float32)))
    return SampleRecord(
        frame0=record.frame0,
        frame1=frame1,
        gt_flow=sub_flow,
        gt_occ=gt_occ,
        id=f"{record.id}@a{alpha:g}",
    )


# ---------------------------------------------------------------------------
# Dataset iteration
# ---------------------------------------------------------------------------

def _crop_and_flip(rec: SampleRecord, y0: int, x0: int, ch: int, cw: int,
                   flip: bool) -> SampleRecord:
    def cut(t: torch.Tensor) -> torch.Tensor:
        return t[y0:y0 + ch, x0:x0 + cw]

    f0 = cut(rec.frame0.pixels)
    f1 = cut(rec.frame1.pixels)
    flow_uv = cut(rec.gt_flow.uv) if rec.gt_flow is not None else None
    valid = cut(rec.gt_flow.valid) if (rec.gt_flow is not None and rec.gt_flow.valid is not None) else None
    occ = cut(rec.gt_occ.occ) if rec.gt_occ is not None else None
    if flip:
        f0 = torch.flip(f0, dims=[1])
        f1 = torch.flip(f1, dims=[1])
        if flow_uv is not None:
            flow_uv = torch.flip(flow_uv, dims=[1])
            flow_uv = torch.stack([-flow_uv[..., 0], flow_uv[..., 1]], dim=-1)
        if valid is not None:
            valid = torch.flip(valid, dims=[1])
        if occ is not None:
            occ = torch.flip(occ, dims=[1])
    return SampleRecord(
        frame0=Frame(pixels=f0, time_tag=rec.frame0.time_tag),
        frame1=Frame(pixels=f1, time_tag=rec.frame1.time_tag),
        gt_flow=FlowField(uv=flow_uv, valid=valid) if flow_uv is not None else None,
        gt_occ=OcclusionMap(occ=occ) if occ is not None else None,
        id=rec.id,
    )


def batches_per_epoch(n_records: int, batch: int) -> int:
    if batch < 1 or batch > n_records:
        raise ConfigError(f"batch size {batch} incompatible with {n_records} records")
    return n_records // batch


def batch_at(records: Sequence[SampleRecord], step: int, batch: int,
             seed: Union[int, RngSeed], crop: Optional[Tuple[int, int]] = None,
             augment: bool = False) -> List[SampleRecord]:
    """The batch emitted at global step ``step``; a pure function of its args.

    Epoch order is a seeded permutation; crops and horizontal flips are
    derived from (seed, step, slot), so training can be resumed from any
    step without replaying the stream.
    """
    n = len(records)
    spe = batches_per_epoch(n, batch)
    h, w = records[0].frame0.height, records[0].frame0.width
    if crop is not None:
        ch, cw = crop
        if ch > h or cw > w:
            raise ConfigError(f"crop {crop} larger than frames ({h}, {w})")
    epoch, k = divmod(step, spe)
    order = derive_rng(seed, "order", epoch).permutation(n)
    out = []
    for slot, idx in enumerate(order[k * batch:(k + 1) * batch]):
        rec = records[int(idx)]
        if crop is None and not augment:
            out.append(rec)
            continue
        rng = derive_rng(seed, "aug", step, slot)
        ch, cw = crop if crop is not None else (h, w)
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        flip = augment and bool(rng.integers(0, 2))
        out.append(_crop_and_flip(rec, y0, x0, ch, cw, flip))
    return out


def dataset_iter(records: Sequence[SampleRecord], batch: int,
                 seed: Union[int, RngSeed], crop: Optional[Tuple[int, int]] = None,
                 augment: bool = False,
                 epochs: Optional[int] = None) -> Iterator[List[SampleRecord]]:
    """Deterministic shuffled batch stream; epochs=None streams forever."""
    spe = batches_per_epoch(len(records), batch)
    step = 0
    while epochs is None or step < epochs * spe:
        yield batch_at(records, step, batch, seed, crop, augment)
        step += 1


# ---------------------------------------------------------------------------
# Manifests: a synthetic corpus is reproducible from its manifest alone
# ---------------------------------------------------------------------------

def write_manifest(specs: Sequence[SyntheticMotionSpec], size: Tuple[int, int],
                   channels: int, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            for spec in specs:
                rec = {
                    "id": f"{spec.kind}_{spec.texture_seed.seed}",
                    "kind": spec.kind,
                    "params": spec.params,
                    "texture_seed": spec.texture_seed.seed,
                    "size": [int(size[0]), int(size[1])],
                    "channels": int(channels),
                }
                f.write(json.dumps(rec) + "\n")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def load_manifest(path) -> List[SampleRecord]:
    """Regenerate every sample named in a manifest (exact float precision)."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln for ln in f if ln.strip()]
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    records = []
    for ln in lines:
        try:
            rec = json.loads(ln)
            spec = SyntheticMotionSpec(
                kind=rec["kind"],
                params=rec["params"],
                texture_seed=RngSeed(int(rec["texture_seed"])),
            )
            records.append(synth_pair(spec, tuple(rec["size"]), int(rec.get("channels", 3))))
        except (KeyError, ValueError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: bad manifest record {ln!r}: {e}") from e
    return records


def random_specs(count: int, kinds: Sequence[str], size: Tuple[int, int],
                 seed: Union[int, RngSeed]) -> List[SyntheticMotionSpec]:
    """Seeded set of motion specs with magnitudes safe for ``size``."""
    h, w = size
    rng = derive_rng(seed, "specs")
    specs = []
    for i in range(count):
        kind = kinds[int(rng.integers(0, len(kinds)))]
        if kind == "translation":
            params = {
                "dx": float(rng.uniform(-w / 8, w / 8)),
                "dy": float(rng.uniform(-h / 8, h / 8)),
            }
        elif kind == "rotation":
            params = {"angle": float(rng.uniform(-0.35, 0.35))}
        elif kind == "zoom":
            params = {"factor": float(rng.uniform(0.8, 1.25))}
        else:  # affine: mild perturbation of identity plus small shift
            params = {
                "a": 1.0 + float(rng.uniform(-0.08, 0.08)),
                "b": float(rng.uniform(-0.08, 0.08)),
                "c": float(rng.uniform(-0.08, 0.08)),
                "d": 1.0 + float(rng.uniform(-0.08, 0.08)),
                "tx": float(rng.uniform(-w / 16, w / 16)),
                "ty": float(rng.uniform(-h / 16, h / 16)),
            }
        texture_seed = RngSeed(int(derive_rng(seed, "tex", i).integers(0, 2**31 - 1)))
        specs.append(SyntheticMotionSpec(kind=kind, params=params, texture_seed=texture_seed))
    return specs


def save_corpus(specs: Sequence[SyntheticMotionSpec], size: Tuple[int, int],
                channels: int, out_dir) -> str:
    """Write frames, .flo ground truth, occlusion PNGs, and the manifest.

    Returns the manifest path. Re-running with the same arguments rewrites
    identical bytes.
    """
    os.makedirs(out_dir, exist_ok=True)
    for spec in specs:
        rec = synth_pair(spec, size, channels)
        base = os.path.join(out_dir, rec.id)
        write_frame_png(rec.frame0, base + "_frame0.png")
        write_frame_png(rec.frame1, base + "_frame1.png")
        write_flo(rec.gt_flow, base + "_flow.flo")
        write_occ_png(rec.gt_occ, base + "_occ.png")
    manifest = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(specs, size, channels, manifest)
    return manifest


# ---------------------------------------------------------------------------
# Directory-layout readers for local Sintel / KITTI style data
# ---------------------------------------------------------------------------

def sintel_records(root, pass_name: str = "clean",
                   split: str = "training") -> Iterator[SampleRecord]:
    """Iterate a Sintel-style tree.

    Expected layout under ``root``:
      <split>/<pass_name>/<scene>/frame_NNNN.png   consecutive frames
      <split>/flow/<scene>/frame_NNNN.flo          flow for (NNNN, NNNN+1)
      <split>/occlusions/<scene>/frame_NNNN.png    optional masks
    """
    img_root = os.path.join(root, split, pass_name)
    if not os.path.isdir(img_root):
        raise IoError(f"no such directory: {img_root}")
    for scene in sorted(os.listdir(img_root)):
        scene_dir = os.path.join(img_root, scene)
        if not os.path.isdir(scene_dir):
            continue
        frames = sorted(fn for fn in os.listdir(scene_dir) if fn.endswith(".png"))
        for a, b in zip(frames[:-1], frames[1:]):
            stem = os.path.splitext(a)[0]
            flow_path = os.path.join(root, split, "flow", scene, stem + ".flo")
            occ_path = os.path.join(root, split, "occlusions", scene, stem + ".png")
            gt_flow = read_flo(flow_path) if os.path.exists(flow_path) else None
            gt_occ = read_occ_png(occ_path) if os.path.exists(occ_path) else None
            yield SampleRecord(
                frame0=read_frame_png(os.path.join(scene_dir, a), time_tag=0.0),
                frame1=read_frame_png(os.path.join(scene_dir, b), time_tag=1.0),
                gt_flow=gt_flow,
                gt_occ=gt_occ,
                id=f"{scene}/{stem}",
            )


def kitti_records(root, split: str = "training") -> Iterator[SampleRecord]:
    """Iterate a KITTI-2015-style tree.

    Expected layout under ``root``:
      <split>/image_2/NNNNNN_10.png and NNNNNN_11.png   frame pairs
      <split>/flow_occ/NNNNNN_10.png                    sparse 16-bit flow
    """
    img_dir = os.path.join(root, split, "image_2")
    if not os.path.isdir(img_dir):
        raise IoError(f"no such directory: {img_dir}")
    for fn in sorted(os.listdir(img_dir)):
        if not fn.endswith("_10.png"):
            continue
        stem = fn[:-7]
        f0 = os.path.join(img_dir, fn)
        f1 = os.path.join(img_dir, stem + "_11.png")
        if not os.path.exists(f1):
            continue
        flow_path = os.path.join(root, split, "flow_occ", fn)
        gt_flow = read_kitti_png(flow_path) if os.path.exists(flow_path) else None
        yield SampleRecord(
            frame0=read_frame_png(f0, time_tag=0.0),
            frame1=read_frame_png(f1, time_tag=1.0),
            gt_flow=gt_flow,
            gt_occ=None,
            id=stem,
        )
