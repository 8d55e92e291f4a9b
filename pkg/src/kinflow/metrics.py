"""Evaluation metrics: EPE, Fl-all, magnitude-bucketed EPE, pixel fractions.

All reductions run over valid pixels only; a flow field without a valid
mask is treated as fully valid. Bucket boundaries are half-open [lo, hi),
with magnitudes 10 and 40 falling into the upper bucket.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch

from .core import FlowField, maybe_validate
from .errors import EmptyValidSet, FormatError, ShapeMismatch

FL_EPE_THRESHOLD = 3.0
FL_REL_THRESHOLD = 0.05

BUCKET_EDGES = (0.0, 10.0, 40.0)
PX_THRESHOLDS = (1.0, 3.0, 5.0)


@dataclass
class MetricReport:
    epe: float
    fl_all: float
    frac_1px: float
    frac_3px: float
    frac_5px: float
    n_valid: int
    s0_10: Optional[float] = None
    s10_40: Optional[float] = None
    s40plus: Optional[float] = None

    _FIELDS = ("epe", "fl_all", "s0_10", "s10_40", "s40plus",
               "frac_1px", "frac_3px", "frac_5px", "n_valid")

    def to_text(self) -> str:
        lines = []
        for name in self._FIELDS:
            val = getattr(self, name)
            lines.append(f"{name}: {'none' if val is None else val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        values = {}
        for line in text.strip().splitlines():
            if ":" not in line:
                raise FormatError(f"bad metric report line {line!r}")
            key, raw = (part.strip() for part in line.split(":", 1))
            if key not in cls._FIELDS:
                raise FormatError(f"unknown metric report field {key!r}")
            if raw == "none":
                values[key] = None
            elif key == "n_valid":
                values[key] = int(raw)
            else:
                values[key] = float(raw)
        missing = set(cls._FIELDS) - set(values)
        if missing:
            raise FormatError(f"metric report missing fields {sorted(missing)}")
        return cls(**values)


def _check_shapes(pred: FlowField, gt: FlowField) -> None:
    if pred.uv.shape != gt.uv.shape:
        raise ShapeMismatch(
            f"pred {tuple(pred.uv.shape)} vs gt {tuple(gt.uv.shape)}")


def _valid_mask(pred: FlowField, gt: FlowField) -> torch.Tensor:
    mask = torch.ones(gt.uv.shape[:2], dtype=torch.bool)
    if gt.valid is not None:
        mask &= gt.valid
    if pred.valid is not None:
        mask &= pred.valid
    return mask


def epe_map(pred: FlowField, gt: FlowField) -> torch.Tensor:
    """Per-pixel endpoint error [H, W]; invalid pixels are NaN."""
    maybe_validate(pred, gt)
    _check_shapes(pred, gt)
    err = torch.linalg.vector_norm(pred.uv - gt.uv, dim=-1)
    mask = _valid_mask(pred, gt)
    return torch.where(mask, err, torch.full_like(err, math.nan))


def _epe_and_mask(pred: FlowField, gt: FlowField):
    err = epe_map(pred, gt)
    mask = ~torch.isnan(err)
    n = int(mask.sum())
    if n == 0:
        raise EmptyValidSet("no valid pixels")
    return err, mask, n


def epe(pred: FlowField, gt: FlowField) -> float:
    """Mean endpoint error over valid pixels."""
    err, mask, n = _epe_and_mask(pred, gt)
    return float(err[mask].mean())


def fl_all(pred: FlowField, gt: FlowField) -> float:
    """Outlier percentage: EPE > 3 px and EPE > 5% of gt magnitude."""
    err, mask, n = _epe_and_mask(pred, gt)
    mag = torch.linalg.vector_norm(gt.uv, dim=-1)
    # epe > rel * mag avoids the 0/0 at zero-magnitude ground truth and
    # agrees with the ratio test everywhere mag > 0
    outlier = (err > FL_EPE_THRESHOLD) & (err > FL_REL_THRESHOLD * mag) & mask
    return 100.0 * float(outlier.sum()) / n


def bucketed_epe(pred: FlowField, gt: FlowField
                 ) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """Mean EPE over gt-magnitude buckets [0,10), [10,40), [40,inf)."""
    err, mask, _ = _epe_and_mask(pred, gt)
    mag = torch.linalg.vector_norm(gt.uv, dim=-1)
    out = []
    edges = list(BUCKET_EDGES) + [math.inf]
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = mask & (mag >= lo) & (mag < hi)
        out.append(float(err[sel].mean()) if bool(sel.any()) else None)
    return tuple(out)


def px_fractions(pred: FlowField, gt: FlowField) -> Tuple[float, float, float]:
    """Fractions of valid pixels with EPE above 1, 3, and 5 px."""
    err, mask, n = _epe_and_mask(pred, gt)
    return tuple(float(((err > t) & mask).sum()) / n for t in PX_THRESHOLDS)


def compute_report(pred: FlowField, gt: FlowField) -> MetricReport:
    """All metrics of one prediction against its ground truth."""
    s0, s1, s2 = bucketed_epe(pred, gt)
    f1, f3, f5 = px_fractions(pred, gt)
    _, mask, n = _epe_and_mask(pred, gt)
    return MetricReport(
        epe=epe(pred, gt),
        fl_all=fl_all(pred, gt),
        s0_10=s0, s10_40=s1, s40plus=s2,
        frac_1px=f1, frac_3px=f3, frac_5px=f5,
        n_valid=n,
    )


def aggregate_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Mean of per-sample metrics; bucket means skip samples without the bucket."""
    if not reports:
        raise EmptyValidSet("no reports to aggregate")

    def mean(vals: List[Optional[float]]) -> Optional[float]:
        present = [v for v in vals if v is not None]
        return sum(present) / len(present) if present else None

    return MetricReport(
        epe=mean([r.epe for r in reports]),
        fl_all=mean([r.fl_all for r in reports]),
        s0_10=mean([r.s0_10 for r in reports]),
        s10_40=mean([r.s10_40 for r in reports]),
        s40plus=mean([r.s40plus for r in reports]),
        frac_1px=mean([r.frac_1px for r in reports]),
        frac_3px=mean([r.frac_3px for r in reports]),
        frac_5px=mean([r.frac_5px for r in reports]),
        n_valid=sum(r.n_valid for r in reports),
    )
