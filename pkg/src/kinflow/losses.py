"""Training objectives for both phases.

Sequence losses weight the i-th of N intermediate predictions by
gamma^(N-i), so the final prediction always carries weight 1. All pixel
reductions are means, which keeps loss magnitudes resolution-independent.
Functions accept either domain types or batched [B, C, H, W] tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    FlowField,
    FlowSequence,
    Frame,
    OcclusionMap,
    RngSeed,
    torch_seed_for,
)
from .errors import ConfigError, EmptyValidSet, ShapeMismatch


@dataclass
class LossConfig:
    gamma: float = 0.8
    lambda_perc: float = 1.0
    lambda_occ: float = 1.0
    lambda_kin: float = 1.0
    perc_scales: Tuple[int, ...] = (1, 2, 4)
    perc_layers: Tuple[int, ...] = (0, 2, 4)

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        for lam in (self.lambda_perc, self.lambda_occ, self.lambda_kin):
            if lam < 0:
                raise ConfigError("loss weights must be nonnegative")
        self.perc_scales = tuple(int(s) for s in self.perc_scales)
        self.perc_layers = tuple(int(i) for i in self.perc_layers)


@dataclass
class LossBreakdown:
    """Total loss tensor (keeps the autograd graph) plus scalar components."""

    total: torch.Tensor
    components: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Input adapters
# ---------------------------------------------------------------------------

def _flow_seq_tensors(preds) -> List[torch.Tensor]:
    if isinstance(preds, FlowSequence):
        return [f.uv.permute(2, 0, 1).unsqueeze(0) for f in preds]
    return list(preds)


def _flow_tensor(flow) -> torch.Tensor:
    if isinstance(flow, FlowField):
        return flow.uv.permute(2, 0, 1).unsqueeze(0)
    return flow


def _flow_valid(flow, valid):
    if isinstance(flow, FlowField) and flow.valid is not None:
        return flow.valid.unsqueeze(0)
    return valid


def _frame_tensor(frame) -> torch.Tensor:
    if isinstance(frame, Frame):
        return frame.pixels.permute(2, 0, 1).unsqueeze(0)
    return frame


def _occ_tensor(occ) -> torch.Tensor:
    if isinstance(occ, OcclusionMap):
        return occ.occ.unsqueeze(0)
    return occ


def _masked_l1(diff: torch.Tensor, valid: Optional[torch.Tensor]) -> torch.Tensor:
    """Mean per-valid-pixel L1 norm of a [B, 2, H, W] difference."""
    per_px = diff.abs().sum(dim=1)
    if valid is None:
        return per_px.mean()
    mask = valid.to(per_px.dtype)
    n = mask.sum()
    if float(n) == 0:
        raise EmptyValidSet("no valid pixels in loss reduction")
    return (per_px * mask).sum() / n


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def seq_l1(preds, gt, gamma: float, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Gamma-weighted sum of per-prediction mean L1 errors against gt."""
    pred_list = _flow_seq_tensors(preds)
    gt_t = _flow_tensor(gt)
    valid = _flow_valid(gt, valid)
    n = len(pred_list)
    total = None
    for i, p in enumerate(pred_list):
        if p.shape != gt_t.shape:
            raise ShapeMismatch(f"prediction {i}: {tuple(p.shape)} vs gt {tuple(gt_t.shape)}")
        term = (gamma ** (n - 1 - i)) * _masked_l1(p - gt_t, valid)
        total = term if total is None else total + term
    return total


def kinetics_loss(teacher, student, gamma: float) -> torch.Tensor:
    """Gamma-weighted L1 between the stop-gradient teacher flow and each
    student prediction."""
    teacher_t = _flow_tensor(teacher).detach()
    return seq_l1(student, teacher_t, gamma, valid=_flow_valid(teacher, None))


def occ_l1(pred, gt) -> torch.Tensor:
    """Mean absolute difference between occlusion maps."""
    p = _occ_tensor(pred)
    g = _occ_tensor(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"occ {tuple(p.shape)} vs gt {tuple(g.shape)}")
    return (p - g).abs().mean()


class PerceptualExtractor(nn.Module):
    """Frozen 5-layer conv pyramid used as the perceptual feature stack.

    Weights are random but fixed by seed; randomly initialized deep features
    are a standing proxy for pretrained perceptual ones at this scale, and
    load_external_weights accepts real pretrained tensors when available.
    """

    def __init__(self, in_channels: int = 3,
                 widths: Sequence[int] = (16, 32, 32, 64, 64),
                 strides: Sequence[int] = (1, 2, 1, 2, 1),
                 seed: Union[int, RngSeed] = 0):
        super().__init__()
        self.in_channels = in_channels
        with torch.random.fork_rng():
            torch.manual_seed(torch_seed_for(seed, "perceptual"))
            convs = []
            cin = in_channels
            for wdt, st in zip(widths, strides):
                convs.append(nn.Conv2d(cin, wdt, 3, stride=st, padding=1))
                cin = wdt
            self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        if x.shape[1] == 1 and self.in_channels == 3:
            x = x.expand(-1, 3, -1, -1)
        out = []
        for conv in self.convs:
            x = F.relu(conv(x))
            out.append(x)
        return out

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self.features(x)

    def load_external_weights(self, state_dict, strict: bool = False) -> None:
        if isinstance(state_dict, (str, bytes)):
            state_dict = torch.load(state_dict, map_location="cpu", weights_only=True)
        self.load_state_dict(state_dict, strict=strict)
        for p in self.parameters():
            p.requires_grad_(False)


def perceptual(extractor: PerceptualExtractor, image, warped,
               cfg: LossConfig) -> torch.Tensor:
    """Multi-scale mean-L1 distance between frozen pyramid features."""
    x = _frame_tensor(image)
    y = _frame_tensor(warped)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(y.shape)}")
    total = x.new_zeros(())
    for j in cfg.perc_scales:
        xs = F.avg_pool2d(x, j) if j > 1 else x
        ys = F.avg_pool2d(y, j) if j > 1 else y
        fx = extractor.features(xs)
        fy = extractor.features(ys)
        for i in cfg.perc_layers:
            total = total + (fx[i] - fy[i]).abs().mean()
    return total


def ail_total(preds, gt_flow, pred_occ, gt_occ, frame_target, frame_warped,
              extractor: PerceptualExtractor, cfg: LossConfig,
              valid: Optional[torch.Tensor] = None) -> LossBreakdown:
    """Supervised-phase composite: L1 + perceptual + occlusion.

    The occlusion term is skipped (weight 0) when no ground-truth occlusion
    is available for the sample.
    """
    l1 = seq_l1(preds, gt_flow, cfg.gamma, valid=valid)
    perc = perceptual(extractor, frame_target, frame_warped, cfg)
    comps = {"l1": float(l1.detach()), "perceptual": float(perc.detach())}
    total = l1 + cfg.lambda_perc * perc
    if gt_occ is not None and cfg.lambda_occ > 0:
        occ = occ_l1(pred_occ, gt_occ)
        comps["occ"] = float(occ.detach())
        total = total + cfg.lambda_occ * occ
    else:
        comps["occ"] = 0.0
    comps["total"] = float(total.detach())
    return LossBreakdown(total=total, components=comps)


def kgl_total(teacher, student, frame_target, frame_warped,
              extractor: PerceptualExtractor, cfg: LossConfig) -> LossBreakdown:
    """Self-supervised-phase composite: kinetics + perceptual."""
    kin = kinetics_loss(teacher, student, cfg.gamma)
    perc = perceptual(extractor, frame_target, frame_warped, cfg)
    total = cfg.lambda_kin * kin + cfg.lambda_perc * perc
    return LossBreakdown(
        total=total,
        components={
            "kinetics": float(kin.detach()),
            "perceptual": float(perc.detach()),
            "total": float(total.detach()),
        },
    )
