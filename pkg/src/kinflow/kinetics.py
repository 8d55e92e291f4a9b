"""Constant-velocity self-supervision: teacher synthesis and the KGL step.

Over a fraction alpha of the inter-frame interval, uniform linear motion
scales the displacement field by exactly alpha. The teacher flow is the
model's own full-interval prediction scaled by a sampled alpha and detached
from the graph; the student re-predicts it from the warped feature pair.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch

from .core import FlowField, FlowSequence, Frame, maybe_validate
from .errors import ConfigError, RangeError, ShapeMismatch
from .losses import LossBreakdown, LossConfig, PerceptualExtractor, kgl_total
from .model import ApparentEncoder, MotionDecoder
from .warp import WarpNet, rescale_flow


@dataclass
class KineticsConfig:
    alpha_sampling: str = "uniform"  # or "fixed"
    alpha: float = 0.5               # used when alpha_sampling == "fixed"
    alpha_lo: float = 0.1            # sampling clipped away from 0 to avoid
    alpha_hi: float = 0.9            # a degenerate near-zero teacher
    teacher_detached: bool = True

    def __post_init__(self):
        if self.alpha_sampling not in ("fixed", "uniform"):
            raise ConfigError(f"unknown alpha_sampling {self.alpha_sampling!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"fixed alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.alpha_lo <= self.alpha_hi < 1.0:
            raise ConfigError(
                f"alpha range ({self.alpha_lo}, {self.alpha_hi}) not inside (0, 1)")
        if not self.teacher_detached:
            raise ConfigError("the teacher branch must stay detached")

    def sample_alpha(self, rng: np.random.Generator) -> float:
        if self.alpha_sampling == "fixed":
            return self.alpha
        return float(rng.uniform(self.alpha_lo, self.alpha_hi))


def scaled_teacher(flow: torch.Tensor, alpha: float) -> torch.Tensor:
    """alpha * flow, detached; tensor-level core of the motion generator."""
    if not 0.0 < alpha < 1.0:
        raise RangeError(f"alpha must lie in (0, 1), got {alpha}")
    return (flow * alpha).detach()


def motion_generator(full_flow: FlowField, alpha: float) -> FlowField:
    """Intermediate-time supervision flow: exactly alpha * full_flow.

    The result is detached from the gradient graph; a valid mask, when
    present, is preserved unchanged.
    """
    maybe_validate(full_flow)
    if not 0.0 < alpha < 1.0:
        raise RangeError(f"alpha must lie in (0, 1), got {alpha}")
    return FlowField(uv=(full_flow.uv * alpha).detach(), valid=full_flow.valid)


def kgl_step_batch(encoder: ApparentEncoder, decoder: MotionDecoder,
                   warpnet: WarpNet, frames0: torch.Tensor,
                   frames1: torch.Tensor, alpha: float,
                   loss_cfg: LossConfig, extractor: PerceptualExtractor
                   ) -> Tuple[LossBreakdown, torch.Tensor, List[torch.Tensor]]:
    """One kinetics-guided step on a [B, C, H, W] frame batch.

    Pipeline: predict the full-interval flow, scale it into a detached
    teacher, warp the first frame's features through the teacher (single-flow
    WarpNet mode, flow rescaled to feature resolution), re-predict from the
    warped pair, and score the student against the teacher. The perceptual
    term anchors WarpNet's image-domain warp of frame0 under the predicted
    bidirectional flows to the real second frame.
    """
    if frames0.shape != frames1.shape:
        raise ShapeMismatch(f"{tuple(frames0.shape)} vs {tuple(frames1.shape)}")
    out_size = frames0.shape[2:]
    feat0 = encoder(frames0)
    feat1 = encoder(frames1)
    full_seq = decoder(feat0, feat1, out_size)
    full_flow = full_seq[-1]

    teacher = scaled_teacher(full_flow, alpha)
    teacher_feat = rescale_flow(teacher, feat0.shape[2:], decoder.cfg.scale)
    warped_feat, _ = warpnet(feat0, teacher_feat, None, domain="feature")
    student = decoder(feat0, warped_feat, out_size)

    back_flow = decoder(feat1, feat0, out_size)[-1]
    warped_img, _ = warpnet(frames0, full_flow, back_flow, domain="image")

    breakdown = kgl_total(teacher, student, frames1, warped_img, extractor, loss_cfg)
    breakdown.components["alpha"] = alpha
    return breakdown, teacher, student


def kgl_step(encoder: ApparentEncoder, decoder: MotionDecoder, warpnet: WarpNet,
             frame0: Frame, frame1: Frame, cfg: KineticsConfig,
             loss_cfg: LossConfig, extractor: PerceptualExtractor,
             alpha: Optional[float] = None,
             rng: Optional[np.random.Generator] = None
             ) -> Tuple[LossBreakdown, FlowField, FlowSequence]:
    """Domain-typed KGL step on one unlabeled pair.

    alpha defaults to a value sampled from cfg (rng required then); the
    returned teacher carries no gradient.
    """
    maybe_validate(frame0, frame1)
    if frame0.pixels.shape != frame1.pixels.shape:
        raise ShapeMismatch("frames differ in shape")
    if alpha is None:
        if rng is None:
            raise ConfigError("either alpha or rng must be supplied")
        alpha = cfg.sample_alpha(rng)
    f0 = frame0.pixels.permute(2, 0, 1).unsqueeze(0)
    f1 = frame1.pixels.permute(2, 0, 1).unsqueeze(0)
    breakdown, teacher_t, student_list = kgl_step_batch(
        encoder, decoder, warpnet, f0, f1, alpha, loss_cfg, extractor)
    teacher = FlowField(uv=teacher_t[0].permute(1, 2, 0))
    student = FlowSequence([FlowField(uv=s[0].permute(1, 2, 0)) for s in student_list])
    return breakdown, teacher, student
