"""Differentiable warping, occlusion estimation, and the learnable WarpNet.

The bilinear kernel is written out with explicit gathers (not grid_sample)
so that a zero flow reproduces the payload bit-exactly: sample positions are
the raw pixel coordinates plus flow, with no normalized-coordinate round
trip in between.
"""

from __future__ import annotations

from typing import Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    FeatureMap,
    FlowField,
    Frame,
    OcclusionMap,
    maybe_validate,
)
from .errors import ModeError, ShapeMismatch

# Forward-backward consistency thresholds: a pixel is occluded when
# |f + b(p + f)|^2 > CONSISTENCY_REL * (|f|^2 + |b(p + f)|^2) + CONSISTENCY_ABS.
CONSISTENCY_REL = 0.01
CONSISTENCY_ABS = 0.5


def bilinear_warp(payload: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """out(p) = bilinear(payload, p + flow(p)), border-clamped.

    payload: [B, C, H, W]; flow: [B, 2, H, W] with channel 0 = horizontal.
    Differentiable w.r.t. both arguments. Zero flow is the exact identity.
    """
    if payload.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeMismatch(
            f"expected payload [B,C,H,W] and flow [B,2,H,W], got "
            f"{tuple(payload.shape)} and {tuple(flow.shape)}")
    if payload.shape[0] != flow.shape[0] or payload.shape[2:] != flow.shape[2:]:
        raise ShapeMismatch(
            f"payload {tuple(payload.shape)} and flow {tuple(flow.shape)} disagree")
    b, c, h, w = payload.shape
    dtype = payload.dtype
    xs = torch.arange(w, dtype=dtype).view(1, 1, w)
    ys = torch.arange(h, dtype=dtype).view(1, h, 1)
    x = (xs + flow[:, 0]).clamp(0, w - 1)
    y = (ys + flow[:, 1]).clamp(0, h - 1)
    x0 = x.floor()
    y0 = y.floor()
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0l = x0.long()
    y0l = y0.long()
    x1l = (x0l + 1).clamp(max=w - 1)
    y1l = (y0l + 1).clamp(max=h - 1)

    flat = payload.reshape(b, c, h * w)

    def take(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    v00 = take(y0l, x0l)
    v01 = take(y0l, x1l)
    v10 = take(y1l, x0l)
    v11 = take(y1l, x1l)
    return (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)


def _flow_to_tensor(flow: FlowField, dtype=None) -> torch.Tensor:
    t = flow.uv.permute(2, 0, 1).unsqueeze(0)
    return t.to(dtype) if dtype is not None else t


def rescale_flow(flow: torch.Tensor, size: Tuple[int, int], scale: int) -> torch.Tensor:
    """Resize a [B, 2, H, W] flow to another grid, dividing values by scale."""
    return F.interpolate(flow / float(scale), size=size,
                         mode="bilinear", align_corners=False)


def scale_flow_to(flow: FlowField, size: Tuple[int, int], scale: int) -> FlowField:
    """Resize a full-resolution flow to a feature grid, dividing values by scale."""
    t = rescale_flow(_flow_to_tensor(flow), size, scale)
    return FlowField(uv=t[0].permute(1, 2, 0))


def backward_warp(payload: Union[Frame, FeatureMap],
                  flow: FlowField) -> Union[Frame, FeatureMap]:
    """Backward-warp a frame or feature map through a same-resolution flow.

    Feature-map callers are expected to pre-scale the flow to feature
    resolution (see scale_flow_to).
    """
    maybe_validate(payload, flow)
    data = payload.pixels if isinstance(payload, Frame) else payload.data
    if tuple(data.shape[:2]) != (flow.height, flow.width):
        raise ShapeMismatch(
            f"payload {tuple(data.shape[:2])} vs flow {(flow.height, flow.width)}")
    t = data.permute(2, 0, 1).unsqueeze(0)
    out = bilinear_warp(t, _flow_to_tensor(flow, t.dtype))[0].permute(1, 2, 0)
    if isinstance(payload, Frame):
        # clamp guards 1-ulp excursions at the range boundary; interior
        # bilinear values are convex combinations and already in range
        return Frame(pixels=out.clamp(0.0, 1.0), time_tag=payload.time_tag)
    return FeatureMap(data=out, stage=payload.stage, scale=payload.scale)


def consistency_occlusion(fwd: torch.Tensor, bwd: torch.Tensor,
                          rel: float = CONSISTENCY_REL,
                          abs_: float = CONSISTENCY_ABS) -> torch.Tensor:
    """Forward-backward consistency occlusion on [B, 2, H, W] tensors."""
    if fwd.shape != bwd.shape:
        raise ShapeMismatch(f"fwd {tuple(fwd.shape)} vs bwd {tuple(bwd.shape)}")
    b, _, h, w = fwd.shape
    bwd_at_target = bilinear_warp(bwd, fwd)
    diff = (fwd + bwd_at_target).pow(2).sum(dim=1)
    mag = fwd.pow(2).sum(dim=1) + bwd_at_target.pow(2).sum(dim=1)
    inconsistent = diff > rel * mag + abs_
    xs = torch.arange(w, dtype=fwd.dtype).view(1, 1, w)
    ys = torch.arange(h, dtype=fwd.dtype).view(1, h, 1)
    tx = xs + fwd[:, 0]
    ty = ys + fwd[:, 1]
    out_of_frame = (tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1)
    return (inconsistent | out_of_frame).to(fwd.dtype)


def occlusion_oracle(fwd: FlowField, bwd: FlowField) -> OcclusionMap:
    """Binary occlusion map from forward-backward motion consistency.

    A pixel is occluded iff its forward target leaves the frame or the
    backward flow sampled at the target fails to cancel the forward flow.
    """
    maybe_validate(fwd, bwd)
    if (fwd.height, fwd.width) != (bwd.height, bwd.width):
        raise ShapeMismatch(
            f"fwd {(fwd.height, fwd.width)} vs bwd {(bwd.height, bwd.width)}")
    occ = consistency_occlusion(_flow_to_tensor(fwd), _flow_to_tensor(bwd))
    return OcclusionMap(occ=occ[0])


def _conv_gn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    groups = min(8, cout)
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(groups, cout),
        nn.ReLU(inplace=True),
    )


class WarpNet(nn.Module):
    """Occlusion-aware learnable warp (encoder-decoder over the warped payload).

    The classical backward-warp result plus both flow fields (the second
    duplicated from the first in single-flow mode) pass through input
    adapters into a small U-Net; an occlusion head squashes to [0, 1] and a
    refinement head emits a residual applied only in occluded regions:

        warped = base + occ * residual

    so blending weights sum to 1 per pixel and a zero-initialized residual
    head makes the module start as the classical warp.
    """

    def __init__(self, image_channels: int = 3, feature_channels: int = 128,
                 base_width: int = 32, depth: int = 3,
                 allow_single_flow: bool = True):
        super().__init__()
        self.image_channels = image_channels
        self.feature_channels = feature_channels
        self.base_width = base_width
        self.depth = depth
        self.allow_single_flow = allow_single_flow
        w = base_width
        self.image_in = nn.Conv2d(image_channels + 4, w, 3, padding=1)
        self.feature_in = nn.Conv2d(feature_channels + 4, w, 3, padding=1)
        self.down = nn.ModuleList([_conv_gn_relu(w, w, stride=2) for _ in range(depth)])
        self.up = nn.ModuleList([_conv_gn_relu(2 * w, w) for _ in range(depth)])
        self.occ_head = nn.Conv2d(w, 1, 3, padding=1)
        self.image_out = nn.Conv2d(w, image_channels, 3, padding=1)
        self.feature_out = nn.Conv2d(w, feature_channels, 3, padding=1)
        # occlusion starts at the uninformative prior 0.5; refinement starts
        # as an exact copy of the classical warp
        for head in (self.occ_head, self.image_out, self.feature_out):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def config(self) -> dict:
        return {
            "image_channels": self.image_channels,
            "feature_channels": self.feature_channels,
            "base_width": self.base_width,
            "depth": self.depth,
            "allow_single_flow": self.allow_single_flow,
        }

    def forward(self, payload: torch.Tensor, fwd: torch.Tensor,
                bwd: Optional[torch.Tensor] = None,
                domain: str = "image") -> Tuple[torch.Tensor, torch.Tensor]:
        """payload [B,C,H,W], flows [B,2,H,W] -> (warped [B,C,H,W], occ [B,H,W])."""
        if bwd is None:
            if not self.allow_single_flow:
                raise ModeError("this WarpNet requires a backward flow")
            bwd = fwd
        if payload.shape[2:] != fwd.shape[2:] or fwd.shape != bwd.shape:
            raise ShapeMismatch(
                f"payload {tuple(payload.shape)}, fwd {tuple(fwd.shape)}, "
                f"bwd {tuple(bwd.shape)} disagree")
        expected = self.image_channels if domain == "image" else self.feature_channels
        if payload.shape[1] != expected:
            raise ShapeMismatch(
                f"{domain} payload has {payload.shape[1]} channels, expected {expected}")
        base = bilinear_warp(payload, fwd)
        adapter = self.image_in if domain == "image" else self.feature_in
        head = self.image_out if domain == "image" else self.feature_out
        x = adapter(torch.cat([base, fwd, bwd], dim=1))
        skips = [x]
        for blk in self.down:
            x = blk(x)
            skips.append(x)
        for blk in reversed(self.up):
            skip = skips[-2]
            x = F.interpolate(x, size=skip.shape[2:], mode="bilinear", align_corners=False)
            x = blk(torch.cat([x, skip], dim=1))
            skips.pop()
        occ = torch.sigmoid(self.occ_head(x))
        residual = head(x)
        warped = base + occ * residual
        return warped, occ[:, 0]


def warpnet_forward(params: WarpNet, payload: Union[Frame, FeatureMap],
                    fwd: FlowField, bwd: Optional[FlowField] = None
                    ) -> Tuple[Union[Frame, FeatureMap], OcclusionMap]:
    """Occlusion-aware warp of a domain-typed payload.

    ``fwd`` drives the sampling (out(p) reads the payload at p + fwd(p));
    ``bwd`` supplies the opposite-direction flow for occlusion evidence and
    may be omitted in single-flow mode, where it is duplicated from fwd.
    """
    maybe_validate(payload, fwd)
    if bwd is not None:
        maybe_validate(bwd)
    data = payload.pixels if isinstance(payload, Frame) else payload.data
    t = data.permute(2, 0, 1).unsqueeze(0)
    dtype = t.dtype
    fwd_t = _flow_to_tensor(fwd, dtype)
    bwd_t = _flow_to_tensor(bwd, dtype) if bwd is not None else None
    domain = "image" if isinstance(payload, Frame) else "feature"
    warped, occ = params(t, fwd_t, bwd_t, domain=domain)
    occ_map = OcclusionMap(occ=occ[0])
    out = warped[0].permute(1, 2, 0)
    if isinstance(payload, Frame):
        return Frame(pixels=out.clamp(0.0, 1.0), time_tag=payload.time_tag), occ_map
    return FeatureMap(data=out, stage=payload.stage, scale=payload.scale), occ_map
