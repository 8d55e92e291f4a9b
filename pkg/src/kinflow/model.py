"""Feature encoder and the correlation-volume-free motion decoder.

The decoder never builds an all-pairs cost volume: the two feature streams
are enhanced with channel-positional embeddings and stacked self/cross
attention, a sparse Top-K channel-similarity block supplies auxiliary
correlation evidence, and stacked residual blocks regress one flow field per
block, yielding a sequence whose last item is the final prediction.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    FeatureMap,
    FeatureStage,
    FlowField,
    FlowSequence,
    Frame,
    RngSeed,
    maybe_validate,
    torch_seed_for,
)
from .errors import ConfigError, ShapeMismatch, StageError
from .warp import WarpNet

# scores this close to the boundary of the cosine range are snapped to it, so
# mathematically proportional channels tie exactly and break by channel index
_COSINE_SNAP = 1e-12


@dataclass
class ModelConfig:
    """Architecture knobs; defaults are the desk-scale configuration."""

    in_channels: int = 3
    scale: int = 8
    feature_dim: int = 128
    self_blocks: int = 2
    cross_blocks: int = 2
    heads: int = 4
    refine_blocks: int = 4
    topk: int = 64
    hidden_dim: int = 128
    mlp_ratio: float = 4.0
    pos_learned: bool = True
    upsample: str = "bilinear"  # or "convex"
    kaux_source: str = "second"  # or "first"
    warp_width: int = 32
    warp_depth: int = 3

    def __post_init__(self):
        if self.scale < 1 or (self.scale & (self.scale - 1)) != 0:
            raise ConfigError(f"scale must be a power of two, got {self.scale}")
        if self.topk > self.feature_dim:
            raise ConfigError(f"topk {self.topk} exceeds feature_dim {self.feature_dim}")
        if self.upsample not in ("bilinear", "convex"):
            raise ConfigError(f"unknown upsample mode {self.upsample!r}")
        if self.kaux_source not in ("first", "second"):
            raise ConfigError(f"kaux_source must be 'first' or 'second', got {self.kaux_source!r}")
        if self.feature_dim % self.heads != 0:
            raise ConfigError("feature_dim must be divisible by heads")


class ApparentEncoder(nn.Module):
    """Convolutional feature extractor: frame -> [B, D, ceil(H/s), ceil(W/s)]."""

    def __init__(self, in_channels: int = 3, feature_dim: int = 128, scale: int = 8):
        super().__init__()
        self.in_channels = in_channels
        self.feature_dim = feature_dim
        self.scale = scale
        n_stages = int(round(math.log2(scale))) if scale > 1 else 0
        widths = [min(16 * 2 ** i, 64) for i in range(max(n_stages, 1))]
        layers = []
        cin = in_channels
        if n_stages == 0:
            layers.append(self._stage(cin, widths[0], stride=1))
            cin = widths[0]
        for wdt in widths[:n_stages]:
            layers.append(self._stage(cin, wdt, stride=2))
            cin = wdt
        self.stem = nn.Sequential(*layers)
        self.trunk = nn.Sequential(
            self._res_block(cin),
            self._res_block(cin),
        )
        self.proj = nn.Conv2d(cin, feature_dim, 1)

    @staticmethod
    def _stage(cin, cout, stride):
        return nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
            nn.GroupNorm(min(8, cout), cout),
            nn.ReLU(inplace=True),
        )

    @staticmethod
    def _res_block(ch):
        return _ResidualConv(ch)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        x = self.stem(frames)
        x = self.trunk(x)
        return self.proj(x)

    def load_external_weights(self, state_dict, strict: bool = False) -> None:
        """Hook for initializing from externally pre-trained matching weights.

        Accepts a state dict (or a path to a torch-saved one) whose keys
        mirror this module's; missing/extra keys are tolerated unless strict.
        """
        if isinstance(state_dict, (str, bytes)):
            state_dict = torch.load(state_dict, map_location="cpu", weights_only=True)
        self.load_state_dict(state_dict, strict=strict)

    def config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "feature_dim": self.feature_dim,
            "scale": self.scale,
        }


class _ResidualConv(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        g = min(8, ch)
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.GroupNorm(g, ch),
            nn.GELU(),
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.GroupNorm(g, ch),
        )
        self.act = nn.GELU()

    def forward(self, x):
        return self.act(x + self.body(x))


class MultiheadAttention(nn.Module):
    """Plain softmax attention over token sequences [B, N, D]."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q, k, v, return_attn: bool = False):
        b, n, d = q.shape
        m = k.shape[1]

        def split(t, length):
            return t.view(b, length, self.heads, self.head_dim).transpose(1, 2)

        qh = split(self.q_proj(q), n)
        kh = split(self.k_proj(k), m)
        vh = split(self.v_proj(v), m)
        attn = torch.softmax(qh @ kh.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, n, d)
        out = self.out_proj(out)
        if return_attn:
            return out, attn
        return out


class AttentionBlock(nn.Module):
    """Pre-norm residual attention + MLP; cross blocks take external kv."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, kv: Optional[torch.Tensor] = None):
        q = self.norm_q(x)
        if kv is None:
            x = x + self.attn(q, q, q)
        else:
            kvn = self.norm_kv(kv)
            x = x + self.attn(q, kvn, kvn)
        return x + self.mlp(self.norm_mlp(x))


class FeatureTransformer(nn.Module):
    """Self-attention per stream, then cross-attention against the other
    stream's position-embedded features (queries from the self-attended
    stream, keys/values from the other stream). Weights are shared between
    streams, so swapping the inputs swaps the outputs.
    """

    def __init__(self, dim: int, self_blocks: int, cross_blocks: int,
                 heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.self_blocks = nn.ModuleList(
            [AttentionBlock(dim, heads, mlp_ratio) for _ in range(self_blocks)])
        self.cross_blocks = nn.ModuleList(
            [AttentionBlock(dim, heads, mlp_ratio) for _ in range(cross_blocks)])

    def run_self(self, x):
        for blk in self.self_blocks:
            x = blk(x)
        return x

    def run_cross(self, x, kv):
        for blk in self.cross_blocks:
            x = blk(x, kv=kv)
        return x

    def forward(self, t0, t1):
        s0 = self.run_self(t0)
        s1 = self.run_self(t1)
        return self.run_cross(s0, kv=t1), self.run_cross(s1, kv=t0)


def channel_cosine_scores(f0: torch.Tensor, f1: torch.Tensor) -> torch.Tensor:
    """Per-channel cosine similarity between two [B, D, H, W] maps.

    Computed in float64 with range snapping so proportional channels score
    exactly 1 (ranking ties then break by channel index).
    """
    b, d = f0.shape[:2]
    a = f0.detach().double().reshape(b, d, -1)
    c = f1.detach().double().reshape(b, d, -1)
    num = (a * c).sum(-1)
    den = (a.norm(dim=-1) * c.norm(dim=-1)).clamp_min(1e-12)
    scores = (num / den).clamp(-1.0, 1.0)
    scores = torch.where(scores > 1.0 - _COSINE_SNAP, torch.ones_like(scores), scores)
    scores = torch.where(scores < -1.0 + _COSINE_SNAP, -torch.ones_like(scores), scores)
    return scores


def topk_channel_aux(f0: torch.Tensor, f1: torch.Tensor, k: int,
                     source: str = "second"
                     ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Sparse channel correlation: the k channels whose spatial maps agree
    most between the streams, in descending-score order.

    Returns (aux [B, k, H, W], indices [B, k], scores [B, D]). Channels are
    taken bit-identically from ``f1`` (or ``f0`` with source="first");
    gradients flow through the selected channels only.
    """
    if f0.shape != f1.shape:
        raise ShapeMismatch(f"{tuple(f0.shape)} vs {tuple(f1.shape)}")
    d = f0.shape[1]
    if k > d:
        raise ConfigError(f"topk {k} exceeds channel count {d}")
    with torch.no_grad():
        scores = channel_cosine_scores(f0, f1)
        order = torch.argsort(scores, dim=1, descending=True, stable=True)
        idx = order[:, :k]
    pool = f1 if source == "second" else f0
    gather_idx = idx[:, :, None, None].expand(-1, -1, pool.shape[2], pool.shape[3])
    aux = pool.gather(1, gather_idx)
    return aux, idx, scores


def convex_upsample(flow: torch.Tensor, mask: torch.Tensor, scale: int) -> torch.Tensor:
    """Upsample flow with a learned convex combination over 3x3 neighborhoods."""
    b, _, h, w = flow.shape
    mask = mask.view(b, 1, 9, scale, scale, h, w).softmax(dim=2)
    up = F.unfold(flow * scale, kernel_size=3, padding=1).view(b, 2, 9, 1, 1, h, w)
    out = (mask * up).sum(dim=2)
    out = out.permute(0, 1, 4, 2, 5, 3).reshape(b, 2, scale * h, scale * w)
    return out


class MotionDecoder(nn.Module):
    """Channel-pos embedding + feature transformer + Top-K aux + residual
    flow regression. forward() returns one full-resolution flow per residual
    block; the last entry is the final prediction.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.feature_dim
        if cfg.pos_learned:
            self.channel_pos = nn.Parameter(torch.randn(d) * 0.02)
        else:
            steps = torch.arange(d, dtype=torch.float32)
            self.register_buffer("channel_pos", 0.02 * torch.sin(2 * math.pi * steps / d))
        self.transformer = FeatureTransformer(
            d, cfg.self_blocks, cfg.cross_blocks, cfg.heads, cfg.mlp_ratio)
        self.input_proj = nn.Conv2d(2 * d + cfg.topk, cfg.hidden_dim, 1)
        self.blocks = nn.ModuleList(
            [_ResidualConv(cfg.hidden_dim) for _ in range(cfg.refine_blocks)])
        self.flow_heads = nn.ModuleList(
            [self._flow_head(cfg.hidden_dim) for _ in range(cfg.refine_blocks)])
        if cfg.upsample == "convex":
            self.mask_head = nn.Sequential(
                nn.Conv2d(cfg.hidden_dim, 64, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(64, 9 * cfg.scale * cfg.scale, 1),
            )

    @staticmethod
    def _flow_head(hidden: int) -> nn.Sequential:
        head = nn.Sequential(
            nn.Conv2d(hidden, 96, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(96, 2, 3, padding=1),
        )
        # the first prediction of an untrained model is exactly zero flow
        nn.init.zeros_(head[-1].weight)
        nn.init.zeros_(head[-1].bias)
        return head

    # --- pipeline stages -------------------------------------------------

    def add_pos(self, feat: torch.Tensor) -> torch.Tensor:
        """feat [B, D, H, W] + per-channel scalar embedding."""
        return feat + self.channel_pos.view(1, -1, 1, 1).to(feat.dtype)

    @staticmethod
    def to_tokens(feat: torch.Tensor) -> torch.Tensor:
        b, d, h, w = feat.shape
        return feat.reshape(b, d, h * w).transpose(1, 2)

    @staticmethod
    def to_map(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, n, d = tokens.shape
        return tokens.transpose(1, 2).reshape(b, d, h, w)

    def attend_maps(self, f0p: torch.Tensor, f1p: torch.Tensor):
        h, w = f0p.shape[2:]
        y0, y1 = self.transformer(self.to_tokens(f0p), self.to_tokens(f1p))
        return self.to_map(y0, h, w), self.to_map(y1, h, w)

    def regress(self, f0a: torch.Tensor, f1a: torch.Tensor, aux: torch.Tensor,
                out_size: Tuple[int, int]) -> List[torch.Tensor]:
        x = self.input_proj(torch.cat([f0a, f1a, aux], dim=1))
        flows = []
        for blk, head in zip(self.blocks, self.flow_heads):
            x = blk(x)
            flow = head(x)
            if self.cfg.upsample == "convex":
                full = convex_upsample(flow, self.mask_head(x), self.cfg.scale)
                full = full[:, :, :out_size[0], :out_size[1]]
            else:
                full = F.interpolate(flow * self.cfg.scale, size=out_size,
                                     mode="bilinear", align_corners=False)
            flows.append(full)
        return flows

    def forward(self, feat0: torch.Tensor, feat1: torch.Tensor,
                out_size: Tuple[int, int]) -> List[torch.Tensor]:
        if feat0.shape != feat1.shape:
            raise ShapeMismatch(f"{tuple(feat0.shape)} vs {tuple(feat1.shape)}")
        f0p = self.add_pos(feat0)
        f1p = self.add_pos(feat1)
        f0a, f1a = self.attend_maps(f0p, f1p)
        aux, _, _ = topk_channel_aux(f0a, f1a, self.cfg.topk, self.cfg.kaux_source)
        return self.regress(f0a, f1a, aux, out_size)


# ---------------------------------------------------------------------------
# Domain-typed operation surface (single sample, B = 1 internally)
# ---------------------------------------------------------------------------

def _frame_tensor(frame: Frame) -> torch.Tensor:
    return frame.pixels.permute(2, 0, 1).unsqueeze(0)


def _fmap_tensor(fmap: FeatureMap) -> torch.Tensor:
    return fmap.data.permute(2, 0, 1).unsqueeze(0)


def _fmap_from(t: torch.Tensor, stage: FeatureStage, scale: int) -> FeatureMap:
    return FeatureMap(data=t[0].permute(1, 2, 0), stage=stage, scale=scale)


def encode(params: ApparentEncoder, frame: Frame) -> FeatureMap:
    """AIE forward on one frame -> raw FeatureMap at the encoder's scale."""
    maybe_validate(frame)
    if frame.channels != params.in_channels:
        raise ShapeMismatch(
            f"frame has {frame.channels} channels, encoder expects {params.in_channels}")
    feat = params(_frame_tensor(frame))
    return _fmap_from(feat, FeatureStage.RAW, params.scale)


def add_channel_pos(params: MotionDecoder, fmap: FeatureMap) -> FeatureMap:
    """F^P[:, :, d] = F[:, :, d] + P[d]."""
    maybe_validate(fmap)
    if fmap.stage != FeatureStage.RAW:
        raise StageError(f"add_channel_pos expects stage 'raw', got {fmap.stage.value!r}")
    out = params.add_pos(_fmap_tensor(fmap))
    return _fmap_from(out, FeatureStage.POS_EMBEDDED, fmap.scale)


def attend(params: MotionDecoder, f0p: FeatureMap, f1p: FeatureMap
           ) -> Tuple[FeatureMap, FeatureMap]:
    """Self- then cross-attend the two streams; role-symmetric."""
    maybe_validate(f0p, f1p)
    for f in (f0p, f1p):
        if f.stage != FeatureStage.POS_EMBEDDED:
            raise StageError(f"attend expects stage 'pos_embedded', got {f.stage.value!r}")
    if f0p.data.shape != f1p.data.shape:
        raise ShapeMismatch(f"{tuple(f0p.data.shape)} vs {tuple(f1p.data.shape)}")
    y0, y1 = params.attend_maps(_fmap_tensor(f0p), _fmap_tensor(f1p))
    return (_fmap_from(y0, FeatureStage.CROSS_ATTENDED, f0p.scale),
            _fmap_from(y1, FeatureStage.CROSS_ATTENDED, f1p.scale))


def topk_aux(f0a: FeatureMap, f1a: FeatureMap, k: int,
             source: str = "second") -> FeatureMap:
    """Top-K channel-similarity auxiliary correlation as a FeatureMap."""
    maybe_validate(f0a, f1a)
    aux, _, _ = topk_channel_aux(_fmap_tensor(f0a), _fmap_tensor(f1a), k, source)
    return _fmap_from(aux, FeatureStage.CROSS_ATTENDED, f1a.scale)


def decode_flow(params: MotionDecoder, f0a: FeatureMap, f1a: FeatureMap,
                k_aux: FeatureMap,
                out_size: Optional[Tuple[int, int]] = None) -> FlowSequence:
    """Regress the flow sequence from concatenated attended features + aux."""
    maybe_validate(f0a, f1a, k_aux)
    if f0a.data.shape != f1a.data.shape:
        raise ShapeMismatch(f"{tuple(f0a.data.shape)} vs {tuple(f1a.data.shape)}")
    if k_aux.data.shape[:2] != f0a.data.shape[:2]:
        raise ShapeMismatch("k_aux spatial size differs from attended features")
    if out_size is None:
        out_size = (f0a.height * f0a.scale, f0a.width * f0a.scale)
    flows = params.regress(_fmap_tensor(f0a), _fmap_tensor(f1a),
                           _fmap_tensor(k_aux), out_size)
    return FlowSequence([FlowField(uv=f[0].permute(1, 2, 0)) for f in flows])


def predict(enc: ApparentEncoder, dec: MotionDecoder,
            frame0: Frame, frame1: Frame) -> FlowSequence:
    """Full inference pass; swap the arguments for the opposite direction."""
    maybe_validate(frame0, frame1)
    if frame0.pixels.shape != frame1.pixels.shape:
        raise ShapeMismatch("frames differ in shape")
    feat0 = enc(_frame_tensor(frame0))
    feat1 = enc(_frame_tensor(frame1))
    flows = dec(feat0, feat1, (frame0.height, frame0.width))
    return FlowSequence([FlowField(uv=f[0].permute(1, 2, 0)) for f in flows])


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def build_models(cfg: ModelConfig, seed: Union[int, RngSeed]
                 ) -> Tuple[ApparentEncoder, MotionDecoder, WarpNet]:
    """Deterministically initialized (encoder, decoder, warpnet) triple."""
    with torch.random.fork_rng():
        torch.manual_seed(torch_seed_for(seed, "model-init"))
        encoder = ApparentEncoder(cfg.in_channels, cfg.feature_dim, cfg.scale)
        decoder = MotionDecoder(cfg)
        warpnet = WarpNet(
            image_channels=cfg.in_channels,
            feature_channels=cfg.feature_dim,
            base_width=cfg.warp_width,
            depth=cfg.warp_depth,
        )
    return encoder, decoder, warpnet


def architecture_hash(cfg: ModelConfig, *modules: nn.Module) -> str:
    """Fingerprint of the config plus every parameter's name and shape."""
    payload = {"config": asdict(cfg)}
    shapes = []
    for i, mod in enumerate(modules):
        for name, p in mod.state_dict().items():
            shapes.append(f"{i}:{name}:{tuple(p.shape)}")
    payload["shapes"] = shapes
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.md5(blob).hexdigest()
