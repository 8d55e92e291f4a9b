"""Two-phase training orchestration: supervised apparent-information
learning, then kinetics-guided self-supervision on unlabeled pairs.

Every source of randomness is a pure function of (seed, phase, step), so a
checkpoint of (parameters, optimizer moments, step) resumes a run
bit-identically without serializing any generator state.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import torch
import yaml

from .core import FlowField, derive_rng, maybe_validate
from .dataio import SampleRecord, batch_at, load_manifest
from .errors import ConfigError, EmptyValidSet, PreconditionError, RangeError
from .kinetics import KineticsConfig, kgl_step_batch
from .losses import LossBreakdown, LossConfig, PerceptualExtractor, ail_total
from .metrics import MetricReport, aggregate_reports, compute_report
from .model import (
    ApparentEncoder,
    ModelConfig,
    MotionDecoder,
    architecture_hash,
    build_models,
)
from .warp import WarpNet

CHECKPOINT_VERSION = 1

PHASES = ("AIL", "KGL")


@dataclass
class TrainConfig:
    phase: str = "AIL"
    steps: int = 2000
    batch: int = 2
    lr_max: float = 4e-4
    weight_decay: float = 1e-5
    warmup_frac: float = 0.1
    start_frac: float = 0.04
    final_frac: float = 0.05
    constant_lr: bool = False
    clip_grad: float = 1.0
    crop: Tuple[int, int] = (64, 64)
    augment: bool = False
    seed: int = 0
    eval_every: int = 100
    train_manifest: str = ""
    eval_manifest: str = ""
    freeze_encoder: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    kinetics: KineticsConfig = field(default_factory=KineticsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr_max < 0:
            raise ConfigError(f"lr_max must be nonnegative, got {self.lr_max}")
        self.crop = tuple(int(c) for c in self.crop)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop"] = list(self.crop)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, val in data.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key == "loss":
                val = LossConfig(**val)
            elif key == "kinetics":
                val = KineticsConfig(**val)
            elif key == "model":
                val = ModelConfig(**val)
            kwargs[key] = val
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_yaml(cls, path) -> "TrainConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"bad YAML in {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
        return cls.from_dict(data)

    def to_yaml(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)


@dataclass
class ModelBundle:
    encoder: ApparentEncoder
    decoder: MotionDecoder
    warpnet: WarpNet
    extractor: PerceptualExtractor

    def trainable_parameters(self, freeze_encoder: bool = False):
        params = []
        if not freeze_encoder:
            params += list(self.encoder.parameters())
        params += list(self.decoder.parameters())
        params += list(self.warpnet.parameters())
        return params

    def all_modules(self):
        return (self.encoder, self.decoder, self.warpnet)


def build_bundle(cfg: TrainConfig) -> ModelBundle:
    encoder, decoder, warpnet = build_models(cfg.model, cfg.seed)
    extractor = PerceptualExtractor(in_channels=cfg.model.in_channels, seed=cfg.seed)
    return ModelBundle(encoder, decoder, warpnet, extractor)


def make_optimizer(bundle: ModelBundle, cfg: TrainConfig) -> torch.optim.AdamW:
    """Decoupled-weight-decay adaptive optimizer over all trainable params."""
    return torch.optim.AdamW(
        bundle.trainable_parameters(cfg.freeze_encoder),
        lr=cfg.lr_max,
        weight_decay=cfg.weight_decay,
    )


def one_cycle_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, then linear decay to lr_max * final_frac.

    With a zero-length warmup the schedule starts at lr_max directly.
    """
    if not 0 <= step < cfg.steps:
        raise RangeError(f"step {step} outside [0, {cfg.steps})")
    if cfg.constant_lr:
        return cfg.lr_max
    warmup_steps = int(round(cfg.warmup_frac * cfg.steps))
    if step < warmup_steps:
        t = step / warmup_steps
        return cfg.lr_max * (cfg.start_frac + (1.0 - cfg.start_frac) * t)
    span = max(cfg.steps - 1 - warmup_steps, 1)
    t = (step - warmup_steps) / span
    return cfg.lr_max * (1.0 + t * (cfg.final_frac - 1.0))


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

def _stack_frames(records: Sequence[SampleRecord], which: int) -> torch.Tensor:
    frames = [r.frame0 if which == 0 else r.frame1 for r in records]
    return torch.stack([f.pixels.permute(2, 0, 1) for f in frames])


def _stack_flow(records: Sequence[SampleRecord]):
    uv = torch.stack([r.gt_flow.uv.permute(2, 0, 1) for r in records])
    if any(r.gt_flow.valid is not None for r in records):
        valid = torch.stack([
            r.gt_flow.valid if r.gt_flow.valid is not None
            else torch.ones(r.gt_flow.uv.shape[:2], dtype=torch.bool)
            for r in records])
    else:
        valid = None
    return uv, valid


def _stack_occ(records: Sequence[SampleRecord]):
    if all(r.gt_occ is not None for r in records):
        return torch.stack([r.gt_occ.occ for r in records])
    return None


# ---------------------------------------------------------------------------
# Training steps
# ---------------------------------------------------------------------------

def _apply_update(bundle: ModelBundle, optimizer: torch.optim.AdamW,
                  loss: torch.Tensor, lr: float, cfg: TrainConfig) -> None:
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.clip_grad > 0:
        torch.nn.utils.clip_grad_norm_(
            bundle.trainable_parameters(cfg.freeze_encoder), cfg.clip_grad)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


def ail_step(bundle: ModelBundle, optimizer: torch.optim.AdamW,
             batch: Sequence[SampleRecord], cfg: TrainConfig,
             step: int) -> LossBreakdown:
    """One supervised update: bidirectional prediction, occlusion-aware warp
    of frame0 toward frame1, composite L1 + perceptual + occlusion loss."""
    for rec in batch:
        if rec.gt_flow is None:
            raise PreconditionError(f"record {rec.id!r} lacks gt_flow")
        if rec.gt_flow.valid is not None and not bool(rec.gt_flow.valid.any()):
            raise EmptyValidSet(f"record {rec.id!r} has an empty valid mask")
    frames0 = _stack_frames(batch, 0)
    frames1 = _stack_frames(batch, 1)
    gt_uv, valid = _stack_flow(batch)
    gt_occ = _stack_occ(batch)
    out_size = frames0.shape[2:]

    feat0 = bundle.encoder(frames0)
    feat1 = bundle.encoder(frames1)
    seq01 = bundle.decoder(feat0, feat1, out_size)
    flow01 = seq01[-1]
    flow10 = bundle.decoder(feat1, feat0, out_size)[-1]
    warped, occ_pred = bundle.warpnet(frames0, flow01, flow10, domain="image")

    breakdown = ail_total(
        preds=seq01,
        gt_flow=gt_uv,
        pred_occ=occ_pred,
        gt_occ=gt_occ,
        frame_target=frames1,
        frame_warped=warped,
        extractor=bundle.extractor,
        cfg=cfg.loss,
        valid=valid,
    )
    lr = one_cycle_lr(step, cfg)
    _apply_update(bundle, optimizer, breakdown.total, lr, cfg)
    breakdown.components["lr"] = lr
    # final-prediction mean per-pixel L1 in px, the overfit progress gauge
    with torch.no_grad():
        err = (flow01 - gt_uv).abs().sum(dim=1)
        if valid is not None:
            err = err[valid]
        breakdown.components["l1_final_px"] = float(err.mean())
    return breakdown


def kgl_train_step(bundle: ModelBundle, optimizer: torch.optim.AdamW,
                   batch: Sequence[SampleRecord], cfg: TrainConfig,
                   step: int) -> LossBreakdown:
    """One self-supervised update on unlabeled pairs; labels are ignored."""
    frames0 = _stack_frames(batch, 0)
    frames1 = _stack_frames(batch, 1)
    alpha = cfg.kinetics.sample_alpha(derive_rng(cfg.seed, "alpha", step))
    breakdown, _, _ = kgl_step_batch(
        bundle.encoder, bundle.decoder, bundle.warpnet,
        frames0, frames1, alpha, cfg.loss, bundle.extractor)
    lr = one_cycle_lr(step, cfg)
    _apply_update(bundle, optimizer, breakdown.total, lr, cfg)
    breakdown.components["lr"] = lr
    return breakdown


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(bundle: ModelBundle, records: Sequence[SampleRecord]) -> MetricReport:
    """Metrics of the final flow prediction over a labeled record set."""
    reports = []
    with torch.no_grad():
        for rec in records:
            if rec.gt_flow is None:
                raise PreconditionError(f"record {rec.id!r} lacks gt_flow")
            f0 = rec.frame0.pixels.permute(2, 0, 1).unsqueeze(0)
            f1 = rec.frame1.pixels.permute(2, 0, 1).unsqueeze(0)
            feat0 = bundle.encoder(f0)
            feat1 = bundle.encoder(f1)
            flow = bundle.decoder(feat0, feat1, f0.shape[2:])[-1]
            pred = FlowField(uv=flow[0].permute(1, 2, 0))
            reports.append(compute_report(pred, rec.gt_flow))
    return aggregate_reports(reports)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path, bundle: ModelBundle, optimizer: torch.optim.AdamW,
                    step: int, cfg: TrainConfig) -> None:
    """Single-file versioned container (torch.save; little-endian tensors).

    Randomness is reconstructed from (seed, step), so no generator state is
    stored: loading and running step N is bit-identical to never stopping.
    """
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch_hash": architecture_hash(cfg.model, *bundle.all_modules()),
        "encoder": bundle.encoder.state_dict(),
        "decoder": bundle.decoder.state_dict(),
        "warpnet": bundle.warpnet.state_dict(),
        "extractor": bundle.extractor.state_dict(),
        "optimizer": optimizer.state_dict(),
        "step": int(step),
        "config": cfg.to_dict(),
        "seed": int(cfg.seed),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as e:
        raise PreconditionError(f"checkpoint not found: {path}") from e
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint version {payload.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    return payload


def restore_bundle(payload: dict, cfg: Optional[TrainConfig] = None
                   ) -> Tuple[ModelBundle, TrainConfig]:
    """Rebuild models from a checkpoint payload; cfg overrides the echo."""
    echo = TrainConfig.from_dict(payload["config"])
    cfg = cfg if cfg is not None else echo
    bundle = build_bundle(cfg)
    expected = architecture_hash(cfg.model, *bundle.all_modules())
    if payload["arch_hash"] != expected:
        raise ConfigError(
            "checkpoint architecture does not match the configured model "
            f"({payload['arch_hash'][:8]} vs {expected[:8]})")
    bundle.encoder.load_state_dict(payload["encoder"])
    bundle.decoder.load_state_dict(payload["decoder"])
    bundle.warpnet.load_state_dict(payload["warpnet"])
    bundle.extractor.load_state_dict(payload["extractor"])
    return bundle, cfg


# ---------------------------------------------------------------------------
# Phase runners
# ---------------------------------------------------------------------------

class TrainingLog:
    """Append-only JSONL log: one record per step plus eval records."""

    def __init__(self, path=None):
        self.path = path
        self.records: List[dict] = []
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")


def run_phase(cfg: TrainConfig, bundle: ModelBundle,
              optimizer: torch.optim.AdamW,
              train_records: Sequence[SampleRecord],
              eval_records: Optional[Sequence[SampleRecord]] = None,
              start_step: int = 0,
              log: Optional[TrainingLog] = None,
              stop_check=None) -> int:
    """Run cfg.steps of the configured phase; returns the final step count.

    ``stop_check``, when given, is called with the per-step components
    after each evaluation point and may return True to stop early.
    """
    log = log if log is not None else TrainingLog()
    step_fn = ail_step if cfg.phase == "AIL" else kgl_train_step
    for step in range(start_step, cfg.steps):
        t0 = time.perf_counter()
        batch = batch_at(train_records, step, cfg.batch, cfg.seed,
                         crop=cfg.crop, augment=cfg.augment)
        breakdown = step_fn(bundle, optimizer, batch, cfg, step)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        record = {"phase": cfg.phase, "step": step,
                  "wall_ms": round(wall_ms, 3), **breakdown.components}
        log.append(record)
        at_eval = cfg.eval_every > 0 and (step + 1) % cfg.eval_every == 0
        if at_eval and eval_records:
            report = evaluate(bundle, eval_records)
            log.append({"phase": cfg.phase, "step": step, "eval_epe": report.epe,
                        "eval_fl_all": report.fl_all})
            record["eval_epe"] = report.epe
        if at_eval and stop_check is not None and stop_check(record):
            return step + 1
    return cfg.steps


def run_training(cfg: TrainConfig, checkpoint_out,
                 resume: Optional[str] = None,
                 init_from: Optional[str] = None,
                 log_path: Optional[str] = None) -> Tuple[ModelBundle, int]:
    """End-to-end phase run for the CLI: load data, train, checkpoint."""
    if not cfg.train_manifest:
        raise ConfigError("missing config key 'train_manifest'")
    train_records = load_manifest(cfg.train_manifest)
    eval_records = load_manifest(cfg.eval_manifest) if cfg.eval_manifest else None

    start_step = 0
    if resume is not None:
        payload = load_checkpoint(resume)
        bundle, _ = restore_bundle(payload, cfg)
        optimizer = make_optimizer(bundle, cfg)
        optimizer.load_state_dict(payload["optimizer"])
        start_step = payload["step"]
        if payload["config"].get("phase") != cfg.phase:
            raise ConfigError(
                f"resume checkpoint is from phase {payload['config'].get('phase')!r}, "
                f"config requests {cfg.phase!r}")
    elif init_from is not None:
        payload = load_checkpoint(init_from)
        bundle, _ = restore_bundle(payload, cfg)
        optimizer = make_optimizer(bundle, cfg)
    elif cfg.phase == "KGL":
        raise PreconditionError(
            "KGL needs an AIL checkpoint: pass --init-from or --resume")
    else:
        bundle = build_bundle(cfg)
        optimizer = make_optimizer(bundle, cfg)

    log = TrainingLog(log_path)
    final_step = run_phase(cfg, bundle, optimizer, train_records, eval_records,
                           start_step=start_step, log=log)
    save_checkpoint(checkpoint_out, bundle, optimizer, final_step, cfg)
    return bundle, final_step
