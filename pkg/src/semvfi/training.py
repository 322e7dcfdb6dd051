"""Two-stage training orchestration.

Stage 1 trains only the compression adapters and the deformable fusion
sites; stage 2 additionally unfreezes the fusion U-Net. The flow estimator,
context pyramid and semantic extractor are never trainable. Freezing is
structural (``requires_grad``), the optimizer is AdamW with cosine-annealed
learning rate and global-norm gradient clipping, and every step appends one
JSONL record so runs can be compared byte-for-byte.

``bootstrap_backbone`` exists for desk-scale runs only: it trains the plain
backbone (semantic branch disabled) on synthetic data to stand in for the
published backbone weights, which cannot be downloaded in an offline
environment.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .data import AugmentConfig, FrameTriplet, TripletRecord, batch_stream
from .errors import ContractViolation
from .losses import LossBreakdown, LossWeights
from .model import SemanticInterpolator, module_hash, save_checkpoint

NEVER_TRAINABLE = frozenset({"ifnet", "contextnet", "semantic_extractor"})

_GROUP_ATTR = {
    "split_fapm": "fapm",
    "dsf": "dsf",
    "fusionnet": "fusionnet",
    "ifnet": "ifnet",
    "contextnet": "contextnet",
    "semantic_extractor": "extractor",
    "teacher": "teacher",
}


@dataclass(frozen=True)
class StageSpec:
    stage: int
    trainable: frozenset[str]
    epochs: int


STAGES = {
    1: StageSpec(1, frozenset({"split_fapm", "dsf"}), epochs=5),
    2: StageSpec(2, frozenset({"split_fapm", "dsf", "fusionnet"}), epochs=25),
}


@dataclass
class TrainConfig:
    batch_size: int = 8
    crop: int = 128
    lr: float = 2e-4
    lr_min: float = 2e-6
    grad_clip_norm: float = 1.0
    weight_decay: float = 1e-4
    seed: int = 0
    stage1_steps: int = 200
    stage2_steps: int = 800
    bootstrap_steps: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.lr <= 0 or self.grad_clip_norm <= 0:
            raise ContractViolation("lr and grad_clip_norm must be positive")
        if self.crop % 32:
            raise ContractViolation(f"training crop must be divisible by 32, got {self.crop}")


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    """Cosine annealing hitting ``lr`` at step 0 and ``lr_min`` at the last step."""
    if total <= 1:
        return lr
    frac = min(step, total - 1) / (total - 1)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * frac))


def build_stage(stage: int, model: SemanticInterpolator):
    """Mark exactly the stage's module groups trainable; everything else frozen.

    Returns the stage spec and the list of (name, parameter) pairs that will
    receive gradients. Freezing is structural: frozen tensors have
    ``requires_grad == False`` rather than having gradients zeroed.
    """
    if stage not in STAGES:
        raise ContractViolation(f"unknown training stage {stage}")
    spec = STAGES[stage]
    return spec, _mark_trainable(model, spec.trainable)


def _mark_trainable(model: SemanticInterpolator, groups: frozenset[str]):
    bad = groups & NEVER_TRAINABLE
    if bad:
        raise ContractViolation(f"groups {sorted(bad)} are permanently frozen")
    unknown = groups - set(_GROUP_ATTR)
    if unknown:
        raise ContractViolation(f"unknown module groups {sorted(unknown)}")
    for p in model.parameters():
        p.requires_grad_(False)
    trainable = []
    for group in sorted(groups):
        module = getattr(model, _GROUP_ATTR[group], None)
        if module is None:
            raise ContractViolation(f"model has no {group!r} component to train")
        module.requires_grad_(True)
    for name, p in model.named_parameters():
        if p.requires_grad:
            trainable.append((name, p))
    return trainable


def compute_losses(
    model: SemanticInterpolator,
    batch: FrameTriplet,
    weights: LossWeights,
    semantics: bool,
) -> LossBreakdown:
    """One forward pass and all five loss terms on it."""
    res = model(batch.i0, batch.i1, t=batch.t, igt=batch.igt, semantics=semantics)
    if res.pad != (0, 0, 0, 0):
        raise ContractViolation("training inputs must already be stride-aligned")
    rec = losses.laplacian_loss(res.final, batch.igt)
    tea = losses.laplacian_loss(res.teacher.frame, batch.igt)
    mask = losses.distillation_mask(res.coarse, res.teacher.frame, batch.igt)
    student_flows = [torch.cat([lv.flow_t0, lv.flow_t1], dim=1) for lv in res.bundle.pyramid]
    teacher_flow = torch.cat([res.teacher.flow_t0, res.teacher.flow_t1], dim=1)
    dis = losses.distillation_loss(student_flows, teacher_flow, mask)
    if semantics and model.config.use_semantics:
        sem = losses.semantic_consistency(res.final, batch.igt, model.extractor)
        reg = losses.offset_reg(res.site_offsets("s2"), res.site_offsets("s3"))
    else:
        sem = rec.new_zeros(())
        reg = rec.new_zeros(())
    return losses.total_loss(rec, dis, tea, sem, reg, weights)


class Trainer:
    """Owns the optimizer/log for one phase (bootstrap, stage 1 or stage 2)."""

    def __init__(
        self,
        model: SemanticInterpolator,
        cfg: TrainConfig,
        trainable,
        total_steps: int,
        log_path: Path,
        label: str,
        semantics: bool = True,
    ):
        self.model = model
        self.cfg = cfg
        self.params = [p for _, p in trainable]
        if not self.params:
            raise ContractViolation("no trainable parameters for this phase")
        self.optimizer = torch.optim.AdamW(
            self.params, lr=cfg.lr, weight_decay=cfg.weight_decay
        )
        self.total_steps = total_steps
        self.log_path = log_path
        self.label = label
        self.semantics = semantics
        self.step_idx = 0
        self.gate_grad_seen = False
        self.history: list[dict] = []

    def current_lr(self) -> float:
        return cosine_lr(self.step_idx, self.total_steps, self.cfg.lr, self.cfg.lr_min)

    def train_step(self, batch: FrameTriplet) -> tuple[LossBreakdown, float]:
        self.model.train()
        lr = self.current_lr()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        breakdown = compute_losses(self.model, batch, self.cfg.weights, self.semantics)
        if not torch.isfinite(breakdown.total):
            self._dump_diagnostics(batch, breakdown, lr)
            raise RuntimeError(
                f"non-finite loss at {self.label} step {self.step_idx}: "
                f"{breakdown.detached()} (diagnostic dump next to the log)"
            )
        self.optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip_norm)
        grad_norm = math.sqrt(
            sum(float(p.grad.pow(2).sum()) for p in self.params if p.grad is not None)
        )
        if self.model.config.use_semantics and self.model.dsf is not None:
            for site in self.model.dsf.values():
                for g in (site.gate_past, site.gate_future):
                    if g.grad is not None and float(g.grad.abs()) > 0:
                        self.gate_grad_seen = True
        self.optimizer.step()
        record = {
            "phase": self.label,
            "step": self.step_idx,
            "lr": lr,
            **breakdown.detached(),
            "grad_norm": grad_norm,
        }
        self.history.append(record)
        with self.log_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")
        self.step_idx += 1
        return breakdown, grad_norm

    def _dump_diagnostics(self, batch: FrameTriplet, breakdown: LossBreakdown, lr: float):
        dump = self.log_path.with_suffix(".dump.pt")
        torch.save(
            {
                "i0": batch.i0,
                "i1": batch.i1,
                "igt": batch.igt,
                "lr": lr,
                "step": self.step_idx,
                "components": breakdown.detached(),
            },
            dump,
        )


def _run_phase(
    model: SemanticInterpolator,
    records: list[TripletRecord],
    cfg: TrainConfig,
    trainable,
    steps: int,
    out_dir: Path,
    label: str,
    stage: int | None,
    semantics: bool,
) -> Trainer:
    aug = AugmentConfig(crop=cfg.crop)
    trainer = Trainer(
        model, cfg, trainable, steps, out_dir / "train_log.jsonl", label, semantics
    )
    steps_per_epoch = max(1, len(records) // cfg.batch_size)
    epoch = 0
    while trainer.step_idx < steps:
        for batch in batch_stream(records, cfg.batch_size, cfg.seed, epoch, aug):
            trainer.train_step(batch)
            if trainer.step_idx >= steps:
                break
            if trainer.step_idx % steps_per_epoch == 0:
                _save(model, trainer, out_dir, f"{label}_e{epoch}", stage, cfg)
        epoch += 1
    _save(model, trainer, out_dir, label, stage, cfg)
    return trainer


def _save(model, trainer, out_dir, name, stage, cfg):
    save_checkpoint(
        model,
        out_dir / f"ckpt_{name}.pt",
        optimizer=trainer.optimizer.state_dict(),
        stage=stage,
        step=trainer.step_idx,
        config_hash=config_hash(cfg),
    )


def config_hash(cfg: TrainConfig) -> str:
    import hashlib

    payload = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def bootstrap_backbone(
    model: SemanticInterpolator,
    records: list[TripletRecord],
    cfg: TrainConfig,
    out_dir: str | Path,
) -> Trainer:
    """Desk-scale backbone pretraining (stand-in for published weights).

    Trains flow blocks, context pyramid, fusion net and the teacher jointly
    with the semantic branch disabled; the fusion gates stay at zero so the
    resulting weights are a plain-backbone checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    for p in model.parameters():
        p.requires_grad_(False)
    for group in ("ifnet", "contextnet", "fusionnet", "teacher"):
        getattr(model, group).requires_grad_(True)
    trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    trainer = _run_phase(
        model, records, cfg, trainable, cfg.bootstrap_steps, out_dir, "bootstrap", None, False
    )
    model.ifnet.requires_grad_(False)
    model.contextnet.requires_grad_(False)
    model.teacher.requires_grad_(False)
    return trainer


def run_training(
    model: SemanticInterpolator,
    records: list[TripletRecord],
    cfg: TrainConfig,
    out_dir: str | Path,
    stages: tuple[int, ...] = (1, 2),
) -> dict:
    """Run the staged schedule and return a per-stage summary.

    A fresh optimizer (and cosine schedule) starts at each stage boundary so
    newly unfrozen parameters do not inherit stale moments.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed % (2**32))
    frozen_hashes = {
        name: module_hash(getattr(model, _GROUP_ATTR[name]))
        for name in sorted(NEVER_TRAINABLE)
        if getattr(model, _GROUP_ATTR[name], None) is not None
    }
    summary = {"frozen_hashes_before": frozen_hashes}
    for stage in stages:
        spec, trainable = build_stage(stage, model)
        steps = cfg.stage1_steps if stage == 1 else cfg.stage2_steps
        trainer = _run_phase(
            model, records, cfg, trainable, steps, out_dir, f"stage{stage}", stage, True
        )
        summary[f"stage{stage}"] = {
            "steps": trainer.step_idx,
            "trainable": sorted({n.split(".")[0] for n, _ in trainable}),
            "gate_grad_seen": trainer.gate_grad_seen,
            "first_total": trainer.history[0]["total"] if trainer.history else None,
            "final_total": trainer.history[-1]["total"] if trainer.history else None,
            "history": trainer.history,
        }
    summary["frozen_hashes_after"] = {
        name: module_hash(getattr(model, _GROUP_ATTR[name]))
        for name in sorted(NEVER_TRAINABLE)
        if getattr(model, _GROUP_ATTR[name], None) is not None
    }
    return summary
