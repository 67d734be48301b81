"""Training loops: SimCLR teacher pretraining, adversarial self-supervised
distillation (ProFeAT, DeACL and the ablation variants) and supervised TRADES.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np
import torch

from .attacks import AttackSpec, evaluating, make_attack_objective, make_supervised_objective, pgd, \
    resolve_attack_objective
from .augment import AugPolicy, ViewPolicies, augment, make_view_pair, resolve_pairing
from .data import LabeledDataset, batch_iter
from .losses import collapse_counter, compute_reps, loss_ntxent, loss_trades, make_defense_loss, resolve_defense
from .models import (CheckpointHeader, ModelTriple, ProjectorConfig, build_backbone, build_head,
                     build_projector, init_student_from_teacher, load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class CollapseError(TrainingError):
    pass


# ---------------------------------------------------------------------------
# learning-rate schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LRSchedule:
    kind: str = "cosine_warmup"
    max_lr: float = 0.5
    total_epochs: int = 100
    warmup_epochs: float = 10
    milestones: tuple = (15, 20)
    gamma: float = 0.1

    def __post_init__(self):
        if self.kind not in ("cosine_warmup", "step", "constant"):
            raise ValueError(f"unknown lr schedule {self.kind!r}")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if self.kind == "cosine_warmup" and self.total_epochs > 0 \
                and not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must be smaller than total_epochs")


def lr_at(schedule: LRSchedule, fraction: float) -> float:
    """Learning rate after ``fraction`` (in [0, 1]) of training."""
    fraction = min(max(fraction, 0.0), 1.0)
    epoch = fraction * schedule.total_epochs
    if schedule.kind == "constant":
        return schedule.max_lr
    if schedule.kind == "step":
        drops = sum(epoch >= m for m in schedule.milestones)
        return schedule.max_lr * schedule.gamma ** drops
    warm = schedule.warmup_epochs
    if epoch < warm:
        return schedule.max_lr * epoch / warm
    span = schedule.total_epochs - warm
    progress = (epoch - warm) / span if span > 0 else 1.0
    return schedule.max_lr * 0.5 * (1 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    ``attack`` / ``defense`` / ``pairing`` accept the ablation aliases
    (``AT1``..``AT7``, ``AD1``..``AD9``, ``AG1``..``AG5``, ``ours``, ``deacl``).
    """

    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.5
    schedule: str = "cosine_warmup"
    warmup_epochs: float = 3
    milestones: tuple = ()
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 3e-4
    seed: int = 0
    # model
    backbone: dict = field(default_factory=lambda: {"arch": "tiny_cnn", "feature_dim": 64, "width": 16})
    projector: Optional[ProjectorConfig] = field(default_factory=ProjectorConfig)
    # distillation
    pairing: str = "ours"
    defense: object = "ours"
    beta: float = 8.0
    lam: float = 0.5
    attack: object = "ours"
    attack_spec: AttackSpec = field(default_factory=AttackSpec)
    attack_on_view: bool = True
    weak_policy: AugPolicy = field(default_factory=AugPolicy.weak)
    strong_policy: AugPolicy = field(default_factory=AugPolicy.strong)
    # simclr
    temperature: float = 0.5
    # collapse detection
    abort_on_collapse: bool = True
    collapse_patience: int = 3

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive and weight decay non-negative")
        self.milestones = tuple(self.milestones)

    def lr_schedule(self) -> LRSchedule:
        return LRSchedule(self.schedule, self.lr, max(self.epochs, 1),
                          min(self.warmup_epochs, max(self.epochs - 1, 0)),
                          self.milestones, self.gamma)

    def policies(self) -> ViewPolicies:
        return ViewPolicies(self.weak_policy, self.strong_policy)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("defense", "attack") and not isinstance(v, str):
                v = v.to_dict()
            elif hasattr(v, "__dataclass_fields__"):
                v = asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "projector" in d and isinstance(d["projector"], dict):
            d["projector"] = ProjectorConfig(**d["projector"])
        if isinstance(d.get("attack_spec"), dict):
            d["attack_spec"] = AttackSpec(**d["attack_spec"])
        for key in ("weak_policy", "strong_policy"):
            if isinstance(d.get(key), dict):
                p = dict(d[key])
                p["ops"] = tuple(tuple(o) for o in p.get("ops", ()))
                d[key] = AugPolicy(**p)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys {sorted(unknown)}; allowed: {sorted(known)}")
        return cls(**d)


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _seed_for(*parts) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    models: dict
    config: dict
    epoch: int = 0
    history: list = field(default_factory=list)
    seed: int = 0
    kind: str = "model"
    optimizer_state: Optional[dict] = None
    collapse_detected: bool = False

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def save(self, path) -> None:
        header = CheckpointHeader(self.config_hash, self.seed, self.epoch, self.kind)
        save_checkpoint(path, self.models, header, self.config, self.history, self.optimizer_state)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        blob = load_checkpoint(path)
        h = blob["header"]
        return cls(blob["models"], blob["config"], h.epoch, blob["history"], h.seed, h.kind,
                   blob.get("optimizer"))


def _sgd(params, cfg: TrainConfig):
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


class _CollapseWatch:
    def __init__(self, cfg: TrainConfig):
        self.patience = cfg.collapse_patience
        self.abort = cfg.abort_on_collapse
        self.streak = 0
        self.fired = False

    def update(self, flagged: bool, epoch: int, detail: dict) -> None:
        self.streak = self.streak + 1 if flagged else 0
        if self.streak >= self.patience:
            self.fired = True
            if self.abort:
                raise CollapseError(
                    f"representation collapse for {self.streak} consecutive epochs "
                    f"(epoch {epoch}): {detail}"
                )


def _collapse_check(*reps) -> tuple:
    from .evaluation import collapse_metrics
    out = {}
    flagged = False
    for name, r in reps:
        if r is None:
            continue
        m = collapse_metrics(r.detach())
        out[name] = m
        flagged |= m["collapsed"]
    return flagged, out


def _run_epochs(cfg, ds, params, step_fn, start_epoch, history, opt_state, on_epoch, watch_reps):
    """Shared epoch loop: LR schedule, non-finite guard, collapse watch, callbacks."""
    opt = _sgd(params, cfg)
    if opt_state is not None:
        opt.load_state_dict(opt_state)
    schedule = cfg.lr_schedule()
    watch = _CollapseWatch(cfg)
    iters = max(1, math.ceil(len(ds) / cfg.batch_size))
    for epoch in range(start_epoch, cfg.epochs):
        losses = []
        collapse_counter.reset()
        last = None
        for step, b in enumerate(batch_iter(ds, cfg.batch_size, _seed_for(cfg.seed, epoch, 1))):
            lr = lr_at(schedule, (epoch + step / iters) / cfg.epochs)
            for g in opt.param_groups:
                g["lr"] = lr
            loss, last = step_fn(b, _seed_for(cfg.seed, epoch, step, 2))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        flagged, detail = _collapse_check(*watch_reps(last))
        entry = {"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else float("nan"),
                 "lr": lr if losses else 0.0, "zero_norm_rows": collapse_counter.count,
                 "collapse_flag": flagged,
                 "effective_rank": {k: v["effective_rank"] for k, v in detail.items()}}
        history.append(entry)
        log.info("epoch %d loss %.4f", epoch + 1, entry["loss"])
        watch.update(flagged, epoch + 1, detail)
        if on_epoch is not None:
            on_epoch(epoch + 1, history, opt.state_dict())
    return watch


# ---------------------------------------------------------------------------
# SimCLR teacher
# ---------------------------------------------------------------------------

def build_teacher(cfg: TrainConfig) -> ModelTriple:
    bb = cfg.backbone
    backbone = build_backbone(bb["arch"], bb.get("feature_dim", 64), seed=cfg.seed,
                              width=bb.get("width", 16), in_channels=bb.get("in_channels", 3))
    projector = None
    if cfg.projector is not None:
        projector = build_projector(cfg.projector, backbone.feature_dim)
    return ModelTriple(backbone, projector)


def train_simclr(cfg: TrainConfig, ds: LabeledDataset, resume: Optional[Checkpoint] = None,
                 on_epoch: Optional[Callable] = None) -> Checkpoint:
    """Contrastive pretraining of backbone + projector on two augmented views."""
    if resolve_pairing(cfg.pairing).value.startswith("common"):
        raise ValueError("SimCLR needs two distinct views; use an independent_* pairing")
    if resume is not None:
        model, history, start = resume.models["teacher"], list(resume.history), resume.epoch
        opt_state = resume.optimizer_state
    else:
        model, history, start, opt_state = build_teacher(cfg), [], 0, None
    if model.projector is None:
        raise ValueError("SimCLR pretraining needs a projector")
    torch.manual_seed(cfg.seed)
    model.train()
    policies = cfg.policies()

    def step(b, seed):
        v1, v2 = make_view_pair(b, cfg.pairing, seed, policies)
        _, z = model.represent_both(torch.cat([v1.pixels, v2.pixels]))
        n = len(b)
        return loss_ntxent(z[:n], z[n:], cfg.temperature), z

    ckpt_cb = None
    if on_epoch is not None:
        ckpt_cb = lambda e, h, o: on_epoch(Checkpoint({"teacher": model}, cfg.to_dict(), e, h,
                                                       cfg.seed, "teacher", o))
    _run_epochs(cfg, ds, model.trainable_parameters(), step, start, history, opt_state, ckpt_cb,
                lambda z: [("projector", z)])
    model.eval()
    return Checkpoint({"teacher": model}, cfg.to_dict(), cfg.epochs, history, cfg.seed, "teacher")


# ---------------------------------------------------------------------------
# adversarial self-supervised distillation
# ---------------------------------------------------------------------------

def train_profeat(cfg: TrainConfig, teacher: Checkpoint, ds: LabeledDataset,
                  resume: Optional[Checkpoint] = None,
                  on_epoch: Optional[Callable] = None) -> Checkpoint:
    """Distil a robust student from a frozen self-supervised teacher.

    Per batch: build the teacher/student views, craft one adversarial input
    from the student view with the configured attack objective (student in
    inference mode), then take one optimizer step on the defense loss.
    """
    defense = make_defense_loss(resolve_defense(cfg.defense, cfg.beta, cfg.lam))
    objective_spec = resolve_attack_objective(cfg.attack)
    if resume is not None:
        T, S = resume.models["teacher"], resume.models["student"]
        history, start, opt_state = list(resume.history), resume.epoch, resume.optimizer_state
    else:
        base = teacher.models["teacher"] if isinstance(teacher, Checkpoint) else teacher
        T, S = init_student_from_teacher(base, cfg.projector, seed=cfg.seed)
        history, start, opt_state = [], 0, None
    needs_proj = defense.spec.uses_projector or objective_spec.uses_projector
    if needs_proj and (S.projector is None or T.projector is None):
        raise ValueError("defense/attack use the projector space but the student has no projector")
    torch.manual_seed(cfg.seed)
    T.eval()
    S.train()
    policies = cfg.policies()

    def step(b, seed):
        tv, sv = make_view_pair(b, cfg.pairing, seed, policies)
        x_s, x_t = (sv.pixels, tv.pixels) if cfg.attack_on_view else (b.pixels, tv.pixels)
        with evaluating(S):
            objective = make_attack_objective(objective_spec, T, S, x_s, x_t)
            x_adv = pgd(objective, x_s, cfg.attack_spec, seed)
        S.train()
        reps = compute_reps(T, S, x_s, x_adv, x_t, projector=defense.spec.uses_projector)
        return defense.from_reps(reps), reps

    ckpt_cb = None
    if on_epoch is not None:
        ckpt_cb = lambda e, h, o: on_epoch(Checkpoint({"teacher": T, "student": S}, cfg.to_dict(),
                                                       e, h, cfg.seed, "student", o))
    watch = _run_epochs(cfg, ds, S.trainable_parameters(), step, start, history, opt_state, ckpt_cb,
                        lambda r: [("feature", r.s_f), ("projector", r.s_p)])
    S.eval()
    return Checkpoint({"teacher": T, "student": S}, cfg.to_dict(), cfg.epochs, history, cfg.seed,
                      "student", collapse_detected=watch.fired)


# ---------------------------------------------------------------------------
# supervised TRADES
# ---------------------------------------------------------------------------

def build_classifier(cfg: TrainConfig, num_classes: int,
                     init: Optional[ModelTriple] = None) -> ModelTriple:
    if init is not None:
        backbone = copy.deepcopy(init.backbone)
        for p in backbone.parameters():
            p.requires_grad_(True)
    else:
        bb = cfg.backbone
        backbone = build_backbone(bb["arch"], bb.get("feature_dim", 64), seed=cfg.seed,
                                  width=bb.get("width", 16), in_channels=bb.get("in_channels", 3))
    torch.manual_seed(cfg.seed)
    return ModelTriple(backbone, None, build_head(backbone.feature_dim, num_classes))


def train_trades(cfg: TrainConfig, ds: LabeledDataset, init: Optional[ModelTriple] = None,
                 resume: Optional[Checkpoint] = None,
                 on_epoch: Optional[Callable] = None) -> Checkpoint:
    """TRADES: KL-maximizing PGD, then CE + beta * KL on the crafted inputs."""
    if resume is not None:
        model, history, start = resume.models["model"], list(resume.history), resume.epoch
        opt_state = resume.optimizer_state
    else:
        model, history, start, opt_state = build_classifier(cfg, ds.num_classes, init), [], 0, None
    torch.manual_seed(cfg.seed)
    model.train()
    weak = cfg.weak_policy

    def step(b, seed):
        x = augment(b, weak, seed).pixels
        with evaluating(model):
            objective = make_supervised_objective("max_KL", model, x)
            x_adv = pgd(objective, x, cfg.attack_spec, seed)
        model.train()
        logits = model(torch.cat([x, x_adv]))
        n = len(b)
        return loss_trades(logits[:n], logits[n:], b.labels, cfg.beta), None

    ckpt_cb = None
    if on_epoch is not None:
        ckpt_cb = lambda e, h, o: on_epoch(Checkpoint({"model": model}, cfg.to_dict(), e, h,
                                                       cfg.seed, "trades", o))
    _run_epochs(cfg, ds, model.trainable_parameters(), step, start, history, opt_state, ckpt_cb,
                lambda _: [])
    model.eval()
    return Checkpoint({"model": model}, cfg.to_dict(), cfg.epochs, history, cfg.seed, "trades")
