"""Probes, robust accuracy and representation diagnostics."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attacks import AttackSpec, eval_attack, evaluating
from .data import LabeledDataset, batch_iter
from .losses import cosine_rows
from .models import ModelTriple, build_head

SCHEMA_VERSION = 1
LP_LRS = (0.05, 0.1, 0.5, 1.0, 5.0)


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    """One evaluation of one model.  Accuracies are percentages."""

    SA: float
    RA_by_attack: dict = field(default_factory=dict)
    alignment: dict = field(default_factory=dict)
    collapse: dict = field(default_factory=dict)
    protocol: dict = field(default_factory=dict)
    run: str = ""
    config_hash: str = ""
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    @property
    def masking_gap(self) -> Optional[float]:
        ra = self.RA_by_attack
        if "pgd20_ce" in ra and "margin_pgd" in ra:
            return ra["pgd20_ce"] - ra["margin_pgd"]
        return None

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["masking_gap"] = self.masking_gap
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "EvalReport":
        version = rec.get("schema_version")
        if version != SCHEMA_VERSION:
            raise EvalError(f"report schema version {version} != supported {SCHEMA_VERSION}")
        rec = {k: v for k, v in rec.items() if k != "masking_gap"}
        return cls(**rec)


def write_reports(path, reports: Sequence[EvalReport], append: bool = True) -> None:
    with open(path, "a" if append else "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")


def read_reports(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(EvalReport.from_record(json.loads(line)))
    return out


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Plain aligned text table; ``None`` cells render as ``-`` (absent, not zero)."""
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.2f}"
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# feature helpers
# ---------------------------------------------------------------------------

def _as_backbone(model) -> nn.Module:
    return model.backbone if isinstance(model, ModelTriple) else model


@torch.no_grad()
def extract(model: nn.Module, ds: LabeledDataset, batch_size: int = 512) -> torch.Tensor:
    with evaluating(model):
        return torch.cat([model(b.pixels) for b in batch_iter(ds, batch_size)])


def _labels(ds: LabeledDataset) -> torch.Tensor:
    return torch.from_numpy(ds.labels)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def collapse_metrics(reps: torch.Tensor) -> dict:
    """Mean row norm and effective rank (exp of the singular-value entropy)."""
    reps = reps.detach().double().flatten(1)
    if reps.shape[0] < 2:
        raise EvalError("collapse metrics need at least two rows")
    norm = reps.norm(dim=1).mean().item()
    s = torch.linalg.svdvals(reps)
    total = s.sum()
    if total <= 0:
        erank = 0.0
    else:
        p = s / total
        p = p[p > 0]
        erank = float(torch.exp(-(p * p.log()).sum()))
    return {"mean_row_norm": norm, "effective_rank": erank,
            "collapsed": bool(erank < 1.05 or norm < 1e-6)}


@torch.no_grad()
def alignment_report(T: ModelTriple, S: ModelTriple, ds: LabeledDataset,
                     batch_size: int = 512) -> dict:
    """Dataset-mean cosine between teacher and student at each shared space."""
    out = {}
    cf, cp = [], []
    with evaluating(T, S):
        for b in batch_iter(ds, batch_size):
            has_proj = T.projector is not None and S.projector is not None
            tf, tp = T.represent_both(b.pixels, has_proj)
            sf, sp = S.represent_both(b.pixels, has_proj)
            cf.append(cosine_rows(tf, sf))
            if has_proj and tp.shape == sp.shape:
                cp.append(cosine_rows(tp, sp))
    out["cos_feature"] = torch.cat(cf).mean().item()
    out["cos_projector"] = torch.cat(cp).mean().item() if cp else None
    return out


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    epochs: int = 25
    lrs: tuple = LP_LRS
    milestones: tuple = (15, 20)
    gamma: float = 0.1
    weight_decay: float = 2e-4
    momentum: float = 0.9
    batch_size: int = 256
    seed: int = 0
    hidden: Optional[int] = None
    attacks: tuple = ("pgd20_ce", "margin_pgd")
    attack_specs: dict = field(default_factory=dict)
    eval_samples: Optional[int] = None

    def __post_init__(self):
        self.lrs = tuple(dict.fromkeys(float(v) for v in self.lrs))
        self.milestones = tuple(self.milestones)
        self.attacks = tuple(self.attacks)


def _train_head(feats, labels, val_feats, val_labels, num_classes, lr, cfg: ProbeConfig):
    torch.manual_seed(cfg.seed)
    head = build_head(feats.shape[1], num_classes, cfg.hidden)
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    best_acc, best_state, best_epoch = -1.0, copy.deepcopy(head.state_dict()), 0
    for epoch in range(cfg.epochs):
        for g in opt.param_groups:
            g["lr"] = lr * cfg.gamma ** sum(epoch >= m for m in cfg.milestones)
        order = torch.randperm(len(feats), generator=gen)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = F.cross_entropy(head(feats[idx]), labels[idx])
            if not torch.isfinite(loss):
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            acc = (head(val_feats).argmax(1) == val_labels).float().mean().item()
        if acc > best_acc:
            best_acc, best_state, best_epoch = acc, copy.deepcopy(head.state_dict()), epoch + 1
    head.load_state_dict(best_state)
    return head, best_acc, best_epoch


def robust_accuracy(model: nn.Module, ds: LabeledDataset, attacks: Sequence[str],
                    specs: Optional[dict] = None, seed: int = 0, batch_size: int = 256) -> tuple:
    """Clean accuracy and, per attack, accuracy on inputs correct both clean and attacked."""
    specs = specs or {}
    clean_ok, robust_ok = [], {a: [] for a in attacks}
    with evaluating(model):
        for i, b in enumerate(batch_iter(ds, batch_size)):
            with torch.no_grad():
                ok = model(b.pixels).argmax(1) == b.labels
            clean_ok.append(ok)
            for a in attacks:
                spec = specs.get(a)
                if isinstance(spec, dict):
                    spec = AttackSpec(**spec)
                x_adv = eval_attack(model, b.pixels, b.labels, a, spec, seed=seed + i)
                with torch.no_grad():
                    robust_ok[a].append(ok & (model(x_adv).argmax(1) == b.labels))
    sa = 100.0 * torch.cat(clean_ok).float().mean().item()
    ra = {a: 100.0 * torch.cat(v).float().mean().item() for a, v in robust_ok.items()}
    return sa, ra


def eval_subset(ds: LabeledDataset, n: Optional[int], seed: int) -> LabeledDataset:
    if n is None or n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).permutation(len(ds))[:n])
    return ds.subset(idx)


def _probe(model, train, val, test, cfg: ProbeConfig, kind: str):
    if val is None or len(val) == 0:
        raise EvalError("probe selection needs a non-empty validation split")
    backbone = _as_backbone(model)
    tr_f, va_f, te_f = (extract(backbone, d) for d in (train, val, test))
    tr_y, va_y, te_y = _labels(train), _labels(val), _labels(test)
    best = None
    for lr in cfg.lrs:
        head, acc, epoch = _train_head(tr_f, tr_y, va_f, va_y, train.num_classes, lr, cfg)
        if best is None or acc > best[1]:
            best = (head, acc, epoch, lr)
    head, val_acc, epoch, lr = best
    head.eval()
    full = nn.Sequential(backbone, head).eval()
    with torch.no_grad():
        sa = 100.0 * (head(te_f).argmax(1) == te_y).float().mean().item()
    ra = {}
    if cfg.attacks:
        subset = eval_subset(test, cfg.eval_samples, cfg.seed)
        _, ra = robust_accuracy(full, subset, cfg.attacks, cfg.attack_specs, cfg.seed)
    report = EvalReport(SA=sa, RA_by_attack=ra, protocol={
        "probe": kind, "lr": lr, "best_epoch": epoch, "val_acc": 100.0 * val_acc,
        "epochs": cfg.epochs, "hidden": cfg.hidden, "eval_samples": cfg.eval_samples})
    return head, report


def linear_probe(model, train: LabeledDataset, val: LabeledDataset, test: LabeledDataset,
                 cfg: Optional[ProbeConfig] = None) -> tuple:
    """Train a linear head on frozen features per LR candidate; select on val accuracy."""
    cfg = copy.copy(cfg or ProbeConfig())
    cfg.hidden = None
    return _probe(model, train, val, test, cfg, "linear")


def mlp_probe(model, train, val, test, cfg: Optional[ProbeConfig] = None) -> tuple:
    cfg = copy.copy(cfg or ProbeConfig())
    if not cfg.hidden:
        cfg.hidden = _as_backbone(model).feature_dim
    return _probe(model, train, val, test, cfg, "mlp")


# ---------------------------------------------------------------------------
# k-nearest neighbours
# ---------------------------------------------------------------------------

def knn_predict(train_feats: torch.Tensor, train_labels: torch.Tensor, query: torch.Tensor,
                k: int, num_classes: int) -> torch.Tensor:
    """Cosine k-NN majority vote.

    Neighbours are ranked by similarity, ties by training index.  A vote tie
    goes to the tied class whose member ranks nearest.
    """
    if k < 1:
        raise EvalError("k must be at least 1")
    if k > len(train_feats):
        raise EvalError(f"k={k} exceeds the {len(train_feats)} training samples")
    a = F.normalize(train_feats.double(), dim=1)
    q = F.normalize(query.double(), dim=1)
    sims = q @ a.t()
    ranked = torch.argsort(-sims, dim=1, stable=True)[:, :k]
    labels = train_labels[ranked]
    votes = torch.zeros(len(q), num_classes, dtype=torch.long)
    votes.scatter_add_(1, labels, torch.ones_like(labels))
    winner = votes == votes.max(1, keepdim=True).values
    first = winner.gather(1, labels).int().argmax(1)
    return labels.gather(1, first[:, None]).squeeze(1)


def knn_eval(model, train: LabeledDataset, test: LabeledDataset, k: int = 10,
             robust: bool = False, val: Optional[LabeledDataset] = None,
             probe_cfg: Optional[ProbeConfig] = None, seed: int = 0) -> EvalReport:
    """k-NN accuracy in feature space.

    The robust variant attacks a clean-trained linear head with margin PGD and
    classifies the resulting inputs by k-NN.
    """
    backbone = _as_backbone(model)
    tr_f, te_f = extract(backbone, train), extract(backbone, test)
    tr_y, te_y = _labels(train), _labels(test)
    pred = knn_predict(tr_f, tr_y, te_f, k, train.num_classes)
    sa = 100.0 * (pred == te_y).float().mean().item()
    ra = {}
    if robust:
        cfg = copy.copy(probe_cfg or ProbeConfig(seed=seed))
        cfg.attacks = ()
        head, _ = linear_probe(backbone, train, val if val is not None else train, test, cfg)
        full = nn.Sequential(backbone, head).eval()
        ok = []
        for i, b in enumerate(batch_iter(test, 256)):
            x_adv = eval_attack(full, b.pixels, b.labels, "margin_pgd", seed=seed + i)
            with torch.no_grad(), evaluating(backbone):
                f = backbone(x_adv)
            ok.append(knn_predict(tr_f, tr_y, f, k, train.num_classes) == b.labels)
        ra["knn_margin_pgd"] = 100.0 * torch.cat(ok).float().mean().item()
    return EvalReport(SA=sa, RA_by_attack=ra, protocol={"probe": "knn", "k": k})


# ---------------------------------------------------------------------------
# transfer: adversarial full finetuning
# ---------------------------------------------------------------------------

def adversarial_full_finetune(init, train: LabeledDataset, val: LabeledDataset,
                              test: LabeledDataset, cfg=None,
                              probe_cfg: Optional[ProbeConfig] = None) -> tuple:
    """TRADES-finetune the whole network on the target set, then linear-probe it."""
    from .training import Checkpoint, TrainConfig, train_trades

    if isinstance(init, Checkpoint):
        init = init.models.get("student") or init.models.get("teacher") or init.models["model"]
    cfg = cfg or TrainConfig(epochs=25, projector=None)
    tuned = train_trades(cfg, train, init=init)
    model = tuned.models["model"]
    _, report = linear_probe(model.backbone, train, val, test, probe_cfg)
    report.protocol["finetune_epochs"] = cfg.epochs
    return tuned, report
