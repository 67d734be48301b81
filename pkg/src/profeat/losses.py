"""Training objectives.

The distillation defenses are built from three cosine terms, each available
at the feature space and at the projector space:

* ``clean``  -- cos(T(x), S(x)), teacher vs. student on clean inputs
* ``adv_SS`` -- cos(S(x), S(x_adv)), student smoothness
* ``adv_TS`` -- cos(T(x), S(x_adv)), teacher vs. adversarial student

A space contributes ``-mean_i[clean + beta * adv]``; two spaces are mixed as
``lam * feature + (1 - lam) * projector``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .models import ModelTriple

TERMS = ("clean", "adv_SS", "adv_TS")
ZERO_NORM = 1e-12


class LossConfigError(ValueError):
    pass


class CollapseCounter:
    """Counts rows whose norm fell below ``ZERO_NORM`` in a cosine."""

    def __init__(self):
        self.count = 0

    def reset(self) -> int:
        n, self.count = self.count, 0
        return n


collapse_counter = CollapseCounter()


def cosine_rows(a: torch.Tensor, b: torch.Tensor,
                counter: Optional[CollapseCounter] = None) -> torch.Tensor:
    """Row-wise cosine similarity; rows with (near) zero norm score 0."""
    if a.shape != b.shape:
        raise LossConfigError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    a = a.flatten(1)
    b = b.flatten(1)
    na = (a * a).sum(1).clamp_min(ZERO_NORM ** 2).sqrt()
    nb = (b * b).sum(1).clamp_min(ZERO_NORM ** 2).sqrt()
    bad = (na <= ZERO_NORM) | (nb <= ZERO_NORM)
    cos = (a * b).sum(1) / (na * nb)
    if bool(bad.any()):
        (counter or collapse_counter).count += int(bad.sum())
        cos = torch.where(bad, torch.zeros_like(cos), cos)
    return cos


def cosine_rowmean(a, b, counter: Optional[CollapseCounter] = None) -> torch.Tensor:
    return cosine_rows(a, b, counter).mean()


# ---------------------------------------------------------------------------
# representations shared by every defense
# ---------------------------------------------------------------------------

@dataclass
class Reps:
    t_f: torch.Tensor
    s_f: torch.Tensor
    s_f_adv: torch.Tensor
    t_p: Optional[torch.Tensor] = None
    s_p: Optional[torch.Tensor] = None
    s_p_adv: Optional[torch.Tensor] = None

    def space(self, name: str) -> tuple:
        if name == "feature":
            return self.t_f, self.s_f, self.s_f_adv
        if self.s_p is None or self.t_p is None:
            raise LossConfigError("projector-space term requested but a model has no projector")
        return self.t_p, self.s_p, self.s_p_adv


def compute_reps(T: ModelTriple, S: ModelTriple, x: torch.Tensor, x_adv: torch.Tensor,
                 x_teacher: Optional[torch.Tensor] = None, projector: bool = True) -> Reps:
    """Teacher reps (no grad) on ``x_teacher`` and student reps on ``[x; x_adv]``.

    The student sees clean and adversarial inputs in one pass, so the
    normalization statistics of a training-mode student see both.
    """
    if x_adv.shape != x.shape:
        raise LossConfigError("x_adv must have the same shape as x")
    if projector and (T.projector is None or S.projector is None):
        raise LossConfigError("projector-space loss needs a projector on both teacher and student")
    x_teacher = x if x_teacher is None else x_teacher
    with torch.no_grad():
        t_f, t_p = T.represent_both(x_teacher, projector)
    # a shared trainable projector must pass gradient through the teacher side
    if projector and any(p.requires_grad for p in T.projector.parameters()):
        t_p = T.projector(t_f)
    n = x.shape[0]
    s_f_all, s_p_all = S.represent_both(torch.cat([x, x_adv]), projector)
    reps = Reps(t_f=t_f, s_f=s_f_all[:n], s_f_adv=s_f_all[n:])
    if projector:
        reps.t_p, reps.s_p, reps.s_p_adv = t_p, s_p_all[:n], s_p_all[n:]
    return reps


def space_loss(terms, t, s, s_adv, beta: float) -> torch.Tensor:
    total = torch.zeros((), dtype=s.dtype)
    if "clean" in terms:
        total = total + cosine_rows(t, s)
    if "adv_SS" in terms:
        total = total + beta * cosine_rows(s, s_adv)
    if "adv_TS" in terms:
        total = total + beta * cosine_rows(t, s_adv)
    return -total.mean()


# ---------------------------------------------------------------------------
# defense specs and the ablation factory
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DefenseLossSpec:
    feature_terms: frozenset = frozenset({"clean", "adv_SS"})
    projector_terms: frozenset = frozenset({"clean", "adv_SS"})
    beta: float = 8.0
    lam: float = 0.5

    def __post_init__(self):
        f, p = frozenset(self.feature_terms), frozenset(self.projector_terms)
        for t in f | p:
            if t not in TERMS:
                raise LossConfigError(f"unknown defense term {t!r}; choose from {TERMS}")
        if not f and not p:
            raise LossConfigError("defense spec has no terms in either space")
        if self.beta < 0:
            raise LossConfigError("beta must be non-negative")
        if not 0.0 <= self.lam <= 1.0:
            raise LossConfigError("lambda must lie in [0, 1]")
        object.__setattr__(self, "feature_terms", f)
        object.__setattr__(self, "projector_terms", p)

    @property
    def uses_projector(self) -> bool:
        return bool(self.projector_terms)

    def to_dict(self) -> dict:
        return {"feature_terms": sorted(self.feature_terms),
                "projector_terms": sorted(self.projector_terms),
                "beta": self.beta, "lam": self.lam}


def _spec(feat, proj):
    return (frozenset(feat), frozenset(proj))


DEFENSE_ALIASES = {
    "AD1": _spec({"clean", "adv_SS"}, ()),
    "AD2": _spec((), {"clean", "adv_SS"}),
    "AD3": _spec({"clean", "adv_SS"}, {"clean"}),
    "AD4": _spec({"clean", "adv_SS"}, {"adv_SS"}),
    "AD5": _spec({"adv_SS"}, {"clean"}),
    "AD6": _spec({"adv_SS"}, {"clean", "adv_SS"}),
    "AD7": _spec({"clean"}, {"clean", "adv_SS"}),
    "AD8": _spec({"clean", "adv_SS"}, {"clean", "adv_TS"}),
    "AD9": _spec({"clean", "adv_TS"}, {"clean", "adv_TS"}),
    "ours": _spec({"clean", "adv_SS"}, {"clean", "adv_SS"}),
    "deacl": _spec({"clean", "adv_SS"}, ()),
}


def resolve_defense(name_or_spec, beta: float = 8.0, lam: float = 0.5) -> DefenseLossSpec:
    if isinstance(name_or_spec, DefenseLossSpec):
        return name_or_spec
    if isinstance(name_or_spec, dict):
        d = dict(name_or_spec)
        return DefenseLossSpec(frozenset(d.get("feature_terms", ())),
                               frozenset(d.get("projector_terms", ())),
                               d.get("beta", beta), d.get("lam", lam))
    if name_or_spec not in DEFENSE_ALIASES:
        raise LossConfigError(
            f"unknown defense {name_or_spec!r}; allowed: {sorted(DEFENSE_ALIASES)}"
        )
    feat, proj = DEFENSE_ALIASES[name_or_spec]
    return DefenseLossSpec(feat, proj, beta, lam)


class DefenseLoss:
    """Callable ``(T, S, x, x_adv, x_teacher=None) -> scalar`` for a spec."""

    def __init__(self, spec: DefenseLossSpec):
        self.spec = spec

    def from_reps(self, reps: Reps) -> torch.Tensor:
        spec = self.spec
        parts = []
        if spec.feature_terms:
            parts.append(("f", space_loss(spec.feature_terms, *reps.space("feature"), spec.beta)))
        if spec.projector_terms:
            parts.append(("p", space_loss(spec.projector_terms, *reps.space("projector"), spec.beta)))
        if len(parts) == 1:
            return parts[0][1]
        return spec.lam * parts[0][1] + (1 - spec.lam) * parts[1][1]

    def __call__(self, T, S, x, x_adv, x_teacher=None) -> torch.Tensor:
        reps = compute_reps(T, S, x, x_adv, x_teacher, projector=self.spec.uses_projector)
        return self.from_reps(reps)


def make_defense_loss(spec) -> DefenseLoss:
    return DefenseLoss(resolve_defense(spec))


def loss_fp(T, S, x, x_adv, beta: float = 8.0, x_teacher=None) -> torch.Tensor:
    """Distillation + smoothness, both at the projector output."""
    reps = compute_reps(T, S, x, x_adv, x_teacher, projector=True)
    return space_loss(("clean", "adv_SS"), *reps.space("projector"), beta)


def loss_f(T, S, x, x_adv, beta: float = 8.0, x_teacher=None) -> torch.Tensor:
    """Distillation + smoothness at the backbone features (the DeACL objective)."""
    reps = compute_reps(T, S, x, x_adv, x_teacher, projector=False)
    return space_loss(("clean", "adv_SS"), *reps.space("feature"), beta)


def loss_profeat(T, S, x, x_adv, beta: float = 8.0, lam: float = 0.5,
                 x_teacher=None) -> torch.Tensor:
    if not 0.0 <= lam <= 1.0:
        raise LossConfigError("lambda must lie in [0, 1]")
    reps = compute_reps(T, S, x, x_adv, x_teacher, projector=True)
    lf = space_loss(("clean", "adv_SS"), *reps.space("feature"), beta)
    lfp = space_loss(("clean", "adv_SS"), *reps.space("projector"), beta)
    return lam * lf + (1 - lam) * lfp


# ---------------------------------------------------------------------------
# supervised and contrastive objectives
# ---------------------------------------------------------------------------

def kl_rows(logits_p: torch.Tensor, logits_q: torch.Tensor) -> torch.Tensor:
    """Per-row KL(softmax(p) || softmax(q)), computed from log-softmax."""
    log_p = F.log_softmax(logits_p, dim=1)
    log_q = F.log_softmax(logits_q, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(1)


def loss_trades(logits_clean, logits_adv, labels, beta: float = 6.0) -> torch.Tensor:
    ce = F.cross_entropy(logits_clean, labels)
    return ce + beta * kl_rows(logits_clean, logits_adv).mean()


def loss_ntxent(z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """SimCLR loss over the 2N views; the positive of view i is its pair."""
    n = z1.shape[0]
    if n < 2:
        raise LossConfigError("NT-Xent needs at least two samples (no negatives otherwise)")
    if temperature <= 0:
        raise LossConfigError("temperature must be positive")
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    sim = z @ z.t() / temperature
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(n)])
    return F.cross_entropy(sim, targets)
