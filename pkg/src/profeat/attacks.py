"""l-infinity PGD over pluggable objectives.

Objectives return one value per sample; PGD ascends their sum, which for
per-sample-independent objectives (models in inference mode) is the same as
ascending each sample's value.  Restarts are resolved per sample by keeping
the candidate with the highest final objective.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugPolicy, augment
from .data import LabeledDataset, batch_iter
from .losses import cosine_rows, kl_rows
from .models import ModelTriple


class AttackError(RuntimeError):
    pass


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 5
    restarts: int = 1
    init: str = "uniform_ball"

    def __post_init__(self):
        if self.epsilon < 0:
            raise AttackConfigError("epsilon must be non-negative")
        if self.steps < 0:
            raise AttackConfigError("steps must be non-negative")
        if self.steps > 0 and self.step_size <= 0:
            raise AttackConfigError("step_size must be positive when steps > 0")
        if self.restarts < 1:
            raise AttackConfigError("restarts must be at least 1")
        if self.init not in ("zero", "uniform_ball"):
            raise AttackConfigError(f"init must be zero or uniform_ball, got {self.init!r}")


PGD20 = AttackSpec(8 / 255, 2 / 255, 20, 1, "uniform_ball")
MARGIN_PGD = AttackSpec(8 / 255, 2 / 255, 100, 2, "uniform_ball")
TRAIN_PGD5 = AttackSpec(8 / 255, 2 / 255, 5, 1, "uniform_ball")


@dataclass
class PGDTrace:
    """Optional record of a PGD run, for diagnostics and tests."""

    keep_iterates: bool = False
    max_dev: list = field(default_factory=list)       # per step: max |x_adv - x|
    min_pixel: list = field(default_factory=list)
    max_pixel: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    candidates: list = field(default_factory=list)    # (x_adv, values) per restart
    best_values: Optional[torch.Tensor] = None


@contextlib.contextmanager
def evaluating(*models):
    """Put models in inference mode, restoring their previous mode on exit."""
    modes = [m.training for m in models]
    for m in models:
        m.eval()
    try:
        yield
    finally:
        for m, mode in zip(models, modes):
            m.train(mode)


def _generator(seed: int, restart: int) -> torch.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, restart])
    return torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0] >> 1))


def _record(trace, x_adv, x):
    if trace is None:
        return
    trace.max_dev.append(float((x_adv.double() - x.double()).abs().max()))
    trace.min_pixel.append(float(x_adv.min()))
    trace.max_pixel.append(float(x_adv.max()))
    if trace.keep_iterates:
        trace.iterates.append(x_adv.detach().clone())


def _box(x: torch.Tensor, eps: float) -> tuple:
    """Per-pixel bounds of the eps-ball intersected with [0, 1].

    The bounds are computed in double precision and rounded towards ``x``
    so that containment holds exactly in the working dtype.
    """
    xd = x.double()
    lo_d, hi_d = (xd - eps).clamp(min=0.0), (xd + eps).clamp(max=1.0)
    lo, hi = lo_d.to(x.dtype), hi_d.to(x.dtype)
    lo = torch.where(lo.double() < lo_d, torch.nextafter(lo, x), lo)
    hi = torch.where(hi.double() > hi_d, torch.nextafter(hi, x), hi)
    return lo, hi


def pgd(objective: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
        spec: AttackSpec = TRAIN_PGD5, seed: int = 0,
        trace: Optional[PGDTrace] = None) -> torch.Tensor:
    """Maximize ``objective`` over the intersection of the eps-ball and [0, 1]."""
    x = x.detach()
    if spec.epsilon == 0:
        return x.clone()
    lo, hi = _box(x, spec.epsilon)
    best = best_val = None
    for r in range(spec.restarts):
        if spec.init == "uniform_ball":
            noise = torch.rand(x.shape, generator=_generator(seed, r), dtype=x.dtype)
            x_adv = torch.maximum(torch.minimum(x + (2 * noise - 1) * spec.epsilon, hi), lo)
        else:
            x_adv = x.clone()
        _record(trace, x_adv, x)
        for step in range(spec.steps):
            x_adv.requires_grad_(True)
            with torch.enable_grad():
                value = objective(x_adv)
                grad, = torch.autograd.grad(value.sum(), x_adv)
            if not torch.isfinite(grad).all():
                raise AttackError(f"non-finite gradient at restart {r}, step {step}")
            x_adv = x_adv.detach() + spec.step_size * grad.sign()
            x_adv = torch.maximum(torch.minimum(x_adv, hi), lo)
            _record(trace, x_adv, x)
        with torch.no_grad():
            val = objective(x_adv).detach()
        if trace is not None:
            trace.candidates.append((x_adv.clone(), val.clone()))
        if best is None:
            best, best_val = x_adv, val
        else:
            better = val > best_val
            best = torch.where(better.view(-1, *([1] * (x.ndim - 1))), x_adv, best)
            best_val = torch.where(better, val, best_val)
    if trace is not None:
        trace.best_values = best_val
    return best


# ---------------------------------------------------------------------------
# self-supervised training attacks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdversarialObjective:
    """Cosine terms to *minimize* at each space.

    ``SS`` pairs the student's clean and adversarial representations, ``TS``
    the teacher's clean and the student's adversarial ones.  Supervised
    objectives (``max_CE``, ``max_KL``, ``max_margin``) go in ``supervised``.
    """

    feature_terms: tuple = ()
    projector_terms: tuple = ()
    feature_weight: float = 1.0
    projector_weight: float = 1.0
    supervised: Optional[str] = None

    def __post_init__(self):
        for t in tuple(self.feature_terms) + tuple(self.projector_terms):
            if t not in ("SS", "TS"):
                raise AttackConfigError(f"unknown attack term {t!r}; choose SS or TS")
        if self.supervised not in (None, "max_CE", "max_KL", "max_margin"):
            raise AttackConfigError(f"unknown supervised objective {self.supervised!r}")
        if not (self.feature_terms or self.projector_terms or self.supervised):
            raise AttackConfigError("attack objective has no terms")
        object.__setattr__(self, "feature_terms", tuple(self.feature_terms))
        object.__setattr__(self, "projector_terms", tuple(self.projector_terms))

    @property
    def uses_projector(self) -> bool:
        return bool(self.projector_terms)

    def to_dict(self) -> dict:
        return {"feature_terms": list(self.feature_terms),
                "projector_terms": list(self.projector_terms),
                "feature_weight": self.feature_weight,
                "projector_weight": self.projector_weight,
                "supervised": self.supervised}


ATTACK_ALIASES = {
    "AT1": AdversarialObjective(("TS",), ("TS",)),
    "AT2": AdversarialObjective(("SS",), ("SS",)),
    "AT3": AdversarialObjective(("TS",), ("SS",)),
    "AT4": AdversarialObjective(("SS",), ()),
    "AT5": AdversarialObjective((), ("SS",)),
    "AT6": AdversarialObjective(("TS",), ()),
    "AT7": AdversarialObjective((), ("TS",)),
    "ours": AdversarialObjective(("SS",), ("TS",)),
    "deacl": AdversarialObjective(("SS",), ()),
    # both terms of the proposed attack placed at the features, for projector-free students
    "ours_feature": AdversarialObjective(("SS", "TS"), ()),
}


def resolve_attack_objective(name_or_spec) -> AdversarialObjective:
    if isinstance(name_or_spec, AdversarialObjective):
        return name_or_spec
    if isinstance(name_or_spec, dict):
        d = dict(name_or_spec)
        return AdversarialObjective(tuple(d.get("feature_terms", ())),
                                    tuple(d.get("projector_terms", ())),
                                    d.get("feature_weight", 1.0), d.get("projector_weight", 1.0),
                                    d.get("supervised"))
    if name_or_spec not in ATTACK_ALIASES:
        raise AttackConfigError(
            f"unknown attack {name_or_spec!r}; allowed: {sorted(ATTACK_ALIASES)}"
        )
    return ATTACK_ALIASES[name_or_spec]


def make_attack_objective(spec, T: ModelTriple, S: ModelTriple, x_clean: torch.Tensor,
                          x_teacher: Optional[torch.Tensor] = None) -> Callable:
    """Per-sample objective to maximize: minus the weighted cosine terms.

    Clean-side representations are computed once, without gradient.
    """
    spec = resolve_attack_objective(spec)
    if spec.supervised:
        raise AttackConfigError("use make_supervised_objective for supervised attacks")
    if spec.uses_projector and (S.projector is None or T.projector is None):
        raise AttackConfigError("attack uses the projector space but a model has no projector")
    x_teacher = x_clean if x_teacher is None else x_teacher
    with torch.no_grad():
        s_f, s_p = S.represent_both(x_clean, spec.uses_projector)
        t_f, t_p = T.represent_both(x_teacher, spec.uses_projector)
    refs = {("feature", "SS"): s_f, ("feature", "TS"): t_f,
            ("projector", "SS"): s_p, ("projector", "TS"): t_p}

    def objective(x_adv):
        f_adv, p_adv = S.represent_both(x_adv, spec.uses_projector)
        total = torch.zeros(x_adv.shape[0], dtype=f_adv.dtype)
        for term in spec.feature_terms:
            total = total + spec.feature_weight * cosine_rows(refs["feature", term], f_adv)
        for term in spec.projector_terms:
            total = total + spec.projector_weight * cosine_rows(refs["projector", term], p_adv)
        return -total

    return objective


# ---------------------------------------------------------------------------
# supervised attacks
# ---------------------------------------------------------------------------

def margin_rows(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """max_{j != y} z_j - z_y; positive iff misclassified."""
    true = logits.gather(1, labels[:, None]).squeeze(1)
    other = logits.scatter(1, labels[:, None], float("-inf")).amax(1)
    return other - true


def make_supervised_objective(kind: str, model, x: torch.Tensor,
                              labels: Optional[torch.Tensor] = None) -> Callable:
    if kind == "max_CE":
        return lambda xa: F.cross_entropy(model(xa), labels, reduction="none")
    if kind == "max_margin":
        return lambda xa: margin_rows(model(xa), labels)
    if kind == "max_KL":
        with torch.no_grad():
            clean = model(x)
        return lambda xa: kl_rows(clean, model(xa))
    raise AttackConfigError(f"unknown supervised objective {kind!r}")


EVAL_ATTACKS = {"pgd20_ce": ("max_CE", PGD20), "margin_pgd": ("max_margin", MARGIN_PGD)}


def eval_attack(model, x: torch.Tensor, labels: torch.Tensor, kind: str = "pgd20_ce",
                spec: Optional[AttackSpec] = None, seed: int = 0) -> torch.Tensor:
    if labels is None:
        raise AttackConfigError("evaluation attacks need labels")
    if kind not in EVAL_ATTACKS:
        raise AttackConfigError(f"unknown eval attack {kind!r}; choose from {list(EVAL_ATTACKS)}")
    objective_kind, default = EVAL_ATTACKS[kind]
    with evaluating(model):
        objective = make_supervised_objective(objective_kind, model, x, labels)
        return pgd(objective, x, spec or default, seed)


# ---------------------------------------------------------------------------
# restart diversity
# ---------------------------------------------------------------------------

def restart_diversity(model, dataset: LabeledDataset, n_restarts: int = 5,
                      aug_mode: str = "none", spec: AttackSpec = TRAIN_PGD5, seed: int = 0,
                      batch_size: int = 256, policies=None) -> dict:
    """Robust accuracy under the union of ``n_restarts`` PGD runs.

    Restart ``r`` re-augments the inputs (``weak``/``strong``) with seed
    ``seed + r`` before attacking; a sample stays robust only if it survives
    every restart so far.
    """
    if n_restarts < 1:
        raise AttackConfigError("n_restarts must be at least 1")
    if aug_mode not in ("none", "weak", "strong"):
        raise AttackConfigError(f"aug_mode must be none, weak or strong, got {aug_mode!r}")
    policy = None
    if aug_mode == "weak":
        policy = (policies or {}).get("weak", AugPolicy.weak())
    elif aug_mode == "strong":
        policy = (policies or {}).get("strong", AugPolicy.strong())
    survived = torch.ones(len(dataset), dtype=torch.bool)
    single, curve = [], []
    single_spec = AttackSpec(spec.epsilon, spec.step_size, spec.steps, 1, spec.init)
    with evaluating(model):
        for r in range(n_restarts):
            correct = []
            for b in batch_iter(dataset, batch_size):
                if policy is not None:
                    b = augment(b, policy, seed + r)
                objective = make_supervised_objective("max_CE", model, b.pixels, b.labels)
                x_adv = pgd(objective, b.pixels, single_spec, seed=seed * 7919 + r)
                with torch.no_grad():
                    correct.append(model(x_adv).argmax(1) == b.labels)
            correct = torch.cat(correct)
            survived &= correct
            single.append(100.0 * correct.float().mean().item())
            curve.append(100.0 * survived.float().mean().item())
    return {"aug_mode": aug_mode, "n_restarts": n_restarts, "single_ra": single,
            "union_ra": curve, "drop": curve[0] - curve[-1]}
