"""Experiment configuration, ablation grids and the teacher -> student -> eval
pipeline behind the command line.

A config is a YAML mapping with the sections ``data``, ``teacher``,
``student``, ``attack``, ``defense``, ``eval`` (plus ``name``, ``seed``,
``out`` and an optional ``grid``).  :func:`resolve_config` validates it and
materializes every default, so dumping a resolved config and loading it again
reproduces the same run.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from .attacks import AttackSpec, resolve_attack_objective
from .augment import resolve_pairing
from .data import LabeledDataset, ToySpec, balanced_split, data_root, load_cifar, make_toy_dataset, \
    write_metadata
from .evaluation import (EvalReport, ProbeConfig, adversarial_full_finetune, alignment_report,
                         collapse_metrics, eval_subset, extract, format_table, knn_eval, linear_probe, mlp_probe,
                         read_reports, robust_accuracy, write_reports)
from .losses import resolve_defense
from .models import ProjectorConfig
from .training import Checkpoint, TrainConfig, config_hash, train_profeat, train_simclr, train_trades

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# projector arrangements (frozen/trainable, random/pretrained, teacher side)
# ---------------------------------------------------------------------------

PROJECTOR_ALIASES = {
    "AP1": None,
    "AP2": {"init": "random", "frozen": False, "teacher_projector": False},
    "AP3": {"init": "pretrained", "frozen": True, "teacher_projector": False},
    "AP4": {"init": "pretrained", "frozen": False, "teacher_projector": False},
    "AP5": {"init": "random", "frozen": False, "shared_with_teacher": True},
    "AP6": {"init": "pretrained", "frozen": False, "shared_with_teacher": True},
    "AP7": {"init": "pretrained", "frozen": False, "teacher_projector": True},
    "ours": {},
}

METHODS = ("profeat", "trades")
TEACHER_EXCLUDE = ("seed", "defense", "beta", "lam", "attack", "attack_spec", "attack_on_view")
STUDENT_EXCLUDE = ("seed", "defense", "beta", "lam", "attack", "attack_spec", "attack_on_view")
EVAL_KEYS = ("probe", "mlp", "knn", "k", "robust_knn", "aff", "aff_epochs")


def resolve_projector(value) -> Optional[ProjectorConfig]:
    if value is None or isinstance(value, ProjectorConfig):
        return value
    if isinstance(value, str):
        if value not in PROJECTOR_ALIASES:
            raise ConfigError(f"student.projector: unknown alias {value!r}; "
                              f"allowed: {sorted(PROJECTOR_ALIASES)}")
        preset = PROJECTOR_ALIASES[value]
        return None if preset is None else ProjectorConfig(**preset)
    if isinstance(value, dict):
        known = {f.name for f in fields(ProjectorConfig)}
        bad = set(value) - known
        if bad:
            raise ConfigError(f"projector: unknown keys {sorted(bad)}; allowed: {sorted(known)}")
        return ProjectorConfig(**value)
    raise ConfigError(f"projector must be an alias, a mapping or null, got {value!r}")


# ---------------------------------------------------------------------------
# config sections
# ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    source: str = "toy"
    toy: dict = field(default_factory=lambda: asdict(ToySpec(margin=2.0)))
    test_samples_per_class: int = 100
    val_total: int = 100
    path: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("toy", "cifar10", "cifar100"):
            raise ConfigError(f"data.source {self.source!r}; allowed: toy, cifar10, cifar100")
        known = {f.name for f in fields(ToySpec)}
        bad = set(self.toy) - known
        if bad:
            raise ConfigError(f"data.toy: unknown keys {sorted(bad)}; allowed: {sorted(known)}")
        self.toy = asdict(ToySpec(**self.toy))


@dataclass
class EvalConfig:
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    mlp: bool = False
    knn: bool = False
    k: int = 10
    robust_knn: bool = False
    aff: bool = False
    aff_epochs: int = 25


@dataclass
class ExperimentConfig:
    name: str = "profeat"
    seed: int = 0
    out: str = "runs/profeat"
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=100, pairing="independent_strong", projector=ProjectorConfig(), lr=0.5))
    teacher_checkpoint: Optional[str] = None
    method: str = "profeat"
    student: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    grid: Optional[dict] = None

    def to_dict(self) -> dict:
        t = self.teacher.to_dict()
        s = self.student.to_dict()
        attack = s["attack"]
        spec = s["attack_spec"]
        return _plain({
            "name": self.name,
            "seed": self.seed,
            "out": self.out,
            "data": asdict(self.data),
            "teacher": {"checkpoint": self.teacher_checkpoint,
                        **{k: v for k, v in t.items() if k not in TEACHER_EXCLUDE}},
            "student": {"method": self.method,
                        **{k: v for k, v in s.items() if k not in STUDENT_EXCLUDE}},
            "attack": {"objective": attack, **spec, "on_view": s["attack_on_view"]},
            "defense": {"spec": s["defense"], "beta": s["beta"], "lam": s["lam"]},
            "eval": {**{k: getattr(self.eval, k) for k in EVAL_KEYS if k != "probe"},
                     "probe": asdict(self.eval.probe)},
            "grid": self.grid,
        })

    def hash(self, stage: str = "eval") -> str:
        """Hash of everything a stage depends on (teacher < student < eval)."""
        d = self.to_dict()
        keep = {"teacher": ("seed", "data", "teacher"),
                "student": ("seed", "data", "teacher", "student", "attack", "defense"),
                "eval": ("seed", "data", "teacher", "student", "attack", "defense", "eval")}[stage]
        return config_hash({k: d[k] for k in keep})


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


TOP_KEYS = ("name", "seed", "out", "data", "teacher", "student", "attack", "defense", "eval", "grid")


def _check_keys(section: str, d: dict, allowed) -> None:
    bad = set(d) - set(allowed)
    if bad:
        raise ConfigError(f"{section}: unknown keys {sorted(bad)}; allowed: {sorted(allowed)}")


def _train_config(section: str, d: dict, seed: int, extra: dict) -> TrainConfig:
    d = dict(d)
    allowed = {f.name for f in fields(TrainConfig)} - {"seed"}
    _check_keys(section, d, allowed)
    if "projector" in d:
        d["projector"] = resolve_projector(d["projector"])
    if "milestones" in d:
        d["milestones"] = tuple(d["milestones"])
    defaults = TrainConfig()
    for key in ("weak_policy", "strong_policy"):
        if isinstance(d.get(key), dict):     # partial mappings patch the default policy
            d[key] = {**asdict(getattr(defaults, key)), **d[key]}
    d.update(extra)
    d["seed"] = seed
    try:
        resolve_pairing(d.get("pairing", "ours"))
        return TrainConfig.from_dict(d)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{section}: {e}") from None


def resolve_config(raw: Optional[dict]) -> ExperimentConfig:
    """Validate a raw config mapping and fill in every default."""
    raw = copy.deepcopy(raw or {})
    _check_keys("config", raw, TOP_KEYS)
    seed = int(raw.get("seed", 0))
    cfg = ExperimentConfig(seed=seed)
    cfg.name = str(raw.get("name", cfg.name))
    cfg.out = str(raw.get("out", cfg.out))

    data = dict(raw.get("data") or {})
    _check_keys("data", data, {f.name for f in fields(DataConfig)})
    try:
        cfg.data = DataConfig(**data)
    except TypeError as e:
        raise ConfigError(f"data: {e}") from None

    teacher = dict(raw.get("teacher") or {})
    cfg.teacher_checkpoint = teacher.pop("checkpoint", None)
    base_t = {k: v for k, v in cfg.teacher.to_dict().items() if k not in TEACHER_EXCLUDE}
    base_t.update(teacher)
    cfg.teacher = _train_config("teacher", base_t, seed, {})

    student = dict(raw.get("student") or {})
    cfg.method = student.pop("method", "profeat")
    if cfg.method not in METHODS:
        raise ConfigError(f"student.method {cfg.method!r}; allowed: {list(METHODS)}")

    attack = dict(raw.get("attack") or {})
    spec_keys = {f.name for f in fields(AttackSpec)}
    _check_keys("attack", attack, spec_keys | {"objective", "on_view"})
    objective = attack.pop("objective", "ours" if cfg.method == "profeat" else "max_KL")
    on_view = bool(attack.pop("on_view", True))
    if cfg.method == "trades":
        attack.setdefault("steps", 10)
    else:
        try:
            resolve_attack_objective(objective)
        except ValueError as e:
            raise ConfigError(f"attack.objective: {e}") from None
    try:
        attack_spec = AttackSpec(**attack)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"attack: {e}") from None

    defense = dict(raw.get("defense") or {})
    _check_keys("defense", defense, {"spec", "beta", "lam"})
    dspec = defense.get("spec", "ours")
    beta = float(defense.get("beta", 6.0 if cfg.method == "trades" else 8.0))
    lam = float(defense.get("lam", 0.5))
    if cfg.method == "profeat":
        try:
            resolve_defense(dspec, beta, lam)
        except ValueError as e:
            raise ConfigError(f"defense.spec: {e}") from None

    cfg.student = _train_config("student", student, seed, {
        "attack": objective, "attack_spec": attack_spec, "attack_on_view": on_view,
        "defense": dspec, "beta": beta, "lam": lam})
    if cfg.method == "profeat":
        resolve_pairing(cfg.student.pairing)

    ev = dict(raw.get("eval") or {})
    _check_keys("eval", ev, EVAL_KEYS)
    probe = dict(ev.pop("probe", {}) or {})
    _check_keys("eval.probe", probe, {f.name for f in fields(ProbeConfig)})
    probe["seed"] = seed
    for key in ("lrs", "milestones", "attacks"):
        if key in probe:
            probe[key] = tuple(probe[key])
    cfg.eval = EvalConfig(probe=ProbeConfig(**probe), **ev)

    cfg.grid = raw.get("grid")
    if cfg.grid is not None:
        _check_keys("grid", cfg.grid, {"name", "cells"})
    return cfg


def load_config(path) -> dict:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def deep_merge(base: dict, patch: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (patch or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# ---------------------------------------------------------------------------
# ablation grids; each cell is a patch over the resolved base config
# ---------------------------------------------------------------------------

def _components(projector: bool, augs: bool, attack: bool, defense: Optional[str] = None) -> dict:
    return {
        "student": {"projector": "ours" if projector else None,
                    "pairing": "ours" if augs else "common_weak"},
        "defense": {"spec": defense or ("ours" if projector else "AD1")},
        "attack": {"objective": ("ours" if projector else "ours_feature") if attack else "AT4"},
    }


def _feature_width(base: dict) -> int:
    return int(base["teacher"]["backbone"].get("feature_dim", 64))


def _projector_cells(base: dict) -> list:
    d = _feature_width(base)
    teacher = {"teacher": {"projector": {"depth": "mlp2", "widths": [d, d, d]}}}
    cells = []
    for alias in ("AP1", "AP2", "AP3", "AP4", "AP5", "AP6", "AP7", "ours"):
        patch = deep_merge(teacher, {"student": {"projector": alias}})
        if alias == "AP1":
            patch = deep_merge(patch, {"defense": {"spec": "AD1"},
                                       "attack": {"objective": "ours_feature"}})
        cells.append((alias, patch))
    return cells


GRID_AXES = {"beta": ("defense", "beta"), "lambda": ("defense", "lam"),
             "steps": ("attack", "steps"), "teacher_epochs": ("teacher", "epochs")}
MONOTONE = {"beta": ("down", "up")}


def grid_cells(name: str, base: dict) -> list:
    """``[(row alias, config patch), ...]`` for a registered grid."""
    if name == "beta":
        return [(f"beta={b:g}", {"defense": {"beta": b}}) for b in (1, 2, 4, 8, 12)]
    if name == "lambda":
        return [(f"lambda={v:g}", {"defense": {"lam": v}}) for v in (0, 0.25, 0.5, 0.75, 1)]
    if name == "steps":
        return [("steps=2", {"attack": {"steps": 2, "step_size": 4 / 255}}),
                ("steps=5", {"attack": {"steps": 5, "step_size": 2 / 255}})]
    if name == "teacher_epochs":
        e = int(base["teacher"]["epochs"])
        return [(f"teacher_epochs={v}", {"teacher": {"epochs": v}})
                for v in sorted({max(e // 4, 1), max(e // 2, 1), e})]
    if name == "projector":
        return _projector_cells(base)
    if name == "augment":
        return [(a, {"student": {"pairing": a}}) for a in ("AG1", "AG2", "AG3", "AG4", "AG5", "ours")]
    if name == "attack":
        return [(a, {"attack": {"objective": a}})
                for a in ("AT1", "AT2", "AT3", "AT4", "AT5", "AT6", "AT7", "ours")]
    if name == "defense":
        return [(a, {"defense": {"spec": a}}) for a in
                ("AD1", "AD2", "AD3", "AD4", "AD5", "AD6", "AD7", "AD8", "AD9", "ours")]
    if name == "components":
        rows = {"E1": (0, 0, 0), "E2": (1, 0, 0), "E3": (0, 1, 0), "E4": (0, 0, 1), "E5": (0, 1, 1),
                "E6": (1, 0, 1), "E7": (1, 1, 0), "E9": (1, 1, 1)}
        cells = [(k, _components(*v)) for k, v in rows.items()]
        cells.insert(7, ("E8", _components(1, 1, 1, "AD2")))
        return cells
    if name == "baselines":
        return [("deacl", _components(0, 0, 0)), ("ours", _components(1, 1, 1)),
                ("trades", {"student": {"method": "trades", "projector": None},
                            "attack": {"objective": "max_KL", "steps": 10}, "defense": {"beta": 6.0}})]
    raise ConfigError(f"unknown grid {name!r}; allowed: {sorted(GRIDS)}")


GRIDS = ("beta", "lambda", "steps", "teacher_epochs", "projector", "augment", "attack", "defense",
         "components", "baselines")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> tuple:
    """``(train, val, test)`` for the configured source; val is a balanced hold-out."""
    d = cfg.data
    if d.source == "toy":
        spec = ToySpec(**d.toy)
        full = make_toy_dataset(spec, cfg.seed, "toy-train")
        test_spec = ToySpec(**{**d.toy, "samples_per_class": d.test_samples_per_class})
        test = make_toy_dataset(test_spec, cfg.seed + 100_003, "toy-test")
    else:
        root = Path(d.path) if d.path else data_root()
        if root is None:
            raise ConfigError("data.path is unset and PROFEAT_DATA is not defined")
        full = load_cifar(root, d.source, "train")
        test = load_cifar(root, d.source, "test")
    train, val = balanced_split(full, d.val_total, cfg.seed)
    return train, val, test


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=str) + "\n")


class Stage:
    """Checkpoint file for one stage, named by the stage hash."""

    def __init__(self, directory: Path, stage: str, digest: str):
        self.path = directory / f"{stage}-{digest}.ckpt"
        self.partial = directory / f"{stage}-{digest}.partial.ckpt"
        self.metrics = directory / f"{stage}-metrics.jsonl"
        self.digest = digest

    def done(self) -> Optional[Checkpoint]:
        return Checkpoint.load(self.path) if self.path.exists() else None

    def resume_point(self, resume: bool) -> Optional[Checkpoint]:
        if resume and self.partial.exists():
            return Checkpoint.load(self.partial)
        return None

    def on_epoch(self, seed: int):
        def save(ckpt: Checkpoint):
            ckpt.save(self.partial)
            _append_jsonl(self.metrics, {"stage_hash": self.digest, "seed": seed,
                                         "config_hash": ckpt.config_hash, **ckpt.history[-1]})
        return save

    def finish(self, ckpt: Checkpoint) -> Checkpoint:
        ckpt.save(self.path)
        if self.partial.exists():
            self.partial.unlink()
        return ckpt


def run_teacher(cfg: ExperimentConfig, train: LabeledDataset, directory: Path,
                resume: bool = False) -> Checkpoint:
    if cfg.teacher_checkpoint:
        return Checkpoint.load(cfg.teacher_checkpoint)
    directory.mkdir(parents=True, exist_ok=True)
    stage = Stage(directory, "teacher", cfg.hash("teacher"))
    done = stage.done()
    if done is not None:
        log.info("teacher checkpoint %s reused", stage.path)
        return done
    ckpt = train_simclr(cfg.teacher, train, resume=stage.resume_point(resume),
                        on_epoch=stage.on_epoch(cfg.seed))
    return stage.finish(ckpt)


def run_student(cfg: ExperimentConfig, teacher: Checkpoint, train: LabeledDataset,
                directory: Path, resume: bool = False) -> Checkpoint:
    directory.mkdir(parents=True, exist_ok=True)
    stage = Stage(directory, "student", cfg.hash("student"))
    done = stage.done()
    if done is not None:
        log.info("student checkpoint %s reused", stage.path)
        return done
    start = stage.resume_point(resume)
    if cfg.method == "trades":
        ckpt = train_trades(cfg.student, train, resume=start, on_epoch=stage.on_epoch(cfg.seed))
    else:
        ckpt = train_profeat(cfg.student, teacher, train, resume=start,
                             on_epoch=stage.on_epoch(cfg.seed))
    return stage.finish(ckpt)


def evaluate(cfg: ExperimentConfig, ckpt: Checkpoint, data: tuple, run: str = "") -> EvalReport:
    train, val, test = data
    probe = cfg.eval.probe
    models = ckpt.models
    if ckpt.kind == "trades":
        model = models["model"]
        sub = eval_subset(test, probe.eval_samples, probe.seed)
        sa, _ = robust_accuracy(model, test, ())
        _, ra = robust_accuracy(model, sub, probe.attacks, probe.attack_specs, probe.seed)
        report = EvalReport(SA=sa, RA_by_attack=ra, protocol={"probe": "end_to_end"})
        backbone, T, S = model.backbone, None, None
    else:
        S = models.get("student") or models["teacher"]
        T = models.get("teacher") if "student" in models else None
        _, report = linear_probe(S, train, val, test, probe)
        backbone = S.backbone
    if T is not None and S is not None:
        report.alignment = alignment_report(T, S, test)
    feats = extract(backbone, test)
    report.collapse = {"feature": collapse_metrics(feats)}
    if S is not None and S.projector is not None:
        with torch.no_grad():
            S.eval()
            report.collapse["projector"] = collapse_metrics(S.projector(feats))
    report.collapse["training_collapse"] = bool(ckpt.collapse_detected)
    extra = {}
    if cfg.eval.mlp:
        _, r = mlp_probe(backbone, train, val, test, probe)
        extra["mlp"] = {"SA": r.SA, "RA_by_attack": r.RA_by_attack}
    if cfg.eval.knn or cfg.eval.robust_knn:
        r = knn_eval(backbone, train, test, cfg.eval.k, robust=cfg.eval.robust_knn, val=val,
                     probe_cfg=probe, seed=cfg.seed)
        extra["knn"] = {"SA": r.SA, "RA_by_attack": r.RA_by_attack}
    if cfg.eval.aff:
        aff_cfg = TrainConfig(**{**{f.name: getattr(cfg.student, f.name) for f in fields(TrainConfig)},
                                 "epochs": cfg.eval.aff_epochs, "projector": None, "beta": 6.0,
                                 "attack_spec": AttackSpec(steps=10)})
        _, r = adversarial_full_finetune(ckpt, train, val, test, aff_cfg, probe)
        extra["aff"] = {"SA": r.SA, "RA_by_attack": r.RA_by_attack}
    report.protocol.update(extra)
    report.run = run or cfg.name
    report.config_hash = cfg.hash("eval")
    report.seed = cfg.seed
    return report


def run_experiment(cfg: ExperimentConfig, out: Optional[Path] = None, resume: bool = False,
                   stages=("teacher", "student", "eval"), teacher_dir: Optional[Path] = None,
                   run: str = "") -> dict:
    """Run (or re-emit) the requested stages; returns the produced artifacts."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    data = load_data(cfg)
    write_metadata(data[0], out / "data.json")
    result = {}
    teacher = None
    if cfg.method == "profeat" or tuple(stages) == ("teacher",):
        teacher = run_teacher(cfg, data[0], teacher_dir or out, resume)
        result["teacher"] = teacher
    if "student" in stages or "eval" in stages:
        student = run_student(cfg, teacher, data[0], out, resume)
        result["student"] = student
    if "eval" in stages:
        report_path = out / "report.jsonl"
        digest = cfg.hash("eval")
        cached = [r for r in read_reports(report_path) if r.config_hash == digest] \
            if report_path.exists() else []
        if cached:
            report = cached[-1]
        else:
            report = evaluate(cfg, result["student"], data, run)
            write_reports(report_path, [report])
        (out / "report.txt").write_text(format_report_table([report]) + "\n")
        result["report"] = report
    return result


# ---------------------------------------------------------------------------
# grids and reports
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("grid", "row", "config_hash", "seed", "SA", "RA_pgd20_ce", "RA_margin_pgd",
               "masking_gap", "cos_feature", "cos_projector", "collapsed", "SA_trend", "RA_trend",
               "status")


def report_row(report: EvalReport) -> dict:
    ra = report.RA_by_attack
    collapse = report.collapse or {}
    collapsed = bool(collapse.get("training_collapse")) or any(
        v.get("collapsed") for v in collapse.values() if isinstance(v, dict))
    return {"row": report.run, "config_hash": report.config_hash, "seed": report.seed,
            "SA": report.SA, "RA_pgd20_ce": ra.get("pgd20_ce"), "RA_margin_pgd": ra.get("margin_pgd"),
            "masking_gap": report.masking_gap,
            "cos_feature": (report.alignment or {}).get("cos_feature"),
            "cos_projector": (report.alignment or {}).get("cos_projector"),
            "collapsed": collapsed}


def format_report_table(reports) -> str:
    rows = [report_row(r) for r in reports]
    return format_table(rows, ("row", "seed", "SA", "RA_pgd20_ce", "RA_margin_pgd", "masking_gap",
                               "cos_feature", "cos_projector", "collapsed"))


def _flag_trends(grid: str, rows: list) -> None:
    if grid not in MONOTONE:
        return
    sa_dir, ra_dir = MONOTONE[grid]
    prev = None
    for row in rows:
        if prev is not None and row.get("SA") is not None and prev.get("SA") is not None:
            d_sa, d_ra = row["SA"] - prev["SA"], (row["RA_pgd20_ce"] or 0) - (prev["RA_pgd20_ce"] or 0)
            row["SA_trend"] = "ok" if (d_sa <= 0) == (sa_dir == "down") or d_sa == 0 else "break"
            row["RA_trend"] = "ok" if (d_ra >= 0) == (ra_dir == "up") or d_ra == 0 else "break"
        if row.get("SA") is not None:
            prev = row


def run_grid(cfg: ExperimentConfig, grid: Optional[str] = None, out: Optional[Path] = None,
             resume: bool = False) -> tuple:
    """Run every cell of a grid with one shared teacher; returns ``(rows, n_failed)``."""
    out = Path(out or cfg.out)
    if grid is None and cfg.grid:
        grid = cfg.grid.get("name")
    base = cfg.to_dict()
    if cfg.grid and cfg.grid.get("cells") is not None:
        cells = [(c["row"], c.get("patch", {})) for c in cfg.grid["cells"]]
    elif grid:
        cells = grid_cells(grid, base)
    else:
        raise ConfigError("no grid named and the config has no grid section")
    if not cells:
        raise ConfigError(f"grid {grid!r} has no cells")
    rows, failed = [], 0
    teacher_dir = out / "teachers"
    for alias, patch in cells:
        row = {"grid": grid, "row": alias, "seed": cfg.seed}
        try:
            patch = dict(patch)
            patch.pop("grid", None)
            cell = resolve_config(deep_merge({**base, "grid": None}, patch))
            res = run_experiment(cell, out / "cells" / alias.replace("=", "_"), resume,
                                 teacher_dir=teacher_dir, run=alias)
            row.update(report_row(res["report"]))
            row["status"] = "ok"
        except Exception as e:  # a failed cell is recorded and the grid continues
            failed += 1
            row["status"] = f"failed: {type(e).__name__}: {e}"
            log.error("grid cell %s failed: %s", alias, e)
        rows.append(row)
    _flag_trends(grid, rows)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / f"grid-{grid}.csv", rows)
    return rows, failed


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in CSV_COLUMNS})


def collect_reports(run_dirs) -> list:
    reports = []
    for d in run_dirs:
        d = Path(d)
        paths = [d] if d.is_file() else sorted(d.rglob("report.jsonl"))
        if not paths:
            raise ConfigError(f"{d}: no report.jsonl found")
        for p in paths:
            reports.extend(read_reports(p))
    return reports


def plot_sweep(csv_path, out_path) -> None:
    """SA and RA against the swept value of a beta/lambda grid CSV."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path) as fh:
        rows = [r for r in csv.DictReader(fh) if r["SA"]]
    xs = [float(r["row"].split("=")[1]) for r in rows]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(xs, [float(r["SA"]) for r in rows], "o-", label="SA")
    ax.plot(xs, [float(r["RA_pgd20_ce"]) for r in rows if r["RA_pgd20_ce"]], "s-", label="RA (PGD-20)")
    ax.set_xlabel(rows[0]["row"].split("=")[0] if rows else "")
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
