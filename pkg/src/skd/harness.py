"""Config-driven experiment runner: single runs, comparison tables, sweeps.

A run directory holds everything needed to audit a result::

    config.json        the resolved ExperimentConfig
    metrics.json       per-domain AUC [CI] plus dataset hashes
    scores_test.csv    one score per test stack (metrics are recomputable from it)
    train_log.csv      per-iteration loss components
    selection.jsonl    the slice selection manifest
    pl_cache.json      teacher scores used for filtering (settings 2-5)
    checkpoints/       model.ckpt, and teacher.ckpt when the teacher was trained inline

Runs are assembled in a temporary sibling directory and renamed into place.
A run that fails is still moved to its destination but keeps an
``INCOMPLETE`` file carrying the error.
"""

from __future__ import annotations

import collections
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import shutil
import traceback
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .datamodel import (
    AnnotationLevel,
    Dataset,
    DatasetError,
    dataset_fingerprint,
    kept_annotations,
    load_dataset,
    subsample_annotations,
)
from .evaluation import (
    POOLED,
    EvalResult,
    evaluate,
    evaluate_scores,
    pairwise_pvalues,
    read_scores,
    write_scores,
)
from .losses import LossConfig
from .model import (
    ArchSpec,
    DualHeadModel,
    OptimizerConfig,
    load_checkpoint,
    parameter_hash,
    save_checkpoint,
)
from .plotting import plot_comparison, plot_sweep
from .sampling import SETTINGS, write_manifest, setting_name
from .synthgen import SynthConfig, generate_dataset
from .train import (
    AugmentConfig,
    compute_pseudo_labels,
    configure_determinism,
    train_student,
    train_teacher,
    write_train_log,
)

log = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
INCOMPLETE = "INCOMPLETE"
SWEEP_SETTINGS = ("baseline", "selective", "selective_weak")


class ConfigError(ValueError):
    pass


class ComparisonError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


def _dataclass_from(cls, d: Mapping | None, section: str):
    if d is None:
        return cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")
    try:
        return cls(**dict(d))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section}: {exc}") from exc


@dataclasses.dataclass
class ExperimentConfig:
    """One run.  ``data`` (a dataset directory) takes precedence over ``synth``.

    ``annotation_fraction`` < 1 hides the annotation of the remaining FULL
    training stacks; they become WEAK (``downgrade_to="WEAK"``) or unlabelled
    (``"NONE"``).  When ``downgrade_to`` is unset it follows the setting:
    WEAK for the ``*_weak`` settings, NONE otherwise.
    """

    setting: str = "baseline"
    seed: int = 0
    data: str | None = None
    data_seed: int | None = None
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    annotation_fraction: float = 1.0
    downgrade_to: str | None = None
    optimizer: OptimizerConfig = dataclasses.field(default_factory=OptimizerConfig)
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    arch: ArchSpec = dataclasses.field(default_factory=ArchSpec)
    augment: AugmentConfig = dataclasses.field(default_factory=AugmentConfig)
    teacher: str | None = None
    warm_start: bool = False
    output: str | None = None
    schema_version: int = CONFIG_SCHEMA_VERSION

    def __post_init__(self):
        try:
            self.setting = setting_name(self.setting)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {self.schema_version}")
        if not (0 < self.annotation_fraction <= 1):
            raise ConfigError("annotation_fraction must be in (0, 1]")
        if self.downgrade_to not in (None, "WEAK", "NONE"):
            raise ConfigError(f"downgrade_to must be WEAK or NONE, got {self.downgrade_to!r}")

    @property
    def dataset_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    @property
    def downgrade_level(self) -> AnnotationLevel:
        if self.downgrade_to is not None:
            return AnnotationLevel(self.downgrade_to)
        weak = self.setting in ("kd_weak", "selective_weak")
        return AnnotationLevel.WEAK if weak else AnnotationLevel.NONE

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "setting": self.setting,
            "seed": self.seed,
            "data": self.data,
            "data_seed": self.data_seed,
            "synth": self.synth.to_dict(),
            "annotation_fraction": self.annotation_fraction,
            "downgrade_to": self.downgrade_to,
            "optimizer": dataclasses.asdict(self.optimizer),
            "loss": dataclasses.asdict(self.loss),
            "arch": self.arch.to_dict(),
            "augment": {**dataclasses.asdict(self.augment),
                        "contrast": list(self.augment.contrast)},
            "teacher": self.teacher,
            "warm_start": self.warm_start,
            "output": self.output,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        sections = {"synth": SynthConfig, "optimizer": OptimizerConfig, "loss": LossConfig,
                    "arch": ArchSpec, "augment": AugmentConfig}
        scalars = {f.name for f in dataclasses.fields(cls)} - set(sections) - {"schema_version"}
        unknown = sorted(set(d) - scalars - set(sections))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        setting = d.get("setting", "baseline")
        loss = d.get("loss")
        if loss is not None:
            missing = [k for k in ("t_weak", "t_noweak") if k in loss and loss[k] is None]
            if missing and str(setting).replace("-", "_").startswith("selective"):
                raise ConfigError(f"selective settings require thresholds ({', '.join(missing)})")
            loss = {k: v for k, v in loss.items() if v is not None}
        synth = d.get("synth")
        if synth is not None:
            synth = dict(synth)
            synth_keys = {f.name for f in dataclasses.fields(SynthConfig)}
            if set(synth) - synth_keys:
                raise ConfigError(f"unknown key(s) in synth: {', '.join(sorted(set(synth) - synth_keys))}")
        kwargs = {k: d[k] for k in scalars if k in d}
        kwargs.update(
            synth=_dataclass_from(SynthConfig, synth, "synth"),
            optimizer=_dataclass_from(OptimizerConfig, d.get("optimizer"), "optimizer"),
            loss=_dataclass_from(LossConfig, loss, "loss"),
            arch=_dataclass_from(ArchSpec, d.get("arch"), "arch"),
            augment=_dataclass_from(AugmentConfig, d.get("augment"), "augment"),
        )
        return cls(schema_version=version, **kwargs)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def save(self, path: str | os.PathLike):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """Apply dotted-key overrides, e.g. ``{"optimizer.base_lr": 0.01}``."""
        doc = self.to_dict()
        for key, value in overrides.items():
            node = doc
            *parents, leaf = key.split(".")
            for p in parents:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"cannot override {key!r}: {p!r} is not a section")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return ExperimentConfig.from_dict(doc)


# --------------------------------------------------------------------------
# datasets


def resolve_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(source dataset, dataset after annotation subsampling)."""
    if cfg.data is not None:
        source = load_dataset(cfg.data)
    else:
        source = generate_dataset(cfg.synth, cfg.dataset_seed)
    ds = source
    if cfg.annotation_fraction < 1:
        ds = subsample_annotations(source, cfg.annotation_fraction, cfg.dataset_seed,
                                   downgrade_to=cfg.downgrade_level)
    return source, ds


def _check_dataset(cfg: ExperimentConfig, ds: Dataset):
    if cfg.setting in ("kd_weak", "selective_weak"):
        if not any(s.annotation_level is AnnotationLevel.WEAK for s in ds.in_split("train")):
            raise ConfigError(f"setting {cfg.setting} needs WEAK stacks in the train split")
    if not ds.in_split("test"):
        raise DatasetError("the test split is empty")


def annotated_ids_hash(ds: Dataset) -> str:
    ids = sorted(s.id for s in ds.in_split("train") if s.annotation_level is AnnotationLevel.FULL)
    return hashlib.sha256("\n".join(ids).encode()).hexdigest()


# --------------------------------------------------------------------------
# single runs


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _metrics_doc(cfg, result: EvalResult, hashes: dict, model: DualHeadModel,
                 teacher_info: dict | None) -> dict:
    sel = model.selection
    return {
        "setting": cfg.setting,
        "seed": cfg.seed,
        "annotation_fraction": cfg.annotation_fraction,
        **hashes,
        "domains": result.to_dict()["domains"],
        "selection": {
            "n_slices": len(sel),
            "n_kd_only": sum(1 for s in sel if s.use_kd and not (s.use_sup_clf or s.use_sup_seg)),
            "n_sup_clf": sum(1 for s in sel if s.use_sup_clf),
            "n_sup_seg": sum(1 for s in sel if s.use_sup_seg),
        },
        "final_loss": model.history[-1]["total"] if model.history else None,
        "model_hash": parameter_hash(model),
        "teacher": teacher_info,
    }


def load_teacher(run_dir: str | os.PathLike) -> tuple[DualHeadModel, dict]:
    run = Path(run_dir)
    if (run / INCOMPLETE).exists():
        raise ConfigError(f"teacher run {run} is incomplete")
    metrics = json.loads((run / "metrics.json").read_text(encoding="utf-8"))
    if metrics.get("setting") != "baseline":
        raise ConfigError(f"teacher run {run} is a {metrics.get('setting')} run, not baseline")
    model = load_checkpoint(run / "checkpoints" / "model.ckpt")
    return model, metrics


def _execute(cfg: ExperimentConfig, work: Path, source: Dataset, ds: Dataset,
             teacher: DualHeadModel | None, teacher_info: dict | None):
    cfg.save(work / "config.json")
    _check_dataset(cfg, ds)
    hashes = {
        "source_hash": dataset_fingerprint(source),
        "dataset_hash": dataset_fingerprint(ds),
        "test_hash": dataset_fingerprint(ds, "test"),
        "annotated_hash": annotated_ids_hash(ds),
    }
    (work / "checkpoints").mkdir()
    if cfg.setting == "baseline":
        model = train_teacher(ds, cfg.optimizer, cfg.loss, cfg.seed, cfg.arch, cfg.augment)
        teacher_out = model
    else:
        if teacher is None:
            teacher = train_teacher(ds, cfg.optimizer, cfg.loss, cfg.seed, cfg.arch, cfg.augment)
            save_checkpoint(teacher, work / "checkpoints" / "teacher.ckpt")
            write_train_log(teacher.history, work / "teacher_log.csv")
            teacher_info = {"source": "inline", "hash": parameter_hash(teacher)}
        cache = compute_pseudo_labels(teacher, ds, cfg.loss.strict_gating)
        cache.save(work / "pl_cache.json")
        model = train_student(teacher, ds, cfg.setting, cfg.optimizer, cfg.loss, cfg.seed,
                              cache=cache, warm_start=cfg.warm_start, aug_cfg=cfg.augment)
        teacher_out = teacher
    save_checkpoint(model, work / "checkpoints" / "model.ckpt")
    write_train_log(model.history, work / "train_log.csv")
    write_manifest(model.selection, work / "selection.jsonl")
    result = evaluate(model, ds, "test")
    write_scores(result.scores, work / "scores_test.csv")
    _write_json(work / "metrics.json", _metrics_doc(cfg, result, hashes, model, teacher_info))
    return result, teacher_out


def _run_in_place(cfg: ExperimentConfig, out: Path, **kw):
    """Build the run in a temp sibling and rename it to ``out``."""
    if out.exists():
        raise FileExistsError(f"run directory {out} already exists")
    out.parent.mkdir(parents=True, exist_ok=True)
    work = out.parent / f".{out.name}.tmp{os.getpid()}"
    if work.exists():
        shutil.rmtree(work)
    work.mkdir()
    (work / INCOMPLETE).write_text("running\n", encoding="utf-8")
    try:
        res = _execute(cfg, work, **kw)
    except BaseException as exc:
        (work / INCOMPLETE).write_text(
            "".join(traceback.format_exception(type(exc), exc, exc.__traceback__)),
            encoding="utf-8")
        os.replace(work, out)
        raise
    (work / INCOMPLETE).unlink()
    os.replace(work, out)
    return res


def run_setting(cfg: ExperimentConfig, output: str | os.PathLike | None = None) -> EvalResult:
    """Train (teacher if needed, then student) and evaluate one setting.

    Settings 2-5 use the baseline run in ``cfg.teacher`` when given; otherwise
    a teacher is trained inside the run.  Returns the test-split evaluation;
    everything is also persisted under ``output`` (default ``cfg.output``).
    """
    configure_determinism()
    out = output if output is not None else cfg.output
    if out is None:
        raise ConfigError("no output directory given")
    source, ds = resolve_dataset(cfg)
    teacher, teacher_info = None, None
    if cfg.setting != "baseline" and cfg.teacher is not None:
        teacher, tm = load_teacher(cfg.teacher)
        if tm["source_hash"] != dataset_fingerprint(source) or \
                tm["annotated_hash"] != annotated_ids_hash(ds):
            raise ConfigError(f"teacher run {cfg.teacher} was trained on different annotations")
        teacher_info = {"source": str(cfg.teacher), "hash": parameter_hash(teacher)}
    result, _ = _run_in_place(cfg, Path(out), source=source, ds=ds, teacher=teacher,
                              teacher_info=teacher_info)
    return result


def read_metrics(run_dir: str | os.PathLike) -> dict:
    run = Path(run_dir)
    if (run / INCOMPLETE).exists():
        raise ComparisonError(f"run {run} is incomplete")
    path = run / "metrics.json"
    if not path.is_file():
        raise ComparisonError(f"{run} has no metrics.json")
    return json.loads(path.read_text(encoding="utf-8"))


def evaluate_run(run_dir: str | os.PathLike, data: str | os.PathLike | None = None) -> EvalResult:
    """Re-evaluate a run's model, on ``data`` or on its persisted scores."""
    run = Path(run_dir)
    if data is None:
        return evaluate_scores(read_scores(run / "scores_test.csv"))
    model = load_checkpoint(run / "checkpoints" / "model.ckpt")
    return evaluate(model, load_dataset(data), "test")


# --------------------------------------------------------------------------
# comparison


def _fmt_cell(m: dict | None) -> str:
    if m is None:
        return "n/a"
    return f"{m['auc']:.3f} [{m['ci_low']:.3f}, {m['ci_high']:.3f}]"


@dataclasses.dataclass
class Comparison:
    runs: list[str]
    settings: list[str]
    domains: list[str]
    metrics: list[dict]  # per run: domain -> metrics dict or None
    pvalues: dict[str, float]  # run -> p vs the first run (pooled)

    def to_text(self) -> str:
        head = ["run", "setting", *self.domains, "p"]
        body = []
        for run, setting, m in zip(self.runs, self.settings, self.metrics):
            p = self.pvalues.get(run)
            body.append([run, setting, *(_fmt_cell(m.get(d)) for d in self.domains),
                         "-" if p is None else f"{p:.4f}"])
        widths = [max(len(str(r[i])) for r in [head, *body]) for i in range(len(head))]
        lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
                 for r in [head, *body]]
        return "\n".join(lines) + "\n"

    def csv_header(self) -> list[str]:
        cols = ["run", "setting"]
        for d in self.domains:
            cols += [f"{d}_auc", f"{d}_ci_low", f"{d}_ci_high"]
        return cols + ["p_value"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        for run, setting, m in zip(self.runs, self.settings, self.metrics):
            row = [run, setting]
            for d in self.domains:
                dm = m.get(d)
                row += ["", "", ""] if dm is None else [
                    repr(float(dm["auc"])), repr(float(dm["ci_low"])), repr(float(dm["ci_high"]))]
            p = self.pvalues.get(run)
            w.writerow(row + ["" if p is None else repr(float(p))])
        return buf.getvalue()


def read_comparison_csv(path: str | os.PathLike) -> list[dict]:
    """Rows of a comparison CSV with numeric cells parsed (blank -> None)."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return [{k: (v if k in ("run", "setting") else (float(v) if v else None))
             for k, v in r.items()} for r in rows]


def compare_runs(run_dirs: Sequence[str | os.PathLike],
                 out_dir: str | os.PathLike | None = None) -> Comparison:
    """Per-domain AUC [CI] table over runs with paired DeLong p-values
    against the first run.  All runs must share the same test split."""
    if not run_dirs:
        raise ComparisonError("no runs to compare")
    dirs = [Path(r) for r in run_dirs]
    metrics = [read_metrics(d) for d in dirs]
    hashes = {m["test_hash"] for m in metrics}
    if len(hashes) != 1:
        detail = ", ".join(f"{d.name}={m['test_hash'][:12]}" for d, m in zip(dirs, metrics))
        raise ComparisonError(f"runs were evaluated on different test splits ({detail})")
    names = []
    for d in dirs:
        name = d.name
        while name in names:
            name += "'"
        names.append(name)
    scores = {n: read_scores(d / "scores_test.csv") for n, d in zip(names, dirs)}
    pv = pairwise_pvalues(scores, names[0]) if len(names) > 1 else {}
    domains = sorted({k for m in metrics for k in m["domains"] if k != POOLED}) + [POOLED]
    comp = Comparison(
        runs=names,
        settings=[m["setting"] for m in metrics],
        domains=domains,
        metrics=[m["domains"] for m in metrics],
        pvalues={b: p for (_, b), p in pv.items()},
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(comp.to_text(), encoding="utf-8")
        (out / "comparison.csv").write_text(comp.to_csv(), encoding="utf-8")
        rows = [{"run": n, "setting": s, "domains": m}
                for n, s, m in zip(comp.runs, comp.settings, comp.metrics)]
        plot_comparison(rows, domains, out / "comparison.svg")
    return comp


# --------------------------------------------------------------------------
# annotation-fraction sweep


def parse_fractions(text: str | Iterable[float]) -> list[float]:
    """``"0.1..1.0"`` (10% steps), ``"0.2,0.5"`` or a sequence of floats."""
    if isinstance(text, str):
        text = text.strip()
        if ".." in text:
            lo, hi = (float(v) for v in text.split(".."))
            a, b = round(lo * 10), round(hi * 10)
            values = [k / 10 for k in range(a, b + 1)]
        else:
            values = [float(v) for v in text.split(",") if v.strip()]
    else:
        values = [float(v) for v in text]
    if not values:
        raise ConfigError("no fractions given")
    for v in values:
        if abs(v * 10 - round(v * 10)) > 1e-9 or not (0.1 - 1e-9 <= v <= 1.0 + 1e-9):
            raise ConfigError(f"fraction {v} is not one of 0.1, 0.2, ..., 1.0")
    values = [round(v, 1) for v in values]
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError("fractions must be strictly increasing")
    return values


@dataclasses.dataclass
class SweepCell:
    seed: int
    fraction: float
    setting: str
    status: str  # ok | failed
    domains: dict | None = None
    error: str = ""

    def auc(self, domain: str = POOLED) -> float | None:
        if self.domains is None or self.domains.get(domain) is None:
            return None
        return self.domains[domain]["auc"]


@dataclasses.dataclass
class SweepResult:
    fractions: list[float]
    seeds: list[int]
    cells: list[SweepCell]

    def values(self, setting: str, fraction: float, domain: str = POOLED) -> list[float]:
        return [c.auc(domain) for c in self.cells
                if c.setting == setting and c.fraction == fraction and c.auc(domain) is not None]

    def mean_auc(self, setting: str, fraction: float, domain: str = POOLED) -> float:
        v = self.values(setting, fraction, domain)
        return sum(v) / len(v) if v else math.nan

    def summary(self, domain: str = POOLED) -> list[dict]:
        rows = []
        for s in dict.fromkeys(c.setting for c in self.cells):
            for f in self.fractions:
                v = self.values(s, f, domain)
                if v:
                    rows.append({"setting": s, "fraction": f, "mean_auc": sum(v) / len(v),
                                 "min_auc": min(v), "max_auc": max(v), "n_seeds": len(v)})
        return rows


MIN_SWEEP_ANNOTATED = 10
SWEEP_FIELDS = ("seed", "fraction", "setting", "status", "auc", "ci_low", "ci_high")


def write_sweep_csv(result: SweepResult, path: str | os.PathLike):
    domains = sorted({d for c in result.cells if c.domains for d in c.domains if d != POOLED})
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([*SWEEP_FIELDS, *(f"auc_{d}" for d in domains), "error"])
        for c in result.cells:
            pooled = (c.domains or {}).get(POOLED) or {}
            row = [c.seed, c.fraction, c.setting, c.status,
                   *(repr(float(pooled[k])) if k in pooled else "" for k in ("auc", "ci_low", "ci_high"))]
            row += ["" if c.auc(d) is None else repr(float(c.auc(d))) for d in domains]
            w.writerow(row + [c.error])


def read_sweep_csv(path: str | os.PathLike) -> SweepResult:
    cells = []
    with open(path, newline="", encoding="utf-8") as f:
        for r in csv.DictReader(f):
            domains = None
            if r["status"] == "ok":
                domains = {POOLED: {"auc": float(r["auc"]), "ci_low": float(r["ci_low"]),
                                    "ci_high": float(r["ci_high"])}}
                for k, v in r.items():
                    if k.startswith("auc_") and v:
                        domains[k[4:]] = {"auc": float(v)}
            cells.append(SweepCell(int(r["seed"]), float(r["fraction"]), r["setting"],
                                   r["status"], domains, r["error"]))
    fractions = sorted({c.fraction for c in cells})
    seeds = sorted({c.seed for c in cells})
    return SweepResult(fractions, seeds, cells)


def run_sweep(
    base_cfg: ExperimentConfig,
    fractions: Sequence[float] | str,
    seeds: Sequence[int] | int,
    out_dir: str | os.PathLike,
    settings: Sequence[str] = SWEEP_SETTINGS,
) -> SweepResult:
    """Baseline (as teacher), SelectiveKD and SelectiveKD* at each annotated
    fraction.  Within a seed the annotated sets are nested across fractions
    and one teacher serves every student.  Failed cells are recorded and the
    sweep carries on."""
    configure_determinism()
    fractions = parse_fractions(fractions)
    seeds = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
    settings = [setting_name(s) for s in settings]
    if "baseline" not in settings:
        settings.insert(0, "baseline")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells: list[SweepCell] = []
    for seed in seeds:
        cfg_seed = dataclasses.replace(base_cfg, seed=seed, teacher=None)
        source, _ = resolve_dataset(dataclasses.replace(cfg_seed, annotation_fraction=1.0))
        n_full = len(kept_annotations(source, 1.0, cfg_seed.dataset_seed))
        pool = collections.Counter(source.subgroup[s.id] for s in source.in_split("train")
                                   if s.annotation_level is AnnotationLevel.FULL)
        if min(pool.values(), default=0) < MIN_SWEEP_ANNOTATED:
            log.warning("seed %s: annotated training pool %s has fewer than %d stacks in some "
                        "subgroup; low fractions will be noisy", seed, dict(pool),
                        MIN_SWEEP_ANNOTATED)
        for fraction in fractions:
            teacher = None
            for setting in settings:
                cfg = dataclasses.replace(cfg_seed, setting=setting, annotation_fraction=fraction,
                                          downgrade_to=None)
                run_dir = out / f"seed{seed}" / f"f{fraction:.1f}" / setting
                cfg.output = str(run_dir)
                try:
                    if n_full == 0:
                        raise DatasetError("no annotated training stacks to subsample")
                    if setting != "baseline" and teacher is None:
                        raise RuntimeError("baseline teacher unavailable for this cell")
                    ds = source
                    if fraction < 1:
                        ds = subsample_annotations(source, fraction, cfg.dataset_seed,
                                                   downgrade_to=cfg.downgrade_level)
                    info = None if teacher is None else {
                        "source": str(run_dir.parent / "baseline"),
                        "hash": parameter_hash(teacher)}
                    result, t = _run_in_place(cfg, run_dir, source=source, ds=ds,
                                              teacher=teacher, teacher_info=info)
                    if setting == "baseline":
                        teacher = t
                    cells.append(SweepCell(seed, fraction, setting, "ok",
                                           result.to_dict()["domains"]))
                except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
                    log.warning("sweep cell seed=%s fraction=%s %s failed: %s",
                                seed, fraction, setting, exc)
                    cells.append(SweepCell(seed, fraction, setting, "failed",
                                           error=f"{type(exc).__name__}: {exc}"))
    result = SweepResult(fractions, seeds, cells)
    write_sweep_csv(result, out / "sweep.csv")
    summary = result.summary()
    if summary:
        plot_sweep(summary, out / "sweep.svg")
    base_cfg.save(out / "config.json")
    return result


__all__ = [
    "CONFIG_SCHEMA_VERSION", "ConfigError", "ComparisonError", "ExperimentConfig",
    "Comparison", "SweepCell", "SweepResult", "SETTINGS", "SWEEP_SETTINGS", "INCOMPLETE",
    "run_setting", "compare_runs", "run_sweep", "resolve_dataset", "read_metrics",
    "evaluate_run", "load_teacher", "parse_fractions", "read_sweep_csv", "write_sweep_csv",
    "read_comparison_csv",
]
