"""Acceptance suite.  Every test carries a ``criterion`` marker; the terminal
summary prints one PASS/FAIL line per criterion."""

import copy
import json
import os
import subprocess
import sys
import tempfile
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, given, settings, strategies as st

from skd.datamodel import (
    AnnotationLevel,
    Dataset,
    StackRecord,
    kept_annotations,
    load_dataset,
    save_dataset,
    tree_digest,
)
from skd.evaluation import auc, delong_paired_test, delong_variance
from skd.harness import ExperimentConfig, compare_runs, run_setting, run_sweep
from skd.losses import LossConfig, per_example_losses, weighted_total
from skd.model import ArchSpec, OptimizerConfig, init_model, parameter_hash
from skd.sampling import (
    SETTINGS,
    PseudoLabelCache,
    build_training_selection,
    expand_annotated_indices,
    pl_select,
    strided_indices,
)
from skd.train import AugmentConfig, TrainingArrays, fit, materialize

from conftest import make_dataset, make_stack

PROPERTY = settings(max_examples=1000, deadline=None,
                    suppress_health_check=[HealthCheck.too_slow])


# --------------------------------------------------------------------------
# 1. statistics oracle


@pytest.mark.criterion(1, "statistics oracle")
def test_auc_and_delong_match_pair_counting():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    for _ in range(200):
        m, n = (int(v) for v in rng.integers(5, 51, 2))
        levels = int(rng.integers(3, 25))  # coarse grid -> many ties
        pos = np.round(rng.normal(rng.uniform(0, 1.5), 1, m) * levels / 3) / levels
        neg = np.round(rng.normal(0, 1, n) * levels / 3) / levels
        gt = pos[:, None] > neg[None, :]
        eq = pos[:, None] == neg[None, :]
        exact = Fraction(2 * int(gt.sum()) + int(eq.sum()), 2 * m * n)
        assert auc(pos, neg) == float(exact)
        psi = gt + 0.5 * eq
        direct = psi.mean(1).var(ddof=1) / m + psi.mean(0).var(ddof=1) / n
        assert abs(delong_variance(pos, neg) - direct) <= 1e-12
    elapsed = time.perf_counter() - start
    print(f"200 score sets checked in {elapsed:.2f}s")
    assert elapsed < 10


# --------------------------------------------------------------------------
# 2. DeLong calibration


@pytest.mark.criterion(2, "DeLong calibration")
def test_paired_test_rejection_rate_under_null():
    rng = np.random.default_rng(2)
    y = np.r_[np.ones(40), np.zeros(40)]
    start = time.perf_counter()
    rejections = 0
    for _ in range(1000):
        latent = rng.normal(y, 1.0)
        a = latent + rng.normal(0, 1, 80)
        b = latent + rng.normal(0, 1, 80)
        swap = rng.random(80) < 0.5  # exchangeable scorers: equal AUC under H0
        a, b = np.where(swap, b, a), np.where(swap, a, b)
        rejections += delong_paired_test(a, b, y) < 0.05
    rate = rejections / 1000
    elapsed = time.perf_counter() - start
    print(f"null rejection rate {rate:.3f} ({elapsed:.1f}s)")
    assert 0.03 <= rate <= 0.08
    assert elapsed < 120


# --------------------------------------------------------------------------
# 3. gate table

N_SLICES, ANNOTATED = 16, 6
KINDS = ("FULL+", "FULL-", "WEAK+", "WEAK-", "NONE")
ALL = list(range(N_SLICES))
STRIDED = list(range(0, N_SLICES, 2))
EXPANDED = [5, 6, 7]


def gate_oracle(kind, high, setting):
    """Expected (index, sup_clf, sup_seg, kd, label) rows, written out by hand
    from the five experiment settings."""
    kd = setting != "baseline"
    if kind == "FULL+":
        return [(k, True, True, kd, 1) for k in EXPANDED]
    if kind == "FULL-":
        return [(k, True, True, kd, 0) for k in STRIDED]
    if setting == "baseline":
        return []
    kd_only = [(k, False, False, True, None) for k in ALL]
    if kind == "WEAK-" and setting in ("kd_weak", "selective_weak"):
        return [(k, True, False, True, 0) for k in STRIDED]
    if kind == "WEAK+" and setting == "selective_weak":
        return [(k, True, False, True, 1) for k in ALL] if high else []
    if kind == "WEAK+" and setting == "kd_weak":
        return kd_only
    if setting in ("kd", "kd_weak"):
        return kd_only
    return kd_only if high else []  # selective filters on T_noweak


def gate_dataset():
    stacks = [
        make_stack("FULL+", 1, AnnotationLevel.FULL, N_SLICES, ANNOTATED, shape=(4, 4), seed=1),
        make_stack("FULL-", 0, AnnotationLevel.FULL, N_SLICES, shape=(4, 4), seed=2),
        make_stack("WEAK+", 1, AnnotationLevel.WEAK, N_SLICES, domain="B", shape=(4, 4), seed=3),
        make_stack("WEAK-", 0, AnnotationLevel.WEAK, N_SLICES, domain="B", shape=(4, 4), seed=4),
        make_stack("NONE", 1, AnnotationLevel.NONE, N_SLICES, domain="C", shape=(4, 4), seed=5),
    ]
    return make_dataset(stacks)


@pytest.mark.criterion(3, "loss gate table")
@pytest.mark.parametrize("setting", SETTINGS)
@pytest.mark.parametrize("high", [True, False], ids=["score>T", "score<=T"])
def test_gate_table(setting, high):
    cfg = LossConfig()
    ds = gate_dataset()
    # 0.95 exceeds both thresholds; 0.1 sits exactly on T_weak and below T_noweak
    score = 0.95 if high else cfg.t_weak
    cache = PseudoLabelCache()
    for s in ds.stacks:
        for k in range(N_SLICES):
            cache[(s.id, k)] = score
    sel = build_training_selection(ds, setting, cache if setting != "baseline" else None, cfg)
    for kind in KINDS:
        got = [(s.slice_index, s.use_sup_clf, s.use_sup_seg, s.use_kd, s.hard_clf_label)
               for s in sel if s.stack_id == kind]
        assert got == gate_oracle(kind, high, setting), kind

    if not sel:
        return
    data = materialize(ds, sel)
    g = torch.Generator().manual_seed(0)
    b = len(sel)
    comps = per_example_losses(
        torch.rand(b, generator=g, dtype=torch.float64) * 0.8 + 0.1,
        torch.rand(b, 4, 4, generator=g, dtype=torch.float64) * 0.8 + 0.1,
        use_sup_clf=torch.from_numpy(data.use_sup_clf),
        use_sup_seg=torch.from_numpy(data.use_sup_seg),
        use_kd=torch.from_numpy(data.use_kd),
        clf_target=torch.from_numpy(data.clf_targets).double(),
        seg_target=torch.from_numpy(data.seg_targets).double(),
        teacher_clf=torch.rand(b, generator=g, dtype=torch.float64) * 0.05,
        teacher_seg=torch.rand(b, 4, 4, generator=g, dtype=torch.float64) * 0.05,
    )
    flags = {"sup_clf": data.use_sup_clf, "sup_seg": data.use_sup_seg,
             "kd_clf": data.use_kd, "kd_seg": data.use_kd}
    for name, on in flags.items():
        active = (comps[name] != 0).numpy()
        assert np.array_equal(active, on), name


# --------------------------------------------------------------------------
# 4. KD identity and alpha linearity

TINY_ARCH = ArchSpec(width=4, depth=2, input_size=(8, 8))


@pytest.mark.criterion(4, "KD identity and alpha linearity")
def test_kd_identity():
    teacher = init_model(TINY_ARCH, 3).freeze()
    student = copy.deepcopy(teacher)
    x = torch.rand(5, 1, 8, 8, generator=torch.Generator().manual_seed(4))
    s_clf, s_seg = student(x)
    t_clf, t_seg = teacher(x)
    ones = torch.ones(5, dtype=torch.bool)
    comps = per_example_losses(s_clf, s_seg, use_sup_clf=~ones, use_sup_seg=~ones, use_kd=ones,
                               teacher_clf=t_clf, teacher_seg=t_seg)
    assert torch.all(comps["kd_clf"] == 0) and torch.all(comps["kd_seg"] == 0)
    total = weighted_total({k: v.mean() for k, v in comps.items()}, LossConfig())
    assert float(total) == 0.0


@pytest.mark.criterion(4, "KD identity and alpha linearity")
@pytest.mark.parametrize("alpha", [25.0, 1.0, 0.3, 7.77])
def test_alpha_seg_linearity(alpha):
    g = torch.Generator().manual_seed(5)
    kd_seg = torch.rand((), generator=g, dtype=torch.float64)
    zero = torch.zeros((), dtype=torch.float64)
    only = {"sup_clf": zero, "sup_seg": zero, "kd_clf": zero, "kd_seg": kd_seg}
    one = weighted_total(only, LossConfig(alpha_seg=alpha))
    two = weighted_total(only, LossConfig(alpha_seg=2 * alpha))
    assert float(two) == 2 * float(one)
    full = {k: torch.rand((), generator=g, dtype=torch.float64) for k in only}
    d = weighted_total(full, LossConfig(alpha_seg=2 * alpha)) - \
        weighted_total(full, LossConfig(alpha_seg=alpha))
    assert float(d) == pytest.approx(alpha * float(full["kd_seg"]), rel=1e-12)


# --------------------------------------------------------------------------
# 5. gradient check


@pytest.mark.criterion(5, "gradient check")
def test_combined_loss_gradient_matches_finite_differences():
    start = time.perf_counter()
    arch = ArchSpec(width=2, depth=2, input_size=(8, 8))
    model = init_model(arch, 11, dtype=torch.float64)
    teacher = init_model(arch, 12, dtype=torch.float64).freeze()
    g = torch.Generator().manual_seed(13)
    x = torch.rand(6, 1, 8, 8, generator=g, dtype=torch.float64)
    seg_target = (torch.rand(6, 8, 8, generator=g) > 0.8).double()
    kw = dict(
        use_sup_clf=torch.tensor([1, 1, 0, 0, 1, 1], dtype=torch.bool),
        use_sup_seg=torch.tensor([1, 0, 0, 0, 1, 0], dtype=torch.bool),
        use_kd=torch.tensor([1, 1, 1, 1, 0, 1], dtype=torch.bool),
        clf_target=torch.tensor([1.0, 0, 0, 0, 1, 1], dtype=torch.float64),
        seg_target=seg_target,
    )
    with torch.no_grad():
        kw["teacher_clf"], kw["teacher_seg"] = teacher(x)
    cfg = LossConfig()

    def loss():
        s_clf, s_seg = model(x)
        comps = per_example_losses(s_clf, s_seg, **kw)
        return weighted_total({k: v.mean() for k, v in comps.items()}, cfg)

    params = list(model.parameters())
    analytic = torch.autograd.grad(loss(), params)
    h, good, total = 1e-6, 0, 0
    with torch.no_grad():
        for p, ga in zip(params, analytic):
            flat, gflat = p.view(-1), ga.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss())
                flat[i] = orig - h
                down = float(loss())
                flat[i] = orig
                num = (up - down) / (2 * h)
                a = float(gflat[i])
                rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
                good += rel <= 1e-3
                total += 1
    elapsed = time.perf_counter() - start
    print(f"{good}/{total} coordinates within 1e-3 ({elapsed:.1f}s)")
    assert good / total >= 0.95
    assert elapsed < 60


# --------------------------------------------------------------------------
# 6. / 7. directional reproduction (slow: full-length training, five seeds)

SEEDS = range(5)
OOD = ("B", "C")
SWEEP_FRACTIONS = [0.1, 0.2, 0.3, 0.4, 0.5]
SWEEP_CONFIG = {"synth": {"counts": {"A": {"cancer": 60, "benign": 60, "normal": 60}}}}


def _out_root(tmp_path_factory, name):
    """``SKD_ACCEPTANCE_OUT`` keeps the runs for inspection."""
    root = os.environ.get("SKD_ACCEPTANCE_OUT")
    if not root:
        return tmp_path_factory.mktemp(name)
    path = Path(root) / name
    path.mkdir(parents=True, exist_ok=False)
    return path


@pytest.fixture(scope="module")
def table1(tmp_path_factory):
    root = _out_root(tmp_path_factory, "table1")
    ood = {}
    for seed in SEEDS:
        base = root / f"seed{seed}" / "baseline"
        runs = {"baseline": run_setting(ExperimentConfig(seed=seed), base)}
        for setting in ("selective", "selective_weak"):
            cfg = ExperimentConfig(setting=setting, seed=seed, teacher=str(base))
            runs[setting] = run_setting(cfg, root / f"seed{seed}" / setting)
        ood[seed] = {k: float(np.mean([r.auc(d) for d in OOD])) for k, r in runs.items()}
        print(f"seed {seed} OOD AUC", {k: round(v, 3) for k, v in ood[seed].items()})
    compare_runs([root / "seed0" / s for s in ("baseline", "selective", "selective_weak")],
                 root / "seed0" / "comparison")
    return ood


@pytest.mark.slow
@pytest.mark.criterion(6, "directional domain-shift reproduction")
def test_selective_beats_baseline_out_of_domain(table1):
    mean = {k: float(np.mean([table1[s][k] for s in SEEDS]))
            for k in ("baseline", "selective", "selective_weak")}
    print("mean OOD AUC", {k: round(v, 4) for k, v in mean.items()})
    assert mean["baseline"] < mean["selective"]
    assert mean["baseline"] < mean["selective_weak"]


@pytest.mark.slow
@pytest.mark.criterion(6, "directional domain-shift reproduction")
def test_weak_data_helps_in_most_seeds(table1):
    gains = [table1[s]["selective_weak"] - table1[s]["baseline"] for s in SEEDS]
    print("SelectiveKD* - Baseline OOD gain per seed", [round(g, 3) for g in gains])
    assert sum(g > 0 for g in gains) >= 4


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    root = _out_root(tmp_path_factory, "sweep")
    cfg = ExperimentConfig.from_dict(SWEEP_CONFIG)
    res = run_sweep(cfg, SWEEP_FRACTIONS, list(SEEDS), root, settings=("baseline", "selective"))
    for row in res.summary():
        print(row)
    assert all(c.status == "ok" for c in res.cells)
    return res


@pytest.mark.slow
@pytest.mark.criterion(7, "directional annotation-cost reproduction")
def test_selective_at_20_matches_baseline_at_40(sweep):
    assert sweep.mean_auc("selective", 0.2) >= sweep.mean_auc("baseline", 0.4)


@pytest.mark.slow
@pytest.mark.criterion(7, "directional annotation-cost reproduction")
@pytest.mark.parametrize("fraction", SWEEP_FRACTIONS)
def test_selective_not_below_baseline(sweep, fraction):
    assert sweep.mean_auc("selective", fraction) >= sweep.mean_auc("baseline", fraction)


# --------------------------------------------------------------------------
# 8. determinism

DET_CONFIG = {
    "optimizer": {"total_iterations": 150},
}


def _skd(*args, env):
    proc = subprocess.run([sys.executable, "-m", "skd.cli", *args], env=env,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def _numbers(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _numbers(v, f"{prefix}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _numbers(v, f"{prefix}[{i}]")
    else:
        yield prefix, obj


@pytest.mark.criterion(8, "determinism")
def test_full_reruns_are_identical(tmp_path):
    env = {**os.environ, "SKD_DETERMINISTIC": "1"}
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(DET_CONFIG))
    for rep in ("a", "b"):
        root = tmp_path / rep
        _skd("gen-data", "--config", str(cfg), "--seed", "3", "--out", str(root / "data"), env=env)
        _skd("train", "--setting", "baseline", "--data", str(root / "data"), "--config", str(cfg),
             "--seed", "3", "--out", str(root / "base"), env=env)
        _skd("train", "--setting", "selective-weak", "--data", str(root / "data"), "--config",
             str(cfg), "--seed", "3", "--teacher", str(root / "base"), "--out",
             str(root / "student"), env=env)
    a, b = tmp_path / "a", tmp_path / "b"
    assert tree_digest(a / "data") == tree_digest(b / "data")
    for run in ("base", "student"):
        assert (a / run / "selection.jsonl").read_bytes() == (b / run / "selection.jsonl").read_bytes()
        ma = dict(_numbers(json.loads((a / run / "metrics.json").read_text())))
        mb = dict(_numbers(json.loads((b / run / "metrics.json").read_text())))
        assert ma.keys() == mb.keys()
        for key, va in ma.items():
            vb = mb[key]
            if isinstance(va, float) or isinstance(vb, float):
                assert abs(va - vb) <= 1e-6, key
            elif not key.startswith(".teacher.source"):
                assert va == vb, key
    assert (a / "student" / "pl_cache.json").read_bytes() == \
        (b / "student" / "pl_cache.json").read_bytes()


# --------------------------------------------------------------------------
# 9. property suites

unit = st.floats(0, 1, allow_nan=False)


@pytest.mark.criterion(9, "property suites")
@PROPERTY
@given(st.lists(unit, max_size=30), unit, unit)
def test_pl_select_monotone(scores, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    s = dict(enumerate(scores))
    assert set(pl_select(s, lo)) >= set(pl_select(s, hi))
    assert all(s[k] > hi for k in pl_select(s, hi))
    assert pl_select(s, 1.0) == []


@pytest.mark.criterion(9, "property suites")
@PROPERTY
@given(st.integers(1, 40), st.data())
def test_expand_and_stride_boundaries(n, data):
    idx = data.draw(st.integers(-2, n + 1))
    if 0 <= idx < n:
        assert expand_annotated_indices(idx, n) == [k for k in range(n) if abs(k - idx) <= 1]
    else:
        with pytest.raises(ValueError):
            expand_annotated_indices(idx, n)
    stride = data.draw(st.integers(0, 6))
    offset = data.draw(st.integers(-1, 6))
    if stride >= 1 and 0 <= offset < stride:
        assert strided_indices(n, stride, offset) == [k for k in range(n) if k % stride == offset]
    else:
        with pytest.raises(ValueError):
            strided_indices(n, stride, offset)


levels = st.sampled_from(list(AnnotationLevel))


@st.composite
def small_datasets(draw):
    stacks, split, subgroup, truth = [], {}, {}, {}
    for i in range(draw(st.integers(1, 3))):
        level = draw(levels)
        label = draw(st.integers(0, 1))
        n = draw(st.integers(12, 13))
        sid = f"s{i}"
        annotated = draw(st.integers(0, n - 1))
        stacks.append(make_stack(sid, label, level, n, annotated, draw(st.sampled_from("ABC")),
                                 (3, 4), draw(st.integers(0, 2**16))))
        split[sid] = draw(st.sampled_from(["train", "val", "test"]))
        subgroup[sid] = "cancer" if label else draw(st.sampled_from(["benign", "normal"]))
        truth[sid] = label
    return Dataset(stacks, split, subgroup, truth)


@pytest.mark.criterion(9, "property suites")
@PROPERTY
@given(small_datasets())
def test_dataset_round_trip(ds):
    with tempfile.TemporaryDirectory() as tmp:
        save_dataset(ds, tmp)
        assert load_dataset(tmp) == ds


@st.composite
def annotated_pools(draw):
    stacks, subgroup = [], {}
    for i in range(draw(st.integers(1, 40))):
        sid = f"x{i:03d}"
        level = draw(st.sampled_from([AnnotationLevel.FULL, AnnotationLevel.FULL,
                                      AnnotationLevel.WEAK]))
        stacks.append(StackRecord(sid, "A", level, [], None, None))
        subgroup[sid] = draw(st.sampled_from(["cancer", "benign", "normal"]))
    split = {s.id: draw(st.sampled_from(["train", "train", "test"])) for s in stacks}
    return Dataset(stacks, split, subgroup, {s.id: 0 for s in stacks})


@pytest.mark.criterion(9, "property suites")
@PROPERTY
@given(annotated_pools(), st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**31))
def test_subsample_nesting(ds, a, b, seed):
    f1, f2 = min(a, b) / 10, max(a, b) / 10
    small, large = kept_annotations(ds, f1, seed), kept_annotations(ds, f2, seed)
    assert small <= large
    for group in ("cancer", "benign", "normal"):
        pool = [s.id for s in ds.in_split("train")
                if s.annotation_level is AnnotationLevel.FULL and ds.subgroup[s.id] == group]
        assert len([i for i in small if i in pool]) == int(f1 * len(pool) + 0.5 + 1e-9)


MICRO = ArchSpec(width=1, depth=1, input_size=(4, 4))
MICRO_TEACHER = init_model(MICRO, 99).freeze()
MICRO_HASH = parameter_hash(MICRO_TEACHER)


@pytest.mark.criterion(9, "property suites")
@PROPERTY
@given(st.integers(0, 2**31), st.integers(1, 6), st.floats(1e-4, 0.5))
def test_frozen_teacher_hash_invariant(seed, n, lr):
    from skd.sampling import SliceSelection

    rng = np.random.default_rng(seed)
    sel = [SliceSelection("s", k, bool(k % 2), False, True, k % 2) for k in range(n)]
    data = TrainingArrays(
        selection=sel,
        images=rng.random((n, 4, 4)).astype(np.float32),
        seg_targets=np.zeros((n, 4, 4), dtype=np.uint8),
        clf_targets=np.array([k % 2 for k in range(n)], dtype=np.float32),
        use_sup_clf=np.array([bool(k % 2) for k in range(n)]),
        use_sup_seg=np.zeros(n, dtype=bool),
        use_kd=np.ones(n, dtype=bool),
    )
    student = init_model(MICRO, seed)
    fit(student, data, OptimizerConfig(base_lr=lr, total_iterations=2, batch_size=4),
        LossConfig(), seed, teacher=MICRO_TEACHER, aug_cfg=AugmentConfig())
    assert parameter_hash(MICRO_TEACHER) == MICRO_HASH
    assert MICRO_TEACHER.frozen
