import numpy as np
import pytest

from skd.datamodel import AnnotationLevel, Dataset, SliceRecord, StackRecord
from skd.synthgen import SynthConfig


def make_stack(sid, label=0, level=AnnotationLevel.FULL, n=12, annotated=None,
               domain="A", shape=(8, 8), seed=0):
    rng = np.random.default_rng(seed)
    slices = [
        SliceRecord(sid, k, rng.integers(0, 256, shape).astype(np.float64) / 255.0)
        for k in range(n)
    ]
    if level is AnnotationLevel.FULL and label == 1:
        annotated = n // 2 if annotated is None else annotated
        mask = np.zeros(shape, dtype=np.uint8)
        mask[2:4, 3:5] = 1
        slices[annotated].mask = mask
    else:
        annotated = None
    return StackRecord(
        id=sid,
        domain=domain,
        annotation_level=level,
        slices=slices,
        breast_label=None if level is AnnotationLevel.NONE else label,
        annotated_slice_index=annotated,
    )


def make_dataset(stacks, split=None, subgroup=None, truth=None):
    split = split or {s.id: "train" for s in stacks}
    subgroup = subgroup or {
        s.id: ("cancer" if (s.breast_label or 0) == 1 else "normal") for s in stacks
    }
    truth = truth or {s.id: int(s.breast_label or 0) for s in stacks}
    return Dataset(list(stacks), split, subgroup, truth)


@pytest.fixture
def small_dataset():
    stacks = [
        make_stack("s-pos", 1, seed=1),
        make_stack("s-neg", 0, seed=2),
        make_stack("s-weak", 1, AnnotationLevel.WEAK, seed=3, domain="B"),
    ]
    return make_dataset(stacks, split={"s-pos": "train", "s-neg": "val", "s-weak": "test"})


@pytest.fixture
def tiny_synth():
    """A fast synthetic config: 3 domains x 3 subgroups x 3 stacks, 16 x 16."""
    return SynthConfig(
        image_size=(16, 16),
        slices_per_stack=(12, 14),
        lesion_radius=(1.2, 1.8),
        counts={d: {g: 3 for g in ("cancer", "benign", "normal")} for d in "ABC"},
        split_ratios=(1 / 3, 1 / 3, 1 / 3),
    )


# --------------------------------------------------------------------------
# acceptance bookkeeping: one pass/fail line per criterion


_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, {"title": title, "passed": 0, "failed": [], "skipped": 0})
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.passed:
            entry["passed"] += 1
        elif report.skipped:
            entry["skipped"] += 1
        else:
            entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        if e["failed"]:
            status = "FAIL"
        elif e["passed"]:
            status = "PASS"
        else:
            status = "SKIP"
        detail = f"{e['passed']} passed"
        if e["failed"]:
            detail += f", failed: {', '.join(e['failed'])}"
        terminalreporter.write_line(f"criterion {n} [{e['title']}]: {status} ({detail})")
