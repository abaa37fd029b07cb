import math

import numpy as np
import pytest
import torch

from skd.losses import (
    EPS,
    LossConfig,
    bce,
    combined_loss,
    example_loss,
    mse_kd,
    per_example_losses,
    weighted_total,
)
from skd.train import TrainingExample


def test_bce_identity():
    assert float(bce(1.0, 1 - EPS)) == pytest.approx(0.0, abs=1e-6)
    assert float(bce([0.0, 1.0], [0.0, 1.0])) == pytest.approx(0.0, abs=1e-6)


def test_bce_half():
    assert float(bce(1.0, 0.5)) == pytest.approx(math.log(2), abs=1e-12)
    assert float(bce(np.zeros((4, 4)), np.full((4, 4), 0.5))) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        bce(np.zeros(3), np.zeros(4))


def test_mse():
    assert float(mse_kd([0.3, 0.4], [0.3, 0.4])) == 0.0
    assert float(mse_kd(0.8, 0.6)) == pytest.approx(0.04, abs=1e-12)
    t = np.random.default_rng(0).uniform(0, 0.9, (5, 5))
    assert float(mse_kd(t, t + 0.1)) == pytest.approx(0.01, abs=1e-12)
    with pytest.raises(ValueError):
        mse_kd(np.zeros(2), np.zeros(3))


def test_breakdown_arithmetic():
    comps = {"sup_clf": torch.tensor(0.3), "sup_seg": torch.tensor(0.2),
             "kd_clf": torch.tensor(0.04), "kd_seg": torch.tensor(0.01)}
    assert float(weighted_total(comps, LossConfig())) == pytest.approx(0.79, abs=1e-7)


def _example(**kw):
    base = dict(x=np.zeros((4, 4)), x_aug=np.zeros((4, 4)), stack_id="s", slice_index=0,
                use_sup_clf=False, use_sup_seg=False, use_kd=False)
    base.update(kw)
    return TrainingExample(**base)


def test_kd_only_identity():
    ex = _example(use_kd=True)
    out = (0.37, np.full((4, 4), 0.2))
    b = example_loss(ex, out, out, LossConfig())
    assert b.as_floats() == {"sup_clf": 0.0, "sup_seg": 0.0, "kd_clf": 0.0, "kd_seg": 0.0, "total": 0.0}


def test_weak_positive_ignores_mask():
    # a mask is supplied but the seg flag is off, as for setting-5 weak positives
    mask = np.ones((4, 4))
    ex = _example(use_sup_clf=True, use_kd=True, hard_clf_label=1, hard_seg_mask=mask)
    student = (0.6, np.full((4, 4), 0.3))
    teacher = (0.8, np.full((4, 4), 0.4))
    b = example_loss(ex, teacher, student, LossConfig())
    assert float(b.sup_seg) == 0.0
    expected = -math.log(0.6) + 1 * 0.04 + 25 * 0.01
    assert float(b.total) == pytest.approx(expected, abs=1e-12)


def test_missing_inputs_raise():
    with pytest.raises(ValueError, match="teacher"):
        example_loss(_example(use_kd=True), None, (0.5, np.zeros((4, 4))), LossConfig())
    with pytest.raises(ValueError, match="hard_clf_label"):
        example_loss(_example(use_sup_clf=True), None, (0.5, np.zeros((4, 4))), LossConfig())
    with pytest.raises(ValueError, match="hard_seg_mask"):
        example_loss(_example(use_sup_seg=True), None, (0.5, np.zeros((4, 4))), LossConfig())


def _batch(seed=0, b=6):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.rand(*s, generator=g, dtype=torch.float64)
    return dict(
        student_clf=r(b), student_seg=r(b, 4, 4),
        use_sup_clf=torch.tensor([1, 0, 1, 0, 1, 1][:b], dtype=torch.bool),
        use_sup_seg=torch.tensor([1, 0, 0, 0, 1, 0][:b], dtype=torch.bool),
        use_kd=torch.tensor([1, 1, 0, 1, 1, 0][:b], dtype=torch.bool),
        clf_target=(r(b) > 0.5).double(), seg_target=(r(b, 4, 4) > 0.7).double(),
        teacher_clf=r(b), teacher_seg=r(b, 4, 4),
    )


def test_permutation_invariance():
    kw = _batch()
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    shuffled = {k: v[perm] for k, v in kw.items()}
    a = combined_loss(kw.pop("student_clf"), kw.pop("student_seg"), LossConfig(), **kw)
    b = combined_loss(shuffled.pop("student_clf"), shuffled.pop("student_seg"), LossConfig(),
                      **shuffled)
    for name in ("sup_clf", "sup_seg", "kd_clf", "kd_seg", "total"):
        assert float(getattr(a, name)) == pytest.approx(float(getattr(b, name)), abs=1e-15)


def test_inactive_components_are_exact_zero():
    kw = _batch()
    comps = per_example_losses(kw.pop("student_clf"), kw.pop("student_seg"), **kw)
    assert torch.all(comps["sup_clf"][~kw["use_sup_clf"]] == 0)
    assert torch.all(comps["sup_seg"][~kw["use_sup_seg"]] == 0)
    assert torch.all(comps["kd_clf"][~kw["use_kd"]] == 0)
    assert torch.all(comps["kd_seg"][~kw["use_kd"]] == 0)
    assert all(torch.all(v >= 0) for v in comps.values())


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(t_weak=1.5)
    with pytest.raises(ValueError):
        LossConfig(alpha_seg=-1)
