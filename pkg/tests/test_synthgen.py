import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skd.datamodel import AnnotationLevel, DatasetError, save_dataset, tree_digest
from skd.synthgen import (
    DEFAULT_DOMAINS,
    DomainShift,
    SynthConfig,
    apply_domain_shift,
    derive_seed,
    generate_dataset,
    generate_stack,
    lesion_slices,
    span_profile,
)

IDENTITY = DomainShift(1.0, 0.0, 0.0, 0.0, 0.0)


def flat_config(**kw):
    """No background structure and no noise: only the lesion departs from the mean."""
    base = dict(background_structure=0.0, noise_floor=0.0, domains={"A": IDENTITY},
                counts={"A": {"cancer": 3, "benign": 3, "normal": 3}}, image_size=(16, 16))
    base.update(kw)
    return SynthConfig(**base)


def test_normal_stack():
    s = generate_stack(SynthConfig(), "normal", "A", 5)
    assert s.breast_label == 0 and s.annotated_slice_index is None
    assert all(sl.mask is None for sl in s.slices)
    assert 12 <= s.n_slices <= 24
    flat = generate_stack(flat_config(), "normal", "A", 5)
    assert all(np.all(sl.image == flat.slices[0].image) for sl in flat.slices)


@pytest.mark.parametrize("seed", range(5))
def test_cancer_stack_lesion_layout(seed):
    cfg = flat_config()
    s = generate_stack(cfg, "cancer", "A", seed)
    touched = lesion_slices(cfg, "cancer", "A", seed)
    k = s.annotated_slice_index
    assert k in touched and list(touched) == list(range(touched[0], touched[-1] + 1))
    assert 3 <= len(touched) <= 5
    assert s.slices[k].mask.sum() > 0
    background = generate_stack(cfg, "normal", "A", seed).slices[0].image[0, 0]
    peaks = [s.slices[i].image.max() for i in range(s.n_slices)]
    for i in range(s.n_slices):
        if i in touched:
            assert peaks[i] > background
        else:
            assert np.all(s.slices[i].image == background)
    assert peaks[k] == max(peaks)


def test_span_profile_peaks_in_the_middle():
    offsets, weights = span_profile(3)
    assert offsets.tolist() == [-1, 0, 1]
    assert weights.tolist() == pytest.approx([0.5, 1.0, 0.5])
    offsets, weights = span_profile(4)
    assert weights[list(offsets).index(0)] == weights.max()


def test_benign_is_dimmer_than_cancer():
    cfg = flat_config()
    for seed in range(5):
        c = generate_stack(cfg, "cancer", "A", seed)
        b = generate_stack(cfg, "benign", "A", seed)
        assert b.breast_label == 0 and b.annotated_slice_index is None
        assert max(sl.image.max() for sl in b.slices) < max(sl.image.max() for sl in c.slices)


def test_stack_is_deterministic():
    a = generate_stack(SynthConfig(), "cancer", "C", 11)
    b = generate_stack(SynthConfig(), "cancer", "C", 11)
    assert a == b
    assert a != generate_stack(SynthConfig(), "cancer", "C", 12)


def test_unknown_subgroup():
    with pytest.raises(ValueError):
        generate_stack(SynthConfig(), "malignant", "A", 0)


def test_domain_shift_identity():
    img = np.random.default_rng(0).random((32, 32))
    assert np.array_equal(apply_domain_shift(img, IDENTITY), img)


def test_domain_shift_gain():
    out = apply_domain_shift(np.full((4, 4), 0.4), DomainShift(2.0, 0.0, 0.0, 0.0, 0.0))
    assert np.allclose(out, 0.8, atol=1e-15)
    assert apply_domain_shift(np.full((4, 4), 0.7), DomainShift(2.0, 0, 0, 0, 0)).max() == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_domain_shift_noise_level(seed):
    params = DomainShift(1.0, 0.0, 0.0, 0.0, 0.05)
    out = apply_domain_shift(np.full((32, 32), 0.5), params, np.random.default_rng(seed))
    assert 0.03 <= (out - 0.5).std() <= 0.07


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(-0.5, 0.5), st.floats(0, 0.2), st.floats(0, 0.2))
def test_domain_shift_stays_in_range(gain, offset, amp, sigma):
    params = DomainShift(gain, offset, amp, 4.0, sigma)
    img = np.random.default_rng(0).random((8, 8))
    out = apply_domain_shift(img, params, np.random.default_rng(1))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_domain_shift_validation():
    with pytest.raises(ValueError):
        DomainShift(0.0, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        DomainShift(1.0, 0, 0, 0, -0.1)


def test_config_validation():
    with pytest.raises(ValueError, match="lesion_span"):
        SynthConfig(slices_per_stack=(4, 8), lesion_span=(3, 5))
    with pytest.raises(ValueError, match="weak_mode"):
        SynthConfig(weak_mode="PARTIAL")


def test_config_dict_round_trip():
    cfg = SynthConfig()
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


def test_dataset_structure(tiny_synth):
    ds = generate_dataset(tiny_synth, 0)
    assert len(ds) == 27
    for s in ds.stacks:
        level = AnnotationLevel.FULL if s.domain == "A" else AnnotationLevel.WEAK
        assert s.annotation_level is level
        assert ds.eval_truth[s.id] == (ds.subgroup[s.id] == "cancer")
    for d in "ABC":
        for g in ("cancer", "benign", "normal"):
            assert sum(1 for s in ds.stacks if s.domain == d and ds.subgroup[s.id] == g) == 3
    assert set(ds.split.values()) == {"train", "val", "test"}


def test_dataset_weak_mode_none(tiny_synth):
    ds = generate_dataset(dataclasses.replace(tiny_synth, weak_mode="NONE"), 0)
    for s in ds.stacks:
        if s.domain != "A":
            assert s.annotation_level is AnnotationLevel.NONE and s.breast_label is None


def test_dataset_zero_count(tiny_synth):
    counts = {d: dict(c) for d, c in tiny_synth.counts.items()}
    counts["B"]["benign"] = 0
    with pytest.raises(DatasetError, match="count"):
        generate_dataset(dataclasses.replace(tiny_synth, counts=counts), 0)


def test_dataset_trees_byte_identical(tiny_synth, tmp_path):
    save_dataset(generate_dataset(tiny_synth, 4), tmp_path / "a")
    save_dataset(generate_dataset(tiny_synth, 4), tmp_path / "b")
    save_dataset(generate_dataset(tiny_synth, 5), tmp_path / "c")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_derive_seed_stable():
    assert derive_seed(0, "A", "cancer", 1) == derive_seed(0, "A", "cancer", 1)
    assert derive_seed(0, "A", "cancer", 1) != derive_seed(0, "A", "cancer", 2)
    assert 0 <= derive_seed("x") < 2**63


def test_default_domains_shift_progressively():
    gains = [DEFAULT_DOMAINS[d].gain for d in "ABC"]
    noise = [DEFAULT_DOMAINS[d].noise_sigma for d in "ABC"]
    assert gains == sorted(gains, reverse=True) and noise == sorted(noise)
