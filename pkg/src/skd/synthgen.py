"""Synthetic DBT-like slice stacks.

Each stack is a smooth 3-D background field with an optional Gaussian blob
that is visible on a short run of consecutive slices.  Three domains emulate
different device manufacturers through gain, periodic texture and noise.
"""

from __future__ import annotations

import dataclasses
import hashlib
from typing import Mapping

import numpy as np
from scipy import ndimage

from .datamodel import (
    AnnotationLevel,
    Dataset,
    DatasetError,
    SliceRecord,
    StackRecord,
    SUBGROUPS,
    quantize,
    split_dataset,
)


@dataclasses.dataclass(frozen=True)
class DomainShift:
    gain: float = 1.0
    offset: float = 0.0
    texture_amplitude: float = 0.0
    texture_frequency: float = 0.0  # cycles per image width
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("contrast gain must be positive")
        if self.noise_sigma < 0 or self.texture_amplitude < 0:
            raise ValueError("noise sigma and texture amplitude must be >= 0")


DEFAULT_DOMAINS = {
    "A": DomainShift(gain=1.0, offset=0.0, texture_amplitude=0.0, texture_frequency=0.0,
                     noise_sigma=0.02),
    "B": DomainShift(gain=0.75, offset=0.05, texture_amplitude=0.06, texture_frequency=4.0,
                     noise_sigma=0.05),
    "C": DomainShift(gain=0.6, offset=0.1, texture_amplitude=0.09, texture_frequency=6.0,
                     noise_sigma=0.07),
}


def _default_counts():
    return {d: {g: 30 for g in SUBGROUPS} for d in DEFAULT_DOMAINS}


@dataclasses.dataclass
class SynthConfig:
    image_size: tuple[int, int] = (32, 32)
    slices_per_stack: tuple[int, int] = (12, 24)
    lesion_span: tuple[int, int] = (3, 5)
    lesion_radius: tuple[float, float] = (1.5, 2.5)
    lesion_contrast: float = 0.4
    benign_contrast: tuple[float, float] = (0.4, 0.6)  # fraction of lesion_contrast
    background_mean: float = 0.4
    background_structure: float = 0.05
    noise_floor: float = 0.01
    counts: dict = dataclasses.field(default_factory=_default_counts)
    domains: dict = dataclasses.field(default_factory=lambda: dict(DEFAULT_DOMAINS))
    annotated_domains: tuple[str, ...] = ("A",)
    weak_mode: str = "WEAK"
    split_ratios: tuple[float, float, float] = (0.5, 0.1, 0.4)

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.slices_per_stack = tuple(self.slices_per_stack)
        self.lesion_span = tuple(self.lesion_span)
        self.lesion_radius = tuple(self.lesion_radius)
        self.benign_contrast = tuple(self.benign_contrast)
        self.annotated_domains = tuple(self.annotated_domains)
        self.split_ratios = tuple(self.split_ratios)
        self.domains = {
            k: v if isinstance(v, DomainShift) else DomainShift(**v)
            for k, v in self.domains.items()
        }
        self.validate()

    def validate(self):
        lo, hi = self.slices_per_stack
        if not (1 <= lo <= hi):
            raise ValueError(f"invalid slices_per_stack {self.slices_per_stack}")
        if not (1 <= self.lesion_span[0] <= self.lesion_span[1] <= lo):
            raise ValueError("lesion_span max must not exceed slices_per_stack min")
        if self.noise_floor < 0 or self.background_structure < 0:
            raise ValueError("noise parameters must be >= 0")
        if self.weak_mode not in ("WEAK", "NONE"):
            raise ValueError(f"weak_mode must be WEAK or NONE, got {self.weak_mode!r}")
        for domain in self.counts:
            if domain not in self.domains:
                raise ValueError(f"counts reference unknown domain {domain!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("image_size", "slices_per_stack", "lesion_span", "lesion_radius",
                  "benign_contrast", "annotated_domains", "split_ratios"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        return cls(**dict(d))


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def apply_domain_shift(
    image: np.ndarray,
    params: DomainShift,
    rng: np.random.Generator | None = None,
    texture_phase: tuple[float, float] | None = None,
) -> np.ndarray:
    """``clip(gain * image + offset + texture + noise, 0, 1)``.

    ``texture_phase`` is (orientation, phase) of the periodic texture; it is
    drawn from ``rng`` when omitted.
    """
    image = np.asarray(image, dtype=np.float64)
    out = params.gain * image + params.offset
    if params.texture_amplitude > 0:
        if texture_phase is None:
            texture_phase = tuple(rng.uniform(0, np.pi, 2))
        theta, phi = texture_phase
        h, w = image.shape
        yy, xx = np.mgrid[0:h, 0:w]
        proj = (xx * np.cos(theta) + yy * np.sin(theta)) / w
        out = out + params.texture_amplitude * np.sin(
            2 * np.pi * params.texture_frequency * proj + 2 * phi
        )
    if params.noise_sigma > 0:
        out = out + rng.normal(0.0, params.noise_sigma, image.shape)
    return np.clip(out, 0.0, 1.0)


def _blob(shape, center, radius):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    r2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    return np.exp(-r2 / (2.0 * radius**2))


def span_profile(span: int) -> tuple[np.ndarray, np.ndarray]:
    """Slice offsets relative to the peak slice and their triangular weights."""
    half = span // 2
    offsets = np.arange(-half, span - half)
    weights = 1.0 - np.abs(offsets) / (half + 1.0)
    return offsets, weights


@dataclasses.dataclass
class _Rendered:
    images: list
    lesion_slices: tuple[int, ...]
    center_slice: int | None
    mask: np.ndarray | None


def _render(cfg: SynthConfig, subgroup: str, domain: str, rng_seed: int) -> _Rendered:
    if subgroup not in SUBGROUPS:
        raise ValueError(f"unknown subgroup {subgroup!r}")
    if domain not in cfg.domains:
        raise ValueError(f"unknown domain {domain!r}")
    rng = np.random.default_rng(rng_seed)
    h, w = cfg.image_size
    n = int(rng.integers(cfg.slices_per_stack[0], cfg.slices_per_stack[1] + 1))

    field = rng.normal(size=(n, h, w))
    field = ndimage.gaussian_filter(field, sigma=(1.0, 2.0, 2.0), mode="wrap")
    field /= field.std() + 1e-12
    volume = cfg.background_mean + cfg.background_structure * field

    mask = None
    center_slice = None
    touched: tuple[int, ...] = ()
    if subgroup != "normal":
        span = int(rng.integers(cfg.lesion_span[0], cfg.lesion_span[1] + 1))
        offsets, weights = span_profile(span)
        center_slice = int(rng.integers(-offsets[0], n - offsets[-1]))
        radius = float(rng.uniform(*cfg.lesion_radius))
        margin = int(np.ceil(2 * radius)) + 1
        center = (int(rng.integers(margin, h - margin)), int(rng.integers(margin, w - margin)))
        contrast = cfg.lesion_contrast
        if subgroup == "benign":
            contrast *= float(rng.uniform(*cfg.benign_contrast))
        bump = _blob((h, w), center, radius)
        for off, wt in zip(offsets, weights):
            volume[center_slice + off] += contrast * wt * bump
        touched = tuple(int(center_slice + o) for o in offsets)
        if subgroup == "cancer":
            mask = (bump > 0.5).astype(np.uint8)

    if cfg.noise_floor:
        volume = volume + rng.normal(0.0, cfg.noise_floor, volume.shape)
    volume = np.clip(volume, 0.0, 1.0)

    shift = cfg.domains[domain]
    phase = tuple(rng.uniform(0, np.pi, 2))
    noise_rng = np.random.default_rng([rng_seed, 1])
    images = [quantize(apply_domain_shift(volume[k], shift, noise_rng, phase)) for k in range(n)]
    return _Rendered(images, touched, center_slice, mask)


def generate_stack(
    cfg: SynthConfig,
    subgroup: str,
    domain: str,
    rng_seed: int,
    stack_id: str | None = None,
    annotation_level: AnnotationLevel = AnnotationLevel.FULL,
) -> StackRecord:
    r = _render(cfg, subgroup, domain, rng_seed)
    sid = stack_id or f"{domain}-{subgroup}-{rng_seed}"
    slices = [SliceRecord(sid, k, img, None) for k, img in enumerate(r.images)]
    label = 1 if subgroup == "cancer" else 0
    annotated = None
    if subgroup == "cancer" and annotation_level is AnnotationLevel.FULL:
        annotated = r.center_slice
        slices[annotated].mask = r.mask
    return StackRecord(
        id=sid,
        domain=domain,
        annotation_level=annotation_level,
        slices=slices,
        breast_label=None if annotation_level is AnnotationLevel.NONE else label,
        annotated_slice_index=annotated,
    )


def lesion_slices(cfg: SynthConfig, subgroup: str, domain: str, rng_seed: int) -> tuple[int, ...]:
    """Slices touched by the blob of the stack built from the same arguments."""
    return _render(cfg, subgroup, domain, rng_seed).lesion_slices


def generate_dataset(cfg: SynthConfig, seed: int) -> Dataset:
    weak_level = AnnotationLevel(cfg.weak_mode)
    stacks, subgroup, truth = [], {}, {}
    for domain in sorted(cfg.counts):
        for group in SUBGROUPS:
            count = int(cfg.counts[domain].get(group, 0))
            if count <= 0:
                raise DatasetError(f"count for ({domain}, {group}) must be positive")
            level = AnnotationLevel.FULL if domain in cfg.annotated_domains else weak_level
            for i in range(count):
                sid = f"{domain}-{group}-{i:04d}"
                stack = generate_stack(
                    cfg, group, domain, derive_seed(seed, domain, group, i), sid, level
                )
                stacks.append(stack)
                subgroup[sid] = group
                truth[sid] = 1 if group == "cancer" else 0
    ds = Dataset(stacks, {s.id: "train" for s in stacks}, subgroup, truth)
    return split_dataset(ds, cfg.split_ratios, seed, by_domain=True)
