"""Teacher training, pseudo-label scoring and student distillation."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .datamodel import AnnotationLevel, Dataset
from .losses import LossConfig, per_example_losses, weighted_total
from .model import (
    SGD,
    ArchSpec,
    DivergenceError,
    DualHeadModel,
    OptimizerConfig,
    init_model,
    lr_at,
    parameter_hash,
    predict_scores,
)
from .sampling import (
    PseudoLabelCache,
    SelectionError,
    SliceSelection,
    build_training_selection,
    pseudo_label_scope,
    setting_name,
)
from .synthgen import derive_seed

log = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "lr", "sup_clf", "sup_seg", "kd_clf", "kd_seg", "total")


def configure_determinism(force: bool | None = None) -> bool:
    """Honour ``SKD_DETERMINISTIC=1``: deterministic kernels, one thread."""
    on = force if force is not None else os.environ.get("SKD_DETERMINISTIC") == "1"
    if on:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    return on


# --------------------------------------------------------------------------
# augmentation


@dataclasses.dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    rotate: bool = True
    brightness: float = 0.1  # offset ~ U(-b, b)
    contrast: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "contrast", tuple(self.contrast))
        if not (0 <= self.p_hflip <= 1 and 0 <= self.p_vflip <= 1):
            raise ValueError("flip probabilities must be in [0, 1]")
        if self.brightness < 0 or self.noise_sigma < 0 or self.contrast[0] > self.contrast[1]:
            raise ValueError("invalid photometric augmentation parameters")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, False, 0.0, (1.0, 1.0), 0.0)


@dataclasses.dataclass
class AugmentParams:
    hflip: np.ndarray
    vflip: np.ndarray
    rot_k: np.ndarray
    brightness: np.ndarray
    contrast: np.ndarray
    noise: np.ndarray  # (B, H, W)


def sample_augment_params(rng: np.random.Generator, n: int, shape,
                          cfg: AugmentConfig = AugmentConfig()) -> AugmentParams:
    hflip = rng.random(n) < cfg.p_hflip
    vflip = rng.random(n) < cfg.p_vflip
    rot_k = rng.integers(0, 4, n) if cfg.rotate else np.zeros(n, dtype=np.int64)
    brightness = rng.uniform(-cfg.brightness, cfg.brightness, n)
    contrast = rng.uniform(cfg.contrast[0], cfg.contrast[1], n)
    noise = rng.normal(0.0, 1.0, (n, *shape)) * cfg.noise_sigma
    return AugmentParams(hflip, vflip, rot_k, brightness, contrast, noise)


def apply_geometric(arrays: np.ndarray, p: AugmentParams) -> np.ndarray:
    out = arrays.copy()
    out[p.hflip] = out[p.hflip, :, ::-1]
    out[p.vflip] = out[p.vflip, ::-1, :]
    for k in (1, 2, 3):
        sel = p.rot_k == k
        if sel.any():
            out[sel] = np.rot90(out[sel], k, axes=(1, 2))
    return out


def apply_augment(images: np.ndarray, masks: np.ndarray | None, p: AugmentParams):
    """Geometric ops on images and masks, photometric ops on images only."""
    x = apply_geometric(images, p)
    mean = x.mean(axis=(1, 2), keepdims=True)
    x = (x - mean) * p.contrast[:, None, None] + mean + p.brightness[:, None, None] + p.noise
    x = np.clip(x, 0.0, 1.0)
    return x, (apply_geometric(masks, p) if masks is not None else None)


def augment(x: np.ndarray, mask: np.ndarray | None = None, rng_seed: int = 0,
            cfg: AugmentConfig = AugmentConfig()):
    """One sampled augmentation of a single image (and its mask)."""
    rng = np.random.default_rng(rng_seed)
    x = np.asarray(x, dtype=np.float64)
    p = sample_augment_params(rng, 1, x.shape, cfg)
    xa, ma = apply_augment(x[None], None if mask is None else np.asarray(mask)[None], p)
    return xa[0], (None if ma is None else ma[0])


# --------------------------------------------------------------------------
# training examples


@dataclasses.dataclass
class TrainingExample:
    x: np.ndarray
    x_aug: np.ndarray
    stack_id: str
    slice_index: int
    use_sup_clf: bool
    use_sup_seg: bool
    use_kd: bool
    hard_clf_label: int | None = None
    hard_seg_mask: np.ndarray | None = None


@dataclasses.dataclass
class TrainingArrays:
    """Selection materialized as dense arrays, row-aligned with ``selection``."""

    selection: list[SliceSelection]
    images: np.ndarray  # (N, H, W) float32
    seg_targets: np.ndarray  # (N, H, W) uint8, zeros where unused
    clf_targets: np.ndarray  # (N,) float32, zeros where unused
    use_sup_clf: np.ndarray
    use_sup_seg: np.ndarray
    use_kd: np.ndarray

    def __len__(self):
        return len(self.selection)

    def example(self, i: int, x_aug: np.ndarray | None = None) -> TrainingExample:
        s = self.selection[i]
        return TrainingExample(
            x=self.images[i],
            x_aug=self.images[i] if x_aug is None else x_aug,
            stack_id=s.stack_id,
            slice_index=s.slice_index,
            use_sup_clf=s.use_sup_clf,
            use_sup_seg=s.use_sup_seg,
            use_kd=s.use_kd,
            hard_clf_label=s.hard_clf_label,
            hard_seg_mask=self.seg_targets[i] if s.use_sup_seg else None,
        )


def seg_target_for(ds: Dataset, sel: SliceSelection) -> np.ndarray | None:
    """Segmentation target of a supervised slice.

    Positive FULL stacks reuse the annotated slice's mask on the adjacent
    slices; negative FULL stacks get an empty mask.
    """
    stack = ds[sel.stack_id]
    if stack.annotation_level is not AnnotationLevel.FULL:
        return None
    shape = stack.slices[sel.slice_index].image.shape
    if stack.breast_label == 1:
        return np.asarray(stack.annotated_mask(), dtype=np.uint8)
    return np.zeros(shape, dtype=np.uint8)


def materialize(ds: Dataset, selection: Sequence[SliceSelection]) -> TrainingArrays:
    if not selection:
        raise SelectionError("empty training selection")
    images, segs = [], []
    for sel in selection:
        images.append(ds[sel.stack_id].slices[sel.slice_index].image)
        seg = seg_target_for(ds, sel) if sel.use_sup_seg else None
        if sel.use_sup_seg and seg is None:
            raise SelectionError(f"{sel.stack_id}[{sel.slice_index}]: sup_seg without a mask")
        segs.append(seg if seg is not None else np.zeros_like(images[-1], dtype=np.uint8))
    return TrainingArrays(
        selection=list(selection),
        images=np.stack(images).astype(np.float32),
        seg_targets=np.stack(segs).astype(np.uint8),
        clf_targets=np.array([s.hard_clf_label or 0 for s in selection], dtype=np.float32),
        use_sup_clf=np.array([s.use_sup_clf for s in selection]),
        use_sup_seg=np.array([s.use_sup_seg for s in selection]),
        use_kd=np.array([s.use_kd for s in selection]),
    )


# --------------------------------------------------------------------------
# optimisation loop


def batch_indices(n: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Rows of the batch used at ``iteration``: one seeded permutation per
    epoch, consumed in consecutive full batches."""
    bs = min(batch_size, n)
    per_epoch = n // bs
    epoch, b = divmod(iteration, per_epoch)
    perm = np.random.default_rng([seed, 0xE90C, epoch]).permutation(n)
    return perm[b * bs:(b + 1) * bs]


BatchHook = Callable[[dict], None]


def fit(
    model: DualHeadModel,
    data: TrainingArrays,
    opt_cfg: OptimizerConfig,
    loss_cfg: LossConfig,
    seed: int,
    teacher: DualHeadModel | None = None,
    aug_cfg: AugmentConfig = AugmentConfig(),
    hook: BatchHook | None = None,
) -> list[dict]:
    """Train ``model`` in place; returns one log row per iteration."""
    if model.frozen:
        raise ValueError("cannot train a frozen model")
    if data.use_kd.any() and teacher is None:
        raise ValueError("selection requests KD but no teacher was given")
    if teacher is not None and not teacher.frozen:
        raise ValueError("teacher must be frozen")
    model.train()
    dtype = next(model.parameters()).dtype
    params = [p for p in model.parameters()]
    opt = SGD(params, opt_cfg.momentum, opt_cfg.weight_decay)
    history = []
    shape = data.images.shape[1:]
    for it in range(opt_cfg.total_iterations):
        rows = batch_indices(len(data), opt_cfg.batch_size, seed, it)
        rng = np.random.default_rng([seed, 0xA06, it])
        p = sample_augment_params(rng, len(rows), shape, aug_cfg)
        x_aug, seg_aug = apply_augment(data.images[rows], data.seg_targets[rows], p)
        x = torch.from_numpy(np.ascontiguousarray(x_aug[:, None])).to(dtype)

        kd_rows = data.use_kd[rows]
        t_clf = t_seg = None
        if kd_rows.any():
            with torch.no_grad():
                t_clf, t_seg = teacher(x)
        s_clf, s_seg = model(x)
        comps = per_example_losses(
            s_clf, s_seg,
            use_sup_clf=torch.from_numpy(data.use_sup_clf[rows]),
            use_sup_seg=torch.from_numpy(data.use_sup_seg[rows]),
            use_kd=torch.from_numpy(kd_rows),
            clf_target=torch.from_numpy(data.clf_targets[rows]),
            seg_target=torch.from_numpy(np.ascontiguousarray(seg_aug)),
            teacher_clf=t_clf,
            teacher_seg=t_seg,
        )
        means = {k: v.mean() for k, v in comps.items()}
        total = weighted_total(means, loss_cfg)
        if not torch.isfinite(total):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        grads = torch.autograd.grad(total, params)
        lr = lr_at(it, opt_cfg)
        opt.step(grads, lr)

        row = {"iteration": it, "lr": lr, **{k: float(v.detach()) for k, v in means.items()},
               "total": float(total.detach())}
        history.append(row)
        if hook is not None:
            hook({
                "iteration": it,
                "rows": rows,
                "student_input": x,
                "teacher_input": x if t_clf is not None else None,
                "components": {k: v.detach() for k, v in comps.items()},
                "selection": [data.selection[r] for r in rows],
            })
    model.iteration = opt_cfg.total_iterations
    model.eval()
    return history


def write_train_log(history: Sequence[dict], path: str | os.PathLike):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in history:
            w.writerow([row["iteration"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])


def read_train_log(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            {k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]


# --------------------------------------------------------------------------
# teacher / pseudo labels / student


def train_teacher(
    ds: Dataset,
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    loss_cfg: LossConfig = LossConfig(),
    seed: int = 0,
    arch: ArchSpec = ArchSpec(),
    aug_cfg: AugmentConfig = AugmentConfig(),
) -> DualHeadModel:
    """Baseline: supervised training on the annotated stacks only.  The
    returned model is frozen; its log is in ``model.history``."""
    selection = build_training_selection(ds, "baseline", None, loss_cfg)
    if not selection:
        raise SelectionError("no annotated stacks in the train split; empty selection")
    data = materialize(ds, selection)
    model = init_model(arch, derive_seed(seed, "init"))
    model.history = fit(model, data, opt_cfg, loss_cfg, derive_seed(seed, "teacher"),
                        aug_cfg=aug_cfg)
    model.selection = selection
    return model.freeze()


def compute_pseudo_labels(
    teacher: DualHeadModel,
    ds: Dataset,
    strict_gating: bool = False,
    stack_ids: Sequence[str] | None = None,
) -> PseudoLabelCache:
    """Teacher scores on the clean (non-augmented) slices of every stack in
    the expansion scope."""
    if not teacher.frozen:
        raise ValueError("pseudo labels require a frozen teacher")
    ids = pseudo_label_scope(ds, strict_gating) if stack_ids is None else stack_ids
    cache = PseudoLabelCache()
    for sid in ids:
        stack = ds[sid]
        if not stack.slices:
            raise SelectionError(f"stack {sid} has no slices")
        scores = predict_scores(teacher, stack.images())
        for k, score in enumerate(scores):
            cache[(sid, k)] = score
    return cache


def train_student(
    teacher: DualHeadModel,
    ds: Dataset,
    setting: int | str,
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    loss_cfg: LossConfig = LossConfig(),
    seed: int = 0,
    cache: PseudoLabelCache | None = None,
    warm_start: bool = False,
    aug_cfg: AugmentConfig = AugmentConfig(),
    hook: BatchHook | None = None,
) -> DualHeadModel:
    name = setting_name(setting)
    if name == "baseline":
        raise ValueError("the baseline setting trains a teacher; use train_teacher")
    if cache is None:
        cache = compute_pseudo_labels(teacher, ds, loss_cfg.strict_gating)
    selection = build_training_selection(ds, name, cache, loss_cfg)
    data = materialize(ds, selection)
    if warm_start:
        student = init_model(teacher.arch, derive_seed(seed, "init"))
        student.load_state_dict(teacher.state_dict())
        for p in student.parameters():
            p.requires_grad_(True)
    else:
        student = init_model(teacher.arch, derive_seed(seed, "init"))
    teacher_hash = parameter_hash(teacher)
    student.history = fit(student, data, opt_cfg, loss_cfg, derive_seed(seed, "student", name),
                          teacher=teacher, aug_cfg=aug_cfg, hook=hook)
    if parameter_hash(teacher) != teacher_hash:
        raise RuntimeError("teacher parameters changed during student training")
    student.selection = selection
    return student.freeze()


def save_log(model: DualHeadModel, path: str | os.PathLike):
    write_train_log(getattr(model, "history", []), Path(path))
