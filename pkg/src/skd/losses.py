"""Supervised (BCE) and distillation (MSE) losses and their gated combination."""

from __future__ import annotations

import dataclasses

import torch

EPS = 1e-7


@dataclasses.dataclass
class LossConfig:
    t_weak: float = 0.1
    t_noweak: float = 0.7
    alpha_clf: float = 1.0
    alpha_seg: float = 25.0
    strict_gating: bool = False

    def __post_init__(self):
        for name in ("t_weak", "t_noweak"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.alpha_clf < 0 or self.alpha_seg < 0:
            raise ValueError("alpha weights must be >= 0")


@dataclasses.dataclass
class LossBreakdown:
    sup_clf: torch.Tensor
    sup_seg: torch.Tensor
    kd_clf: torch.Tensor
    kd_seg: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in dataclasses.fields(self)}


def _pair(target, prediction):
    if isinstance(prediction, torch.Tensor):
        p = prediction if prediction.is_floating_point() else prediction.double()
    else:
        p = torch.as_tensor(prediction, dtype=torch.float64)
    t = torch.as_tensor(target, dtype=p.dtype)
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch: target {tuple(t.shape)} vs prediction {tuple(p.shape)}")
    return t, p


def _bce_terms(target: torch.Tensor, prediction: torch.Tensor) -> torch.Tensor:
    p = prediction.clamp(EPS, 1.0 - EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))


def bce(target, prediction) -> torch.Tensor:
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    t, p = _pair(target, prediction)
    return _bce_terms(t, p).mean()


def mse_kd(teacher_output, student_output) -> torch.Tensor:
    t, s = _pair(teacher_output, student_output)
    return ((s - t) ** 2).mean()


def per_example_losses(
    student_clf: torch.Tensor,
    student_seg: torch.Tensor,
    *,
    use_sup_clf: torch.Tensor,
    use_sup_seg: torch.Tensor,
    use_kd: torch.Tensor,
    clf_target: torch.Tensor | None = None,
    seg_target: torch.Tensor | None = None,
    teacher_clf: torch.Tensor | None = None,
    teacher_seg: torch.Tensor | None = None,
) -> dict[str, torch.Tensor]:
    """Unweighted loss components per example, shape (B,) each.

    Inactive components are exactly zero.  Rows whose flag is off may carry
    arbitrary (finite) targets; they are masked out.
    """
    zeros = torch.zeros_like(student_clf)
    flags = {k: torch.as_tensor(v, dtype=torch.bool)
             for k, v in (("sup_clf", use_sup_clf), ("sup_seg", use_sup_seg), ("kd", use_kd))}
    if flags["sup_clf"].any() and clf_target is None:
        raise ValueError("use_sup_clf set without a classification target")
    if flags["sup_seg"].any() and seg_target is None:
        raise ValueError("use_sup_seg set without a segmentation target")
    if flags["kd"].any() and (teacher_clf is None or teacher_seg is None):
        raise ValueError("use_kd set without teacher outputs")

    out = {}
    if clf_target is not None:
        terms = _bce_terms(clf_target.to(student_clf.dtype), student_clf)
        out["sup_clf"] = torch.where(flags["sup_clf"], terms, zeros)
    else:
        out["sup_clf"] = zeros
    if seg_target is not None:
        terms = _bce_terms(seg_target.to(student_seg.dtype), student_seg).flatten(1).mean(1)
        out["sup_seg"] = torch.where(flags["sup_seg"], terms, zeros)
    else:
        out["sup_seg"] = zeros
    if teacher_clf is not None and teacher_seg is not None:
        kd_c = (student_clf - teacher_clf.to(student_clf.dtype)) ** 2
        kd_s = ((student_seg - teacher_seg.to(student_seg.dtype)) ** 2).flatten(1).mean(1)
        out["kd_clf"] = torch.where(flags["kd"], kd_c, zeros)
        out["kd_seg"] = torch.where(flags["kd"], kd_s, zeros)
    else:
        out["kd_clf"] = zeros
        out["kd_seg"] = zeros
    return out


def weighted_total(components: dict[str, torch.Tensor], cfg: LossConfig) -> torch.Tensor:
    return (
        components["sup_clf"]
        + components["sup_seg"]
        + cfg.alpha_clf * components["kd_clf"]
        + cfg.alpha_seg * components["kd_seg"]
    )


def combined_loss(student_clf, student_seg, cfg: LossConfig, **kwargs) -> LossBreakdown:
    """Batch loss: every component is averaged over the batch, then
    ``total = sup_clf + sup_seg + alpha_clf * kd_clf + alpha_seg * kd_seg``."""
    comps = {k: v.mean() for k, v in per_example_losses(student_clf, student_seg, **kwargs).items()}
    return LossBreakdown(total=weighted_total(comps, cfg), **comps)


def example_loss(example, teacher_outputs, student_outputs, cfg: LossConfig) -> LossBreakdown:
    """Loss for a single :class:`~skd.train.TrainingExample`.

    ``teacher_outputs`` / ``student_outputs`` are (clf prob, seg map) pairs
    evaluated on the example's augmented view.
    """
    s_clf, s_seg = (torch.as_tensor(v, dtype=torch.float64) for v in student_outputs)
    kwargs = dict(
        use_sup_clf=torch.tensor([example.use_sup_clf]),
        use_sup_seg=torch.tensor([example.use_sup_seg]),
        use_kd=torch.tensor([example.use_kd]),
    )
    if example.use_sup_clf:
        if example.hard_clf_label is None:
            raise ValueError("use_sup_clf set without hard_clf_label")
        kwargs["clf_target"] = torch.tensor([float(example.hard_clf_label)])
    if example.use_sup_seg:
        if example.hard_seg_mask is None:
            raise ValueError("use_sup_seg set without hard_seg_mask")
        kwargs["seg_target"] = torch.as_tensor(example.hard_seg_mask, dtype=torch.float64)[None]
    if example.use_kd:
        if teacher_outputs is None:
            raise ValueError("use_kd set without teacher outputs")
        t_clf, t_seg = (torch.as_tensor(v, dtype=torch.float64) for v in teacher_outputs)
        kwargs["teacher_clf"] = t_clf.reshape(1)
        kwargs["teacher_seg"] = t_seg[None]
    return combined_loss(s_clf.reshape(1), s_seg[None], cfg, **kwargs)
