"""Slice-selection rules for the five training settings.

Settings
--------
1 ``baseline``        FULL stacks only, supervised losses.
2 ``kd``              + WEAK/NONE stacks treated as unannotated, every slice, KD only.
3 ``kd_weak``         + weak labels: negatives like FULL negatives (no seg),
                      positives every slice, KD only.
4 ``selective``       as ``kd`` but unannotated slices filtered on teacher score > t_noweak.
5 ``selective_weak``  as ``kd_weak`` but positive slices filtered on score > t_weak,
                      and the kept slices get a supervised label of 1.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Iterable, Mapping

from .datamodel import AnnotationLevel, Dataset
from .losses import LossConfig

SETTINGS = ("baseline", "kd", "kd_weak", "selective", "selective_weak")
SETTING_NUMBERS = {name: i + 1 for i, name in enumerate(SETTINGS)}
NEGATIVE_STRIDE = 2


class SelectionError(ValueError):
    pass


def setting_name(setting: int | str) -> str:
    if isinstance(setting, int) or (isinstance(setting, str) and setting.isdigit()):
        i = int(setting)
        if not 1 <= i <= len(SETTINGS):
            raise SelectionError(f"unknown setting {setting!r}")
        return SETTINGS[i - 1]
    name = setting.replace("-", "_")
    if name not in SETTINGS:
        raise SelectionError(f"unknown setting {setting!r}")
    return name


@dataclasses.dataclass(frozen=True)
class SliceSelection:
    stack_id: str
    slice_index: int
    use_sup_clf: bool = False
    use_sup_seg: bool = False
    use_kd: bool = False
    hard_clf_label: int | None = None

    def __post_init__(self):
        if not (self.use_sup_clf or self.use_sup_seg or self.use_kd):
            raise SelectionError(f"{self.stack_id}[{self.slice_index}]: no active flag")
        if self.use_sup_clf and self.hard_clf_label is None:
            raise SelectionError(f"{self.stack_id}[{self.slice_index}]: sup_clf without label")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


class PseudoLabelCache(dict):
    """(stack_id, slice_index) -> teacher classification score on the clean slice."""

    def __setitem__(self, key, score):
        score = float(score)
        if not (0.0 <= score <= 1.0):
            raise ValueError(f"score {score} for {key} outside [0, 1]")
        super().__setitem__((str(key[0]), int(key[1])), score)

    def stack_scores(self, stack_id: str, n_slices: int) -> dict[int, float]:
        missing = [k for k in range(n_slices) if (stack_id, k) not in self]
        if missing:
            raise SelectionError(f"pseudo-label cache misses {stack_id} slices {missing[:5]}")
        return {k: self[(stack_id, k)] for k in range(n_slices)}

    def save(self, path: str | os.PathLike):
        rows = [[sid, k, self[(sid, k)]] for sid, k in sorted(self)]
        Path(path).write_text(json.dumps(rows) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PseudoLabelCache":
        cache = cls()
        for sid, k, score in json.loads(Path(path).read_text(encoding="utf-8")):
            cache[(sid, k)] = score
        return cache


def expand_annotated_indices(annotated_index: int, n_slices: int) -> list[int]:
    if not (0 <= annotated_index < n_slices):
        raise SelectionError(f"annotated index {annotated_index} outside [0, {n_slices})")
    return [k for k in (annotated_index - 1, annotated_index, annotated_index + 1)
            if 0 <= k < n_slices]


def strided_indices(n_slices: int, stride: int, offset: int = 0) -> list[int]:
    if stride < 1 or not (0 <= offset < stride):
        raise SelectionError(f"invalid stride/offset ({stride}, {offset})")
    return list(range(offset, n_slices, stride))


def pl_select(scores: Mapping[int, float], threshold: float) -> list[int]:
    """Indices whose score is strictly above ``threshold``."""
    return sorted(k for k, s in scores.items() if s > threshold)


def pseudo_label_scope(ds: Dataset, strict_gating: bool = False) -> list[str]:
    """Train stacks whose slices need a teacher score."""
    levels = {AnnotationLevel.WEAK, AnnotationLevel.NONE}
    if strict_gating:
        levels.add(AnnotationLevel.FULL)
    return [s.id for s in ds.in_split("train") if s.annotation_level in levels]


def build_training_selection(
    ds: Dataset,
    setting: int | str,
    pl_cache: PseudoLabelCache | None = None,
    cfg: LossConfig = LossConfig(),
) -> list[SliceSelection]:
    name = setting_name(setting)
    teacher = name != "baseline"
    if teacher and pl_cache is None:
        raise SelectionError(f"setting {name} requires a pseudo-label cache")
    use_weak_labels = name in ("kd_weak", "selective_weak")
    selective = name in ("selective", "selective_weak")
    gate_full = selective and cfg.strict_gating
    full_threshold = cfg.t_weak if name == "selective_weak" else cfg.t_noweak

    out: list[SliceSelection] = []
    for stack in sorted(ds.in_split("train"), key=lambda s: s.id):
        sid, n = stack.id, stack.n_slices
        level = stack.annotation_level
        label = stack.breast_label if level is not AnnotationLevel.NONE else None

        if level is AnnotationLevel.FULL:
            if label == 1:
                idx = expand_annotated_indices(stack.annotated_slice_index, n)
            else:
                idx = strided_indices(n, NEGATIVE_STRIDE, 0)
            if gate_full:
                kept = set(pl_select(pl_cache.stack_scores(sid, n), full_threshold))
                idx = [k for k in idx if k in kept]
            out += [SliceSelection(sid, k, True, True, teacher, label) for k in idx]
            continue

        if not teacher:
            continue
        scores = pl_cache.stack_scores(sid, n)

        if level is AnnotationLevel.WEAK and use_weak_labels:
            if label == 0:
                idx = strided_indices(n, NEGATIVE_STRIDE, 0)
                out += [SliceSelection(sid, k, True, False, True, 0) for k in idx]
            elif name == "selective_weak":
                idx = pl_select(scores, cfg.t_weak)
                out += [SliceSelection(sid, k, True, False, True, 1) for k in idx]
            else:
                out += [SliceSelection(sid, k, use_kd=True) for k in range(n)]
            continue

        # unannotated: WEAK with labels ignored, or NONE
        idx = pl_select(scores, cfg.t_noweak) if selective else list(range(n))
        out += [SliceSelection(sid, k, use_kd=True) for k in idx]
    return out


def write_manifest(selection: Iterable[SliceSelection], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text("".join(s.to_json() + "\n" for s in selection), encoding="utf-8")
    return path


def read_manifest(path: str | os.PathLike) -> list[SliceSelection]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [SliceSelection(**json.loads(line)) for line in lines if line.strip()]
