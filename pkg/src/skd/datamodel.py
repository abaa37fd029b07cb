"""Stack / slice / annotation types, the on-disk dataset format, splitting and
annotation subsampling.

A dataset directory looks like::

    index.json            schema_version + one entry per stack
    eval_truth.json       stack_id -> breast_label (all stacks, incl. hidden ones)
    stacks/<id>/slice_<k>.pgm
    stacks/<id>/mask_<k>.pgm   (only where a mask exists)

Images are 8-bit binary PGM (P5).  In memory an image is a float64 array of
``uint8 / 255`` so that a save/load round trip is exact.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import os
import re
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")
SUBGROUPS = ("cancer", "benign", "normal")
MIN_SLICES = 12
MAX_SLICES = 24


class DatasetError(ValueError):
    """Raised for malformed datasets or invariant violations."""


class AnnotationLevel(str, enum.Enum):
    FULL = "FULL"  # contour on the most visible slice
    WEAK = "WEAK"  # breast-level label only
    NONE = "NONE"  # no labels exposed to training


@dataclasses.dataclass
class SliceRecord:
    stack_id: str
    index: int
    image: np.ndarray
    mask: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, SliceRecord):
            return NotImplemented
        if (self.stack_id, self.index) != (other.stack_id, other.index):
            return False
        if not np.array_equal(self.image, other.image):
            return False
        if (self.mask is None) != (other.mask is None):
            return False
        return self.mask is None or np.array_equal(self.mask, other.mask)


@dataclasses.dataclass
class StackRecord:
    id: str
    domain: str
    annotation_level: AnnotationLevel
    slices: list[SliceRecord]
    breast_label: int | None = None
    annotated_slice_index: int | None = None

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.slices])

    def annotated_mask(self) -> np.ndarray | None:
        """Mask of the annotated slice, or None if the stack has none."""
        if self.annotated_slice_index is None:
            return None
        return self.slices[self.annotated_slice_index].mask


@dataclasses.dataclass
class Dataset:
    """Stacks plus split/subgroup assignment and the hidden-label sidecar.

    ``eval_truth`` holds the breast label of every stack, including stacks
    whose labels are hidden from training (annotation level NONE).
    """

    stacks: list[StackRecord]
    split: dict[str, str]
    subgroup: dict[str, str]
    eval_truth: dict[str, int]

    def __post_init__(self):
        self._by_id = {s.id: s for s in self.stacks}

    def __getitem__(self, stack_id: str) -> StackRecord:
        return self._by_id[stack_id]

    def __len__(self) -> int:
        return len(self.stacks)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            sorted(self.stacks, key=lambda s: s.id) == sorted(other.stacks, key=lambda s: s.id)
            and self.split == other.split
            and self.subgroup == other.subgroup
            and self.eval_truth == other.eval_truth
        )

    def in_split(self, split: str) -> list[StackRecord]:
        return [s for s in self.stacks if self.split.get(s.id) == split]

    def domains(self) -> list[str]:
        return sorted({s.domain for s in self.stacks})

    def replace_stacks(self, stacks: Iterable[StackRecord]) -> "Dataset":
        return Dataset(
            list(stacks), dict(self.split), dict(self.subgroup), dict(self.eval_truth)
        )

    def training_label(self, stack_id: str) -> int | None:
        """Breast label as visible to training (None for hidden stacks)."""
        stack = self[stack_id]
        if stack.annotation_level is AnnotationLevel.NONE:
            return None
        return stack.breast_label

    def training_mask(self, stack_id: str, index: int) -> np.ndarray | None:
        stack = self[stack_id]
        if stack.annotation_level is not AnnotationLevel.FULL:
            return None
        return stack.slices[index].mask


# --------------------------------------------------------------------------
# validation


def validate_stack(stack: StackRecord, min_slices=MIN_SLICES, max_slices=MAX_SLICES):
    sid = stack.id
    if not (min_slices <= stack.n_slices <= max_slices):
        raise DatasetError(
            f"stack {sid}: {stack.n_slices} slices outside [{min_slices}, {max_slices}]"
        )
    shape = stack.slices[0].image.shape
    for k, sl in enumerate(stack.slices):
        if sl.index != k:
            raise DatasetError(f"stack {sid}: slice indices are not contiguous at {k}")
        if sl.stack_id != sid:
            raise DatasetError(f"stack {sid}: slice {k} carries stack_id {sl.stack_id}")
        if sl.image.ndim != 2 or sl.image.shape != shape:
            raise DatasetError(f"stack {sid}: slice {k} has image shape {sl.image.shape}")
        if sl.image.min() < 0 or sl.image.max() > 1:
            raise DatasetError(f"stack {sid}: slice {k} image values outside [0, 1]")
        if sl.mask is not None:
            if sl.mask.shape != sl.image.shape:
                raise DatasetError(
                    f"stack {sid}: slice {k} mask shape {sl.mask.shape} "
                    f"!= image shape {sl.image.shape}"
                )
            if not np.isin(sl.mask, (0, 1)).all():
                raise DatasetError(f"stack {sid}: slice {k} mask is not binary")

    level = stack.annotation_level
    has_masks = any(sl.mask is not None for sl in stack.slices)
    if stack.breast_label not in (None, 0, 1):
        raise DatasetError(f"stack {sid}: breast_label must be 0, 1 or unset")
    if level is AnnotationLevel.FULL:
        if stack.breast_label is None:
            raise DatasetError(f"stack {sid}: FULL stack without breast_label")
        if stack.breast_label == 1:
            idx = stack.annotated_slice_index
            if idx is None or not (0 <= idx < stack.n_slices):
                raise DatasetError(f"stack {sid}: FULL positive without annotated slice")
            mask = stack.slices[idx].mask
            if mask is None or not mask.any():
                raise DatasetError(f"stack {sid}: annotated slice {idx} has an empty mask")
    elif level is AnnotationLevel.WEAK:
        if stack.breast_label is None:
            raise DatasetError(f"stack {sid}: WEAK stack without breast_label")
        if has_masks:
            raise DatasetError(f"stack {sid}: WEAK stack carries slice masks")
    else:
        if stack.breast_label is not None or has_masks:
            raise DatasetError(f"stack {sid}: NONE stack exposes labels or masks")


def validate_dataset(ds: Dataset, min_slices=MIN_SLICES, max_slices=MAX_SLICES):
    ids = [s.id for s in ds.stacks]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate stack ids")
    for stack in ds.stacks:
        validate_stack(stack, min_slices, max_slices)
        sid = stack.id
        if ds.split.get(sid) not in SPLITS:
            raise DatasetError(f"stack {sid}: missing or invalid split")
        if ds.subgroup.get(sid) not in SUBGROUPS:
            raise DatasetError(f"stack {sid}: missing or invalid subgroup")
        if sid not in ds.eval_truth:
            raise DatasetError(f"stack {sid}: missing evaluation truth")
        if stack.breast_label is not None and stack.breast_label != ds.eval_truth[sid]:
            raise DatasetError(f"stack {sid}: breast_label disagrees with eval truth")
    extra = (set(ds.split) | set(ds.subgroup) | set(ds.eval_truth)) - set(ids)
    if extra:
        raise DatasetError(f"assignments for unknown stacks: {sorted(extra)[:5]}")


# --------------------------------------------------------------------------
# PGM I/O


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(
        np.uint8
    )


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap an image in [0, 1] onto the 8-bit grid used on disk."""
    return to_uint8(image).astype(np.float64) / 255.0


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def decode_pgm(data: bytes, name: str = "<pgm>") -> np.ndarray:
    m = _PGM_HEADER.match(data)
    if m is None:
        raise DatasetError(f"{name}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DatasetError(f"{name}: unsupported maxval {maxval}")
    body = data[m.end():]
    if len(body) != w * h:
        raise DatasetError(f"{name}: expected {w * h} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# --------------------------------------------------------------------------
# save / load


def _index_document(ds: Dataset) -> dict:
    entries = []
    for stack in sorted(ds.stacks, key=lambda s: s.id):
        entry = {
            "id": stack.id,
            "domain": stack.domain,
            "annotation_level": stack.annotation_level.value,
            "n_slices": stack.n_slices,
            "subgroup": ds.subgroup[stack.id],
            "split": ds.split[stack.id],
        }
        if stack.breast_label is not None:
            entry["breast_label"] = stack.breast_label
        if stack.annotated_slice_index is not None:
            entry["annotated_slice_index"] = stack.annotated_slice_index
        entries.append(entry)
    return {"schema_version": SCHEMA_VERSION, "stacks": entries}


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def iter_dataset_files(ds: Dataset) -> Iterator[tuple[str, bytes]]:
    """Yield ``(relative_path, bytes)`` for every file of the saved tree, in a
    fixed order."""
    yield "index.json", _dump_json(_index_document(ds))
    yield "eval_truth.json", _dump_json({k: ds.eval_truth[k] for k in sorted(ds.eval_truth)})
    for stack in sorted(ds.stacks, key=lambda s: s.id):
        for sl in stack.slices:
            yield f"stacks/{stack.id}/slice_{sl.index}.pgm", encode_pgm(to_uint8(sl.image))
            if sl.mask is not None:
                yield (
                    f"stacks/{stack.id}/mask_{sl.index}.pgm",
                    encode_pgm(np.asarray(sl.mask, dtype=np.uint8) * 255),
                )


def save_dataset(ds: Dataset, path: str | os.PathLike) -> Path:
    validate_dataset(ds)
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise PermissionError(f"dataset directory {root} is not writable")
    for rel, data in iter_dataset_files(ds):
        target = root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
    return root


def dataset_fingerprint(ds: Dataset, split: str | None = None) -> str:
    """SHA-256 over the serialized dataset (or over one split of it)."""
    if split is not None:
        keep = {s.id for s in ds.in_split(split)}
        ds = Dataset(
            [s for s in ds.stacks if s.id in keep],
            {k: v for k, v in ds.split.items() if k in keep},
            {k: v for k, v in ds.subgroup.items() if k in keep},
            {k: v for k, v in ds.eval_truth.items() if k in keep},
        )
    digest = hashlib.sha256()
    for rel, data in iter_dataset_files(ds):
        digest.update(rel.encode())
        digest.update(len(data).to_bytes(8, "little"))
        digest.update(data)
    return digest.hexdigest()


def tree_digest(path: str | os.PathLike) -> str:
    """SHA-256 over every file under ``path`` (relative names + contents)."""
    root = Path(path)
    digest = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(f.relative_to(root).as_posix().encode())
        digest.update(f.read_bytes())
    return digest.hexdigest()


def _read_pgm(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file {path}")
    return decode_pgm(path.read_bytes(), str(path))


def load_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    index_path = root / "index.json"
    if not index_path.is_file():
        raise DatasetError(f"missing index.json in {root}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    if index.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"unsupported schema_version {index.get('schema_version')!r}")
    truth_path = root / "eval_truth.json"
    truth = {}
    if truth_path.is_file():
        truth = {k: int(v) for k, v in json.loads(truth_path.read_text("utf-8")).items()}

    stacks, split, subgroup = [], {}, {}
    for entry in index["stacks"]:
        sid = entry["id"]
        stack_dir = root / "stacks" / sid
        n = int(entry["n_slices"])
        listed = sorted(
            int(m.group(1))
            for p in stack_dir.glob("slice_*.pgm")
            if (m := re.fullmatch(r"slice_(\d+)\.pgm", p.name))
        )
        if listed and listed != list(range(len(listed))):
            raise DatasetError(f"stack {sid}: slice indices are not contiguous: {listed}")
        slices = []
        for k in range(n):
            img = _read_pgm(stack_dir / f"slice_{k}.pgm").astype(np.float64) / 255.0
            mask = None
            mask_path = stack_dir / f"mask_{k}.pgm"
            if mask_path.is_file():
                raw = decode_pgm(mask_path.read_bytes(), str(mask_path))
                if raw.shape != img.shape:
                    raise DatasetError(
                        f"stack {sid}: mask_{k}.pgm shape {raw.shape} "
                        f"does not match slice_{k}.pgm shape {img.shape}"
                    )
                if not np.isin(raw, (0, 255)).all():
                    raise DatasetError(f"stack {sid}: mask_{k}.pgm is not binary")
                mask = (raw == 255).astype(np.uint8)
            slices.append(SliceRecord(sid, k, img, mask))
        if len(listed) > n:
            raise DatasetError(f"stack {sid}: {len(listed)} slice files but n_slices={n}")
        label = entry.get("breast_label")
        stacks.append(
            StackRecord(
                id=sid,
                domain=entry["domain"],
                annotation_level=AnnotationLevel(entry["annotation_level"]),
                slices=slices,
                breast_label=None if label is None else int(label),
                annotated_slice_index=entry.get("annotated_slice_index"),
            )
        )
        split[sid] = entry["split"]
        subgroup[sid] = entry["subgroup"]
        if sid not in truth and label is not None:
            truth[sid] = int(label)
    ds = Dataset(stacks, split, subgroup, truth)
    validate_dataset(ds)
    return ds


# --------------------------------------------------------------------------
# splitting and subsampling


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Apportion ``n`` items to ``ratios`` (Hamilton method).

    Leftover items go to the largest fractional parts; ties favour earlier
    positions.
    """
    quotas = [n * r for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    left = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def _seeded_order(ids: Sequence[str], seed: int, salt: str) -> list[str]:
    ids = sorted(ids)
    key = int.from_bytes(hashlib.sha256(salt.encode()).digest()[:4], "little")
    rng = np.random.default_rng([seed, key])
    return [ids[i] for i in rng.permutation(len(ids))]


def split_dataset(
    ds: Dataset,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    by_domain: bool = False,
) -> Dataset:
    """Assign every stack to train/val/test, stratified by subgroup.

    With ``by_domain`` the strata are (domain, subgroup) pairs, which keeps
    every domain represented in every split.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise DatasetError(f"ratios must be three positive values summing to 1, got {ratios}")
    strata: dict[tuple, list[str]] = {}
    for s in ds.stacks:
        key = (s.domain if by_domain else "", ds.subgroup[s.id])
        strata.setdefault(key, []).append(s.id)
    split = {}
    for key in sorted(strata):
        ids = strata[key]
        if len(ids) < 3:
            raise DatasetError(
                f"subgroup {key[1]!r} has {len(ids)} stacks; need at least 3 for three splits"
            )
        counts = largest_remainder(len(ids), ratios)
        order = _seeded_order(ids, seed, "split:" + ":".join(key))
        pos = 0
        for name, c in zip(SPLITS, counts):
            for sid in order[pos:pos + c]:
                split[sid] = name
            pos += c
    return Dataset(list(ds.stacks), split, dict(ds.subgroup), dict(ds.eval_truth))


def downgrade(stack: StackRecord, level: AnnotationLevel) -> StackRecord:
    """Strip annotation from a stack down to ``level`` (WEAK or NONE)."""
    slices = [SliceRecord(sl.stack_id, sl.index, sl.image, None) for sl in stack.slices]
    return dataclasses.replace(
        stack,
        annotation_level=level,
        slices=slices,
        breast_label=stack.breast_label if level is AnnotationLevel.WEAK else None,
        annotated_slice_index=None,
    )


def kept_annotations(ds: Dataset, fraction: float, seed: int) -> set[str]:
    """Ids of FULL train stacks that keep their annotation at ``fraction``.

    Each subgroup is ordered by one seeded permutation and the kept set is a
    prefix of it, so kept sets grow monotonically with ``fraction``.
    """
    if not (0 < fraction <= 1):
        raise DatasetError(f"fraction must be in (0, 1], got {fraction}")
    kept: set[str] = set()
    for group in SUBGROUPS:
        ids = [
            s.id
            for s in ds.in_split("train")
            if s.annotation_level is AnnotationLevel.FULL and ds.subgroup[s.id] == group
        ]
        n_keep = math.floor(fraction * len(ids) + 0.5 + 1e-9)
        kept.update(_seeded_order(ids, seed, "subsample:" + group)[:n_keep])
    return kept


def subsample_annotations(
    ds: Dataset,
    fraction: float,
    seed: int,
    downgrade_to: AnnotationLevel = AnnotationLevel.NONE,
) -> Dataset:
    """Keep annotations on ``fraction`` of each subgroup's FULL train stacks.

    The remaining FULL train stacks are downgraded (to NONE by default, which
    hides their labels; the truth stays in ``eval_truth``).
    """
    kept = kept_annotations(ds, fraction, seed)
    out = []
    for s in ds.stacks:
        if (
            ds.split[s.id] == "train"
            and s.annotation_level is AnnotationLevel.FULL
            and s.id not in kept
        ):
            s = downgrade(s, downgrade_to)
        out.append(s)
    return ds.replace_stacks(out)


def subgroup_counts(ds: Dataset) -> Mapping[tuple[str, str], int]:
    counts: dict[tuple[str, str], int] = {}
    for sid, sp in ds.split.items():
        key = (ds.subgroup[sid], sp)
        counts[key] = counts.get(key, 0) + 1
    return counts
