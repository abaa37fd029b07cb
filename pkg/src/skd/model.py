"""Dual-head convolutional scorer, cosine learning-rate schedule, momentum SGD
and self-describing checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import os
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"SKDCKPT1"


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclasses.dataclass(frozen=True)
class ArchSpec:
    """Backbone descriptor.

    ``depth`` conv blocks, the first ``depth - 1`` followed by 2x max-pooling;
    block ``i`` has ``width * 2**i`` channels.  The segmentation head predicts
    at ``1 / 2**(depth-1)`` resolution and is bilinearly upsampled to the input
    size.
    """

    width: int = 8
    depth: int = 3
    input_size: tuple[int, int] = (32, 32)
    norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        if self.width < 1 or not (1 <= self.depth <= 5):
            raise ValueError(f"invalid architecture: width={self.width}, depth={self.depth}")
        f = 2 ** (self.depth - 1)
        if any(s % f for s in self.input_size):
            raise ValueError(f"input size {self.input_size} not divisible by {f}")

    def to_dict(self) -> dict:
        return {"width": self.width, "depth": self.depth,
                "input_size": list(self.input_size), "norm": self.norm}


@dataclasses.dataclass
class OptimizerConfig:
    base_lr: float = 0.012
    momentum: float = 0.9
    weight_decay: float = 1e-4
    total_iterations: int = 3000
    batch_size: int = 32

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not (0 <= self.momentum < 1):
            raise ValueError("momentum must be in [0, 1)")
        if self.total_iterations < 1 or self.batch_size < 1:
            raise ValueError("total_iterations and batch_size must be >= 1")


def _groups(channels: int) -> int:
    return math.gcd(channels, 4)


class DualHeadModel(nn.Module):
    def __init__(self, arch: ArchSpec = ArchSpec()):
        super().__init__()
        self.arch = arch
        self.seed: int | None = None
        self.iteration = 0
        self.frozen = False
        blocks = []
        c_in = 1
        for i in range(arch.depth):
            c = arch.width * 2**i
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c, 3, padding=1),
                    nn.GroupNorm(_groups(c), c) if arch.norm else nn.Identity(),
                    nn.ReLU(),
                )
            )
            c_in = c
        self.blocks = nn.ModuleList(blocks)
        self.clf_head = nn.Linear(2 * c_in, 1)
        self.seg_head = nn.Conv2d(c_in, 1, 1)

    def logits(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = x
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < len(self.blocks) - 1:
                h = F.max_pool2d(h, 2)
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        clf = self.clf_head(pooled).squeeze(1)
        seg = self.seg_head(h)
        if seg.shape[-2:] != x.shape[-2:]:
            seg = F.interpolate(seg, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return clf, seg.squeeze(1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``x``: (B, 1, H, W) -> (clf prob (B,), seg prob map (B, H, W))."""
        clf, seg = self.logits(x)
        return torch.sigmoid(clf), torch.sigmoid(seg)

    def freeze(self) -> "DualHeadModel":
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


def init_model(arch: ArchSpec | dict = ArchSpec(), seed: int = 0,
               dtype: torch.dtype = torch.float32) -> DualHeadModel:
    if isinstance(arch, dict):
        arch = ArchSpec(**arch)
    gen = torch.Generator().manual_seed(int(seed))
    model = DualHeadModel(arch)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                fan_in = module.weight[0].numel()
                std = math.sqrt(2.0 / fan_in)
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * std)
                module.bias.zero_()
        model.clf_head.weight.mul_(0.1)
        model.seg_head.weight.mul_(0.1)
    model.seed = int(seed)
    return model.to(dtype)


def _as_batch(images, model: DualHeadModel) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=next(model.parameters()).dtype)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if tuple(x.shape[-2:]) != model.arch.input_size:
        raise ValueError(
            f"image shape {tuple(x.shape[-2:])} does not match model input {model.arch.input_size}"
        )
    return x


def forward(model: DualHeadModel, image) -> tuple[float, np.ndarray]:
    """Score one H x W image: (classification probability, segmentation map)."""
    with torch.no_grad():
        clf, seg = model(_as_batch(image, model))
    return float(clf[0]), seg[0].numpy().astype(np.float64)


def predict_scores(model: DualHeadModel, images, batch_size: int = 256) -> np.ndarray:
    """Classification probabilities for a stack of images, shape (N,)."""
    images = np.asarray(images)
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            clf, _ = model(_as_batch(images[start:start + batch_size], model))
            out.append(clf.double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def lr_at(t: int, cfg: OptimizerConfig) -> float:
    """Cosine-annealed learning rate at iteration ``t`` (0 <= t <= total)."""
    if not (0 <= t <= cfg.total_iterations):
        raise ValueError(f"iteration {t} outside [0, {cfg.total_iterations}]")
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * t / cfg.total_iterations))


class SGD:
    """Momentum SGD with weight decay folded into the gradient.

    v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v
    """

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = [p for p in params]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, grads, lr: float):
        grads = list(grads)
        for i, g in enumerate(grads):
            if g is None:
                continue
            if not torch.isfinite(g).all():
                bad = int((~torch.isfinite(g)).sum())
                raise DivergenceError(
                    f"non-finite gradient in parameter {i} "
                    f"(shape {tuple(g.shape)}, {bad} bad entries)"
                )
        for p, v, g in zip(self.params, self.velocity, grads):
            if g is None:
                continue
            d = g + self.weight_decay * p if self.weight_decay else g
            v.mul_(self.momentum).add_(d)
            p.sub_(lr * v)


def sgd_update(params, grads, lr: float, momentum: float, weight_decay: float,
               velocity=None):
    """Functional single step; returns the new velocity list."""
    opt = SGD(params, momentum, weight_decay)
    if velocity is not None:
        opt.velocity = [v.clone() for v in velocity]
    opt.step(grads, lr)
    return opt.velocity


def parameter_hash(model: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, t in model.state_dict().items():
        digest.update(name.encode())
        digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# --------------------------------------------------------------------------
# checkpoints: magic | u32 header length | JSON header | raw tensor bytes


def checkpoint_bytes(model: DualHeadModel, extra: dict | None = None) -> bytes:
    state = model.state_dict()
    tensors, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().contiguous().numpy()
        blobs.append(arr.tobytes())
        tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "arch": model.arch.to_dict(),
        "seed": model.seed,
        "iteration": model.iteration,
        "frozen": model.frozen,
        "tensors": tensors,
    }
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(blobs)


def save_checkpoint(model: DualHeadModel, path: str | os.PathLike, extra: dict | None = None):
    Path(path).write_bytes(checkpoint_bytes(model, extra))


def read_checkpoint_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as f:
        head = f.read(len(CHECKPOINT_MAGIC) + 4)
        if head[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<I", head[len(CHECKPOINT_MAGIC):])
        return json.loads(f.read(n))


def load_checkpoint(path: str | os.PathLike) -> DualHeadModel:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    buf = io.BytesIO(data[len(CHECKPOINT_MAGIC):])
    (n,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(n))
    body = buf.read()
    model = DualHeadModel(ArchSpec(**header["arch"]))
    state = {}
    for t in header["tensors"]:
        raw = body[t["offset"]: t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
        state[t["name"]] = torch.from_numpy(arr)
    dtype = next(iter(state.values())).dtype
    model.to(dtype).load_state_dict(state)
    model.seed = header.get("seed")
    model.iteration = header.get("iteration", 0)
    if header.get("frozen"):
        model.freeze()
    return model
