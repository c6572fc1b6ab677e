"""Convolutional patch encoders (student and teacher) and the EMA teacher."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import CLASS_COLORS, N_CLASSES, SOURCE_COLORS, SlideConfig, extract_context_windows, generate_slide, render, tissue_filter
from .nn import Conv2d, Linear, Module
from .optim import AdamW
from .rng import derive_seed, stream
from .tensor import DimensionError, Tensor, TrainingDivergence


@dataclass(frozen=True)
class EncoderSpec:
    channels: tuple[int, ...]
    kernels: tuple[int, ...]
    out_dim: int
    patch: int = 16
    in_ch: int = 3

    def stage_sizes(self) -> list[int]:
        """Spatial side after each conv+pool stage."""
        side, out = self.patch, []
        for k in self.kernels:
            side = (side - k + 1) // 2
            out.append(side)
        return out

    def flat_dim(self) -> int:
        return self.stage_sizes()[-1] ** 2 * self.channels[-1]

    def param_count(self) -> int:
        n, cin = 0, self.in_ch
        for c, k in zip(self.channels, self.kernels):
            n += c * cin * k * k + c
            cin = c
        return n + self.flat_dim() * self.out_dim + self.out_dim

    def flops_per_patch(self) -> int:
        """Multiply-adds of convolutions and head, counted analytically."""
        side, cin, total = self.patch, self.in_ch, 0
        for c, k in zip(self.channels, self.kernels):
            conv_side = side - k + 1
            total += conv_side * conv_side * c * cin * k * k
            side, cin = conv_side // 2, c
        return total + self.flat_dim() * self.out_dim


STUDENT_SPEC = EncoderSpec(channels=(8,), kernels=(3,), out_dim=64)
TEACHER_SPEC = EncoderSpec(channels=(16, 32), kernels=(3, 2), out_dim=128)


class PatchEncoder(Module):
    """Conv stages (conv, GELU, 2x2 mean pool) followed by a linear head."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator):
        if min(spec.stage_sizes()) < 1:
            raise DimensionError(f"encoder stages {spec.kernels} do not fit patch side {spec.patch}")
        self._spec = spec
        cin, stages = spec.in_ch, []
        for c, k in zip(spec.channels, spec.kernels):
            stages.append(Conv2d(cin, c, k, rng))
            cin = c
        self.stages = stages
        self.head = Linear(spec.flat_dim(), spec.out_dim, rng)

    @property
    def spec(self) -> EncoderSpec:
        return self._spec

    @property
    def out_dim(self) -> int:
        return self._spec.out_dim

    def __call__(self, patches) -> Tensor:
        """``patches``: array or tensor ``(n, p, p, c)``; returns ``(n, out_dim)``."""
        x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=np.float64))
        if x.ndim != 4 or x.shape[1:] != (self._spec.patch, self._spec.patch, self._spec.in_ch):
            raise DimensionError(f"encoder expects (n, {self._spec.patch}, {self._spec.patch}, "
                                 f"{self._spec.in_ch}) patches, got {x.shape}")
        h = T.transpose(x, (0, 3, 1, 2))
        for conv in self.stages:
            h = T.mean_pool2d(T.gelu(conv(h)))
        h = T.reshape(h, (h.shape[0], -1))
        return self.head(h)

    def encode(self, patches: np.ndarray, chunk: int = 1024) -> np.ndarray:
        """Features without recording a tape."""
        flags = [p.requires_grad for p in self.parameters()]
        for p in self.parameters():
            p.requires_grad = False
        try:
            parts = [self(patches[i:i + chunk]).data for i in range(0, len(patches), chunk)]
        finally:
            for p, f in zip(self.parameters(), flags):
                p.requires_grad = f
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, self.out_dim))


def encode_patches(enc: PatchEncoder, window) -> Tensor:
    """Feature sequence ``(s*s, out_dim)`` of a context window, in grid order."""
    return enc(window.patches)


def clone(enc: PatchEncoder) -> PatchEncoder:
    return copy.deepcopy(enc)


# -- supervised proxy pretraining ------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    n_slides: int = 24
    noise: float = 0.05
    steps: int = 600
    batch: int = 64
    lr: float = 3e-3
    eval_every: int = 100
    target_acc: float = 0.95
    min_acc: float = 0.80
    n_heldout: int = 1000
    source_stain: bool = False


def patch_pool(slide_cfg: SlideConfig, seed: int, n_slides: int, noise: float,
               colors: np.ndarray = CLASS_COLORS, s: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """All tissue-window patches of ``n_slides`` fresh slides with their class ids.

    Slides are rendered with the given ``noise`` and stain ``colors``.
    """
    xs, ys = [], []
    for i in range(n_slides):
        sseed = derive_seed(seed, "pool-slide", i)
        slide = generate_slide(slide_cfg, sseed)
        slide.pixels = render(slide.grid, sseed, slide_cfg.patch, noise, slide_cfg.blend, colors)
        for w in tissue_filter(extract_context_windows(slide, s, slide_cfg.patch)):
            xs.append(w.patches)
            ys.append(w.classes)
    return np.concatenate(xs), np.concatenate(ys)


def _balanced_indices(labels: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    per = [np.flatnonzero(labels == c) for c in range(N_CLASSES)]
    per = [p for p in per if len(p)]
    cls = rng.integers(len(per), size=n)
    return np.array([per[c][rng.integers(len(per[c]))] for c in cls])


def pretrain_encoder(spec: EncoderSpec, slide_cfg: SlideConfig, cfg: PretrainConfig, seed: int,
                     role: str = "encoder") -> tuple[PatchEncoder, dict]:
    """Train ``spec`` as a 4-way patch classifier and return it frozen.

    Stops early once held-out accuracy reaches ``cfg.target_acc``; raises
    :class:`TrainingDivergence` if it ends below ``cfg.min_acc``.
    """
    enc = PatchEncoder(spec, stream(seed, role, "init"))
    clf = Linear(spec.out_dim, N_CLASSES, stream(seed, role, "clf-init"))
    colors = SOURCE_COLORS if cfg.source_stain else CLASS_COLORS
    x_tr, y_tr = patch_pool(slide_cfg, derive_seed(seed, role, "train-pool"), cfg.n_slides, cfg.noise, colors)
    x_ho, y_ho = patch_pool(slide_cfg, derive_seed(seed, role, "heldout-pool"),
                            max(2, cfg.n_slides // 4), cfg.noise, colors)
    ho = _balanced_indices(y_ho, cfg.n_heldout, stream(seed, role, "heldout"))
    x_ho, y_ho = x_ho[ho], y_ho[ho]
    params = enc.parameters() + clf.parameters()
    opt = AdamW(params, lr=cfg.lr)
    rng = stream(seed, role, "batches")
    acc, step = 0.0, 0
    history = []
    for step in range(1, cfg.steps + 1):
        idx = _balanced_indices(y_tr, cfg.batch, rng)
        loss = T.cross_entropy(clf(enc(x_tr[idx])), y_tr[idx])
        if not np.isfinite(loss.item()):
            raise TrainingDivergence(f"{role} pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.steps:
            pred = clf(Tensor(enc.encode(x_ho))).data.argmax(axis=1)
            acc = float(np.mean(pred == y_ho))
            history.append((step, float(loss.item()), acc))
            if acc >= cfg.target_acc:
                break
    if acc < cfg.min_acc:
        raise TrainingDivergence(f"{role} pretraining reached only {acc:.3f} held-out accuracy")
    enc.freeze()
    return enc, {"heldout_acc": acc, "steps": step, "history": history, "classifier": clf}


STUDENT_PRETRAIN_NOISE = 0.15
TEACHER_STEPS = 2000
TEACHER_TARGET_ACC = 0.99


def pretrain_teacher(slide_cfg: SlideConfig, seed: int, spec: EncoderSpec = TEACHER_SPEC,
                     cfg: PretrainConfig | None = None) -> tuple[PatchEncoder, dict]:
    """Teacher: larger encoder pretrained on the evaluation distribution."""
    cfg = cfg or PretrainConfig(noise=slide_cfg.noise, steps=TEACHER_STEPS, target_acc=TEACHER_TARGET_ACC)
    return pretrain_encoder(spec, slide_cfg, cfg, seed, role="teacher")


def init_student(slide_cfg: SlideConfig, seed: int, spec: EncoderSpec = STUDENT_SPEC,
                 cfg: PretrainConfig | None = None) -> tuple[PatchEncoder, dict]:
    """Student: smaller encoder pretrained on a noisier, shifted rendering of the same classes."""
    cfg = cfg or PretrainConfig(noise=STUDENT_PRETRAIN_NOISE, source_stain=True)
    return pretrain_encoder(spec, slide_cfg, cfg, seed, role="student")


# -- EMA teacher ------------------------------------------------------------------------


class EmaTeacher:
    """Frozen exponential moving average of a student encoder."""

    def __init__(self, student: PatchEncoder, tau: float = 0.999):
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"tau {tau} outside [0, 1]")
        self.encoder = clone(student)
        self.encoder.freeze()
        self.tau = tau

    @property
    def out_dim(self) -> int:
        return self.encoder.out_dim

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters()

    def encode(self, patches: np.ndarray) -> np.ndarray:
        return self.encoder.encode(patches)

    def __call__(self, patches) -> Tensor:
        return self.encoder(patches)


def ema_update(teacher: EmaTeacher, student_params: Sequence[Tensor], tau: float | None = None) -> None:
    """theta_t <- tau * theta_t + (1 - tau) * theta_s, in place."""
    tau = teacher.tau if tau is None else tau
    t_params = teacher.parameters()
    student_params = list(student_params)
    if len(t_params) != len(student_params):
        raise DimensionError(f"ema_update: {len(t_params)} teacher vs {len(student_params)} student tensors")
    for pt, ps in zip(t_params, student_params):
        if pt.shape != ps.shape:
            raise DimensionError(f"ema_update: teacher {pt.shape} vs student {ps.shape}")
    for pt, ps in zip(t_params, student_params):
        pt.data = tau * pt.data + (1.0 - tau) * ps.data
