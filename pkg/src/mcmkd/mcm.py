"""Masked context modelling with knowledge distillation, and its ablation variants.

A context window's patches are encoded by the student, a random subset of
the resulting feature sequence is replaced by a learnable mask token,
positional embeddings are added, and a Transformer encoder plus predictor
regress the frozen teacher's features at the masked positions under an l1
loss normalised by the number of masked scalar targets.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import ConfigError, ContextWindow
from .encoders import EmaTeacher, PatchEncoder, ema_update
from .nn import MLP, Linear, Module, TransformerEncoder
from .optim import AdamW
from .rng import stream
from .tensor import ContractError, DimensionError, Tensor, TrainingDivergence


class Variant(str, enum.Enum):
    MCM_KD = "mcm-kd"
    MCM = "mcm"
    KD = "kd"
    CM_KD = "cm-kd"
    MCM_SD = "mcm-sd"

    @property
    def masked(self) -> bool:
        return self in (Variant.MCM_KD, Variant.MCM, Variant.MCM_SD)

    @property
    def uses_context(self) -> bool:
        return self is not Variant.KD


# -- masking ----------------------------------------------------------------------------


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_count(n: int, ratio: float) -> int:
    return round_half_up(ratio * n)


@dataclass(frozen=True)
class MaskPlan:
    n: int
    masked: np.ndarray    # sorted, distinct indices in [0, n)
    ratio: float

    @property
    def rows(self) -> np.ndarray:
        """Boolean row selector of length ``n``."""
        sel = np.zeros(self.n, dtype=bool)
        sel[self.masked] = True
        return sel

    @classmethod
    def empty(cls, n: int) -> MaskPlan:
        return cls(n, np.zeros(0, dtype=np.int64), 0.0)

    @classmethod
    def full(cls, n: int) -> MaskPlan:
        return cls(n, np.arange(n), 1.0)


def sample_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniformly chosen ``round_half_up(ratio * n)`` distinct positions."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio {ratio} must lie strictly between 0 and 1")
    k = mask_count(n, ratio)
    if not 1 <= k <= n - 1:
        raise ConfigError(f"mask ratio {ratio} masks {k} of {n} positions; need between 1 and {n - 1}")
    return MaskPlan(n, np.sort(rng.choice(n, size=k, replace=False)), ratio)


def apply_mask(x: Tensor, plan: MaskPlan, mask_token: Tensor) -> Tensor:
    if x.shape[0] != plan.n:
        raise DimensionError(f"apply_mask: sequence length {x.shape[0]} vs plan length {plan.n}")
    if plan.masked.size == 0:
        return x
    return T.replace_rows(x, plan.rows, mask_token)


def add_positions(seq: Tensor, pos_emb: Tensor) -> Tensor:
    """``seq`` is ``(L, d)`` or a batch ``(B, L, d)``; ``pos_emb`` is ``(L, d)``."""
    if seq.shape[-2:] != pos_emb.shape:
        raise DimensionError(f"add_positions: sequence {seq.shape} vs embeddings {pos_emb.shape}")
    batched = seq.ndim == 3

    def bw(g):
        return g, (g.sum(axis=0) if batched else g)

    return T.make_op(seq.data + pos_emb.data, (seq, pos_emb), bw)


# -- losses ------------------------------------------------------------------------------


def masked_l1_loss(y, y_pred: Tensor, plan: MaskPlan) -> Tensor:
    """Mean absolute error over the masked rows only, ``sum|y_M - y'_M| / (|M| * d)``."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    if y.shape != y_pred.shape:
        raise DimensionError(f"masked_l1_loss: targets {y.shape} vs predictions {y_pred.shape}")
    if plan.masked.size == 0:
        raise ContractError("masked_l1_loss: empty mask plan")
    idx = plan.masked
    return T.mean(T.tabs(T.sub(y_pred[idx], y[idx])))


def full_l1_loss(y, y_pred: Tensor) -> Tensor:
    """Mean absolute error over every row (unmasked variants)."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    if y.shape != y_pred.shape:
        raise DimensionError(f"full_l1_loss: targets {y.shape} vs predictions {y_pred.shape}")
    return T.mean(T.tabs(T.sub(y_pred, y)))


kd_direct_loss = full_l1_loss


def batch_l1_loss(y: np.ndarray, y_pred: Tensor, rows: np.ndarray | None) -> Tensor:
    """Mean over windows of each window's l1 loss.

    ``rows`` is a ``(B, L)`` boolean selector, or ``None`` to use every row.
    Each window is normalised by its own count of selected scalars.
    """
    B, L, d = y_pred.shape
    if y.shape != y_pred.shape:
        raise DimensionError(f"batch_l1_loss: targets {y.shape} vs predictions {y_pred.shape}")
    if rows is None:
        weights = np.full((B, L, 1), 1.0 / (B * L * d))
    else:
        counts = rows.sum(axis=1, keepdims=True)
        if np.any(counts == 0):
            raise ContractError("batch_l1_loss: a window has no selected rows")
        weights = (rows / (B * counts * d))[..., None]
    diff = T.tabs(T.sub(y_pred, Tensor(y)))
    return T.tsum(T.mul(diff, Tensor(np.broadcast_to(weights, diff.shape))))


# -- model ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class ContextConfig:
    layers: int = 2
    heads: int = 2
    mlp_hidden: int = 128
    predictor_hidden: int = 128


class McmKdModel(Module):
    """Student, target source, context encoder and predictor for one variant.

    The teacher (frozen encoder or EMA copy) is held outside the parameter
    tree so it is never optimised.
    """

    def __init__(self, variant: Variant, student: PatchEncoder, teacher, context: TransformerEncoder | None,
                 predictor: Module, s: int):
        self.student = student
        self.context = context
        self.predictor = predictor
        self._variant = Variant(variant)
        self._teacher = teacher
        self._s = s
        self._check()

    def _check(self) -> None:
        v = self._variant
        d_f = self.student.out_dim
        if v.uses_context:
            if self.context is None:
                raise ConfigError(f"variant {v.value} needs a context encoder")
            if self.context.dim != d_f or self.context.length != self._s * self._s:
                raise ConfigError(f"context encoder {self.context.pos_emb.shape} does not match "
                                  f"{self._s * self._s} tokens of dim {d_f}")
        elif self.context is not None:
            raise ConfigError("the kd variant has no context encoder")
        if v is Variant.MCM_SD and not isinstance(self._teacher, EmaTeacher):
            raise ConfigError("mcm-sd needs an EMA teacher")
        if v is not Variant.MCM and self._teacher is None:
            raise ConfigError(f"variant {v.value} needs a teacher")

    @property
    def variant(self) -> Variant:
        return self._variant

    @property
    def teacher(self):
        return self._teacher

    @property
    def s(self) -> int:
        return self._s

    def targets(self, patches: np.ndarray) -> np.ndarray:
        """Regression targets for ``(n, p, p, c)`` patches, never on a tape."""
        if self._variant is Variant.MCM:
            return np.asarray(patches, dtype=np.float64).reshape(len(patches), -1)
        return self._teacher.encode(patches)

    def target_dim(self) -> int:
        if self._variant is Variant.MCM:
            spec = self.student.spec
            return spec.patch * spec.patch * spec.in_ch
        return self._teacher.out_dim

    def predict(self, x: Tensor, rows: np.ndarray | None) -> Tensor:
        """Context model and predictor on student features ``x`` (``(L, d)`` or ``(B, L, d)``)."""
        if self.context is not None:
            if rows is not None and rows.any():
                x = T.replace_rows(x, rows, self.context.mask_token)
            x = add_positions(x, self.context.pos_emb)
            x = self.context(x)
        return self.predictor(x)


def build_model(variant: Variant | str, student: PatchEncoder, teacher: PatchEncoder | None, s: int,
                cfg: ContextConfig, seed: int) -> McmKdModel:
    """Wire a model for ``variant``; ``student`` is trained in place."""
    variant = Variant(variant)
    rng = stream(seed, "mcm-init", variant.value)
    d_f = student.out_dim
    student.unfreeze()
    context = None
    if variant.uses_context:
        context = TransformerEncoder(s * s, d_f, cfg.heads, cfg.layers, cfg.mlp_hidden, rng)
    if variant is Variant.MCM:
        spec = student.spec
        predictor: Module = Linear(d_f, spec.patch * spec.patch * spec.in_ch, rng)
        target = None
    elif variant is Variant.MCM_SD:
        target = EmaTeacher(student, tau=0.999)
        predictor = MLP(d_f, cfg.predictor_hidden, d_f, rng)
    else:
        if teacher is None:
            raise ConfigError(f"variant {variant.value} needs a teacher encoder")
        teacher.freeze()
        target = teacher
        predictor = MLP(d_f, cfg.predictor_hidden, teacher.out_dim, rng)
    return McmKdModel(variant, student, target, context, predictor, s)


# -- forward passes ----------------------------------------------------------------------------


def mcmkd_forward(model: McmKdModel, window: ContextWindow, plan: MaskPlan) -> dict:
    """Single-window forward for the masked-feature variants."""
    if model.variant not in (Variant.MCM_KD, Variant.MCM_SD):
        raise ConfigError(f"mcmkd_forward runs mcm-kd or mcm-sd, not {model.variant.value}")
    x = model.student(window.patches)
    x = apply_mask(x, plan, model.context.mask_token)
    x = add_positions(x, model.context.pos_emb)
    x_l = model.context(x)
    y_pred = model.predictor(x_l)
    y = model.targets(window.patches)
    return {"loss": masked_l1_loss(y, y_pred, plan), "y": y, "y_pred": y_pred}


def variant_forward(model: McmKdModel, window: ContextWindow, plan: MaskPlan | None = None) -> Tensor:
    """Single-window loss for any variant; unmasked variants ignore ``plan``."""
    v = model.variant
    x = model.student(window.patches)
    y = model.targets(window.patches)
    if v.masked:
        if plan is None or plan.masked.size == 0:
            raise ContractError(f"variant {v.value} needs a non-empty mask plan")
        y_pred = model.predict(x, plan.rows)
        return masked_l1_loss(y, y_pred, plan)
    return full_l1_loss(y, model.predict(x, None))


def batch_forward(model: McmKdModel, patches: np.ndarray, targets: np.ndarray,
                  rows: np.ndarray | None) -> Tensor:
    """Batched loss; ``patches`` is ``(B, L, p, p, c)``, ``targets`` ``(B, L, d_t)``."""
    B, L = patches.shape[:2]
    x = model.student(patches.reshape((B * L,) + patches.shape[2:]))
    x = T.reshape(x, (B, L, -1))
    y_pred = model.predict(x, rows if model.variant.masked else None)
    return batch_l1_loss(targets, y_pred, rows if model.variant.masked else None)


# -- training ------------------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-3
    batch: int = 8
    ratio: float = 0.5
    weight_decay: float = 0.01
    tau: float = 0.999


@dataclass
class TrainReport:
    variant: str
    losses: list[float] = field(default_factory=list)
    n_windows: int = 0
    discardable: tuple[str, ...] = ("context", "predictor")

    def to_csv(self) -> str:
        lines = ["batch_index,loss"]
        lines += [f"{i},{loss!r}" for i, loss in enumerate(self.losses)]
        return "\n".join(lines) + "\n"


def finetune_epoch(model: McmKdModel, windows: Sequence[ContextWindow], cfg: FinetuneConfig,
                   seed: int) -> TrainReport:
    """One shuffled pass over ``windows`` in batches of ``cfg.batch``."""
    if not windows:
        raise ValueError("finetune_epoch needs at least one window")
    v = model.variant
    n = model.s * model.s
    named = [(k, p) for k, p in model.named_parameters()
             if v.masked or k != "context.mask_token"]
    opt = AdamW([p for _, p in named], lr=cfg.lr, weight_decay=cfg.weight_decay,
                names=[k for k, _ in named])
    order = stream(seed, "finetune", "shuffle").permutation(len(windows))
    report = TrainReport(variant=v.value, n_windows=len(windows))
    for b, start in enumerate(range(0, len(order), cfg.batch)):
        batch = [windows[i] for i in order[start:start + cfg.batch]]
        patches = np.stack([w.patches for w in batch])
        flat = patches.reshape((-1,) + patches.shape[2:])
        targets = model.targets(flat).reshape(len(batch), n, -1)
        rows = None
        if v.masked:
            mrng = stream(seed, "finetune", "mask", b)
            rows = np.stack([sample_mask(n, cfg.ratio, mrng).rows for _ in batch])
        loss = batch_forward(model, patches, targets, rows)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergence(f"fine-tuning loss is not finite at batch {b}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if v is Variant.MCM_SD:
            ema_update(model.teacher, model.student.parameters(), cfg.tau)
        report.losses.append(value)
    opt.zero_grad()
    model.student.freeze()
    return report
