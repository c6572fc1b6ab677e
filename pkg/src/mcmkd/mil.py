"""Gated-attention MIL classifier, training with gradient accumulation, AUROC and splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .optim import AdamW
from .rng import stream
from .tensor import DimensionError, Tensor, TrainingDivergence


class MetricError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class Bag:
    instances: np.ndarray     # (N, d)
    label: int
    slide_id: str = ""
    positions: np.ndarray | None = field(default=None, repr=False)  # (N, 2) grid coords

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2 or len(self.instances) < 1:
            raise DimensionError(f"bag needs an (N>=1, d) instance matrix, got {self.instances.shape}")


class AttentionMIL(Module):
    """Gated attention pooling followed by a linear two-class head.

    Attention logits are ``w . (tanh(V h) * sigmoid(U h))`` per instance.
    """

    def __init__(self, d: int, hidden: int, rng: np.random.Generator, n_classes: int = 2):
        self.V = Linear(d, hidden, rng)
        self.U = Linear(d, hidden, rng)
        self.w = Linear(hidden, 1, rng)
        self.head = Linear(d, n_classes, rng)

    @property
    def dim(self) -> int:
        return self.V.n_in

    def pool(self, h: Tensor) -> tuple[Tensor, Tensor]:
        if h.shape[-1] != self.dim:
            raise DimensionError(f"bag feature dim {h.shape[-1]} vs classifier dim {self.dim}")
        gate = T.tanh(self.V(h)) * T.sigmoid(self.U(h))
        logits = T.reshape(self.w(gate), (1, -1))
        a = T.softmax(logits)
        z = T.matmul(a, h)
        return T.reshape(z, (-1,)), T.reshape(a, (-1,))

    def __call__(self, h: Tensor) -> Tensor:
        z, _ = self.pool(h)
        return self.head(z)


def attention_pool(clf: AttentionMIL, bag: Bag) -> tuple[np.ndarray, np.ndarray]:
    z, a = clf.pool(Tensor(bag.instances))
    return z.data, a.data


def mil_forward(clf: AttentionMIL, bag: Bag | np.ndarray) -> Tensor:
    h = bag.instances if isinstance(bag, Bag) else bag
    return clf(Tensor(h))


def bag_score(clf: AttentionMIL, bag: Bag) -> float:
    """Probability of class 1."""
    logits = mil_forward(clf, bag).data
    e = np.exp(logits - logits.max())
    return float(e[1] / e.sum())


# -- metrics -------------------------------------------------------------------------


def binary_auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC: share of (positive, negative) pairs ranked correctly, ties 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("AUROC needs both classes present")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Macro-averaged one-vs-rest AUROC for binary labels.

    The class-0 curve uses negated scores; for two classes both curves have
    the same area, which is checked here.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    a1 = binary_auroc(s, y)
    a0 = binary_auroc(-s, 1 - y)
    if a0 != a1:
        raise MetricError(f"one-vs-rest areas disagree: {a1} vs {a0}")
    return 0.5 * (a0 + a1)


# -- splits --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    stratified: bool = True
    seed: int = 0


def make_splits(labels: Sequence[int], spec: SplitSpec) -> dict[str, list[int]]:
    """Stratified train/val/test index lists (sorted)."""
    if abs(sum(spec.fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions {spec.fractions} do not sum to 1")
    y = np.asarray(labels).astype(int)
    rng = stream(spec.seed, "splits")
    out = {"train": [], "val": [], "test": []}
    groups = [np.flatnonzero(y == c) for c in np.unique(y)] if spec.stratified else [np.arange(len(y))]
    for idx in groups:
        if spec.stratified and len(idx) < 3:
            raise SplitError(f"class with only {len(idx)} samples cannot be split three ways")
        idx = idx[rng.permutation(len(idx))]
        n_tr = int(round(spec.fractions[0] * len(idx)))
        n_va = int(round(spec.fractions[1] * len(idx)))
        if spec.stratified:
            n_va = max(1, n_va)
            n_tr = min(n_tr, len(idx) - n_va - 1)
        out["train"] += idx[:n_tr].tolist()
        out["val"] += idx[n_tr:n_tr + n_va].tolist()
        out["test"] += idx[n_tr + n_va:].tolist()
    return {k: sorted(v) for k, v in out.items()}


# -- training --------------------------------------------------------------------------


@dataclass(frozen=True)
class MilConfig:
    epochs: int = 100
    accum: int = 8
    lr: float = 5e-4
    weight_decay: float = 0.01
    hidden: int = 64


@dataclass
class MilHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0


def _val_loss(clf: AttentionMIL, bags: Sequence[Bag]) -> float:
    losses = [T.cross_entropy(mil_forward(clf, b), [b.label]).item() for b in bags]
    return float(np.mean(losses))


def train_mil(clf: AttentionMIL, train: Sequence[Bag], val: Sequence[Bag], cfg: MilConfig,
              seed: int) -> tuple[AttentionMIL, MilHistory]:
    """Train on one bag at a time, stepping every ``cfg.accum`` bags.

    Returns the classifier restored to the epoch with the lowest validation loss.
    """
    if not train or not val:
        raise ValueError("train_mil needs non-empty train and validation bags")
    params = clf.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    hist = MilHistory()
    best_state, best_val = clf.state_dict(), np.inf
    inv_accum = 1.0 / cfg.accum
    for epoch in range(cfg.epochs):
        order = stream(seed, "mil-epoch", epoch).permutation(len(train))
        total, pending = 0.0, 0
        opt.zero_grad()
        for i in order:
            bag = train[i]
            loss = T.cross_entropy(clf(Tensor(bag.instances)), [bag.label])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergence(f"MIL loss is not finite in epoch {epoch}")
            total += value
            T.scale(loss, inv_accum).backward()
            pending += 1
            if pending == cfg.accum:
                opt.step()
                opt.zero_grad()
                hist.steps += 1
                pending = 0
        if pending:
            opt.step()
            opt.zero_grad()
            hist.steps += 1
        hist.train_loss.append(total / len(train))
        v = _val_loss(clf, val)
        if not np.isfinite(v):
            raise TrainingDivergence(f"MIL validation loss is not finite in epoch {epoch}")
        hist.val_loss.append(v)
        if v < best_val:
            best_val, best_state, hist.best_epoch = v, clf.state_dict(), epoch
    clf.load_state_dict(best_state)
    return clf, hist


def predict(clf: AttentionMIL, bags: Sequence[Bag]) -> np.ndarray:
    return np.array([bag_score(clf, b) for b in bags])
