"""Cosine-similarity maps of patch features against a reference patch."""

from __future__ import annotations

import warnings

import numpy as np

from .data import LESION, write_pgm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two vectors; 0 (with a warning) if either has zero norm."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("zero-norm feature vector; similarity set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def similarity_grid(features: np.ndarray, ref: tuple[int, int]) -> np.ndarray:
    """``features`` is ``(H, W, d)`` with NaN rows for uncovered cells.

    Returns an ``(H, W)`` grid of cosines to ``features[ref]``; uncovered cells stay NaN.
    """
    h, w, _ = features.shape
    r0, c0 = ref
    if not (0 <= r0 < h and 0 <= c0 < w) or np.isnan(features[r0, c0]).any():
        raise KeyError(f"reference patch {ref} is not part of the slide's kept windows")
    out = np.full((h, w), np.nan)
    flat = features.reshape(-1, features.shape[-1])
    valid = ~np.isnan(flat).any(axis=1)
    x = flat[valid]
    norms = np.linalg.norm(x, axis=1)
    ref_vec = features[r0, c0]
    ref_norm = np.linalg.norm(ref_vec)
    if ref_norm == 0.0 or np.any(norms == 0.0):
        warnings.warn("zero-norm feature vector; similarity set to 0", RuntimeWarning, stacklevel=2)
    denom = norms * ref_norm
    sims = np.divide(x @ ref_vec, denom, out=np.zeros(len(x)), where=denom > 0)
    out.reshape(-1)[valid] = np.clip(sims, -1.0, 1.0)
    if ref_norm > 0:
        out[r0, c0] = 1.0
    return out


def feature_grid(features: np.ndarray, origins, s: int, grid_shape: tuple[int, int]) -> np.ndarray:
    """Scatter per-window feature sequences ``(n, s*s, d)`` onto the slide grid."""
    out = np.full(grid_shape + (features.shape[-1],), np.nan)
    for seq, (r, c) in zip(features, origins):
        out[r:r + s, c:c + s] = seq.reshape(s, s, -1)
    return out


def to_gray(grid: np.ndarray) -> np.ndarray:
    """Map [-1, 1] linearly to [0, 255]; uncovered cells become 0."""
    return np.where(np.isnan(grid), 0.0, (grid + 1.0) * 127.5)


def write_csv(path, grid: np.ndarray) -> None:
    rows = [",".join("nan" if np.isnan(v) else repr(float(v)) for v in row) for row in grid]
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


def write_heatmap(prefix, grid: np.ndarray, scale: int = 8) -> None:
    """``prefix``.csv with the raw grid and ``prefix``.pgm upscaled ``scale`` times."""
    write_csv(f"{prefix}.csv", grid)
    img = np.kron(to_gray(grid), np.ones((scale, scale)))
    write_pgm(f"{prefix}.pgm", img)


def lesion_contrast(features: np.ndarray, classes: np.ndarray) -> float | None:
    """Mean cosine among lesion patches minus mean cosine from lesion to other patches.

    ``features`` is ``(n, d)`` and ``classes`` ``(n,)``. Returns ``None`` when
    the slide has fewer than two lesion patches or no other patches.
    """
    les = classes == LESION
    if les.sum() < 2 or (~les).sum() == 0:
        return None
    x = features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
    sim = x @ x.T
    within = sim[np.ix_(les, les)]
    k = les.sum()
    within_mean = (within.sum() - np.trace(within)) / (k * (k - 1))
    between_mean = sim[np.ix_(les, ~les)].mean()
    return float(within_mean - between_mean)
