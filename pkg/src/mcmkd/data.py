"""Synthetic slides, context-window tessellation, tissue filtering and file formats.

A synthetic slide is a grid of patch classes rendered to RGB. Its label is a
context-level property: it is positive iff some 4-connected group of lesion
patches has at least ``CLUSTER_MIN`` members. Small decoy lesion groups
appear in both classes, so no single patch reveals the label.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .rng import stream

BACKGROUND, STROMA_A, STROMA_B, LESION = 0, 1, 2, 3
PATCH_CLASSES = ("background", "stromaA", "stromaB", "lesion")
N_CLASSES = len(PATCH_CLASSES)
CLUSTER_MIN = 4

# Evaluation stain: lesion differs from stromaB by a small blue shift only.
TARGET_COLORS = np.array([
    [0.94, 0.93, 0.95],
    [0.85, 0.60, 0.75],
    [0.70, 0.48, 0.70],
    [0.70, 0.48, 0.76],
])
# Source stain for student pretraining: lesion differs in red and green but
# shares stromaB's blue, so nothing pushes the student to weigh blue.
SOURCE_COLORS = np.array([
    [0.94, 0.93, 0.95],
    [0.85, 0.60, 0.75],
    [0.70, 0.48, 0.70],
    [0.50, 0.35, 0.70],
])
CLASS_COLORS = TARGET_COLORS
LUMA = np.array([0.299, 0.587, 0.114])
TISSUE_LUMA_MAX = 0.85

_FOUR_CONN = ndimage.generate_binary_structure(2, 1)


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class SlideConfig:
    grid_h: int = 16
    grid_w: int = 16
    patch: int = 16
    channels: int = 3
    class_balance: float = 0.5
    lesion_rate: float = 0.03
    noise: float = 0.05
    blend: float = 3.0
    background_range: tuple[float, float] = (0.1, 0.3)
    stroma_seeds: int = 5
    cluster_size: tuple[int, int] = (4, 8)

    def validate(self) -> None:
        if self.grid_h <= 0 or self.grid_w <= 0 or self.patch <= 0:
            raise ConfigError(f"degenerate slide geometry {self.grid_h}x{self.grid_w}, patch {self.patch}")
        if self.channels != 3:
            raise ConfigError("slides are rendered as RGB (channels=3)")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ConfigError(f"class_balance {self.class_balance} outside [0, 1]")
        if self.lesion_rate < 0:
            raise ConfigError(f"lesion_rate {self.lesion_rate} is negative")
        lo, hi = self.cluster_size
        if lo < CLUSTER_MIN or hi < lo:
            raise ConfigError(f"cluster_size {self.cluster_size} must satisfy {CLUSTER_MIN} <= lo <= hi")


@dataclass
class SyntheticSlide:
    grid: np.ndarray          # (H_g, W_g) int class ids
    pixels: np.ndarray        # (H_g*p, W_g*p, 3) float32 in [0, 1]
    label: int
    seed: int
    slide_id: str = ""

    @property
    def patch(self) -> int:
        return self.pixels.shape[0] // self.grid.shape[0]


@dataclass
class ContextWindow:
    patches: np.ndarray       # (s*s, p, p, c), row-major grid order
    origin: tuple[int, int]   # grid (row, col) of the top-left patch
    tissue_fraction: float
    classes: np.ndarray | None = field(default=None, repr=False)  # (s*s,) patch class ids when known

    @property
    def s(self) -> int:
        return int(round(np.sqrt(self.patches.shape[0])))

    @property
    def p(self) -> int:
        return self.patches.shape[1]


# -- grid sampling ----------------------------------------------------------------


def lesion_components(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """4-connected lesion components: (label map, component sizes indexed from 1)."""
    labels, n = ndimage.label(grid == LESION, structure=_FOUR_CONN)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    return labels, sizes


def slide_label(grid: np.ndarray) -> int:
    _, sizes = lesion_components(grid)
    return int(sizes.max(initial=0) >= CLUSTER_MIN)


def _neighbors(r: int, c: int, h: int, w: int):
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < h and 0 <= cc < w:
            yield rr, cc


def _tissue_mask(cfg: SlideConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.grid_h, cfg.grid_w
    field_ = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=max(h, w) / 6, mode="reflect")
    field_ /= field_.std() + 1e-12
    rr, cc = np.mgrid[0:h, 0:w]
    radial = np.hypot((rr - (h - 1) / 2) / h, (cc - (w - 1) / 2) / w)
    score = field_ - 6.0 * radial
    frac = rng.uniform(*cfg.background_range)
    return score > np.quantile(score, frac)


def _stroma(cfg: SlideConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.grid_h, cfg.grid_w
    k = cfg.stroma_seeds
    seeds = rng.uniform(0, 1, size=(k, 2)) * [h, w]
    kinds = rng.choice([STROMA_A, STROMA_B], size=k)
    rr, cc = np.mgrid[0:h, 0:w]
    d = (rr[None] + 0.5 - seeds[:, 0, None, None]) ** 2 + (cc[None] + 0.5 - seeds[:, 1, None, None]) ** 2
    return kinds[np.argmin(d, axis=0)]


def _grow_cluster(grid: np.ndarray, tissue: np.ndarray, size: int, rng: np.random.Generator) -> bool:
    h, w = grid.shape
    cells = np.argwhere(tissue)
    for _ in range(20):
        r, c = cells[rng.integers(len(cells))]
        members = [(int(r), int(c))]
        chosen = {members[0]}
        while len(members) < size:
            frontier = sorted({nb for m in members for nb in _neighbors(*m, h, w)
                               if tissue[nb] and nb not in chosen})
            if not frontier:
                break
            nb = frontier[rng.integers(len(frontier))]
            members.append(nb)
            chosen.add(nb)
        if len(members) == size:
            for m in members:
                grid[m] = LESION
            return True
    return False


def _place_decoys(grid: np.ndarray, tissue: np.ndarray, n_groups: int, rng: np.random.Generator) -> None:
    """Lesion singletons and pairs that never touch another lesion patch."""
    h, w = grid.shape

    def free(cell):
        if not tissue[cell] or grid[cell] == LESION:
            return False
        return all(grid[nb] != LESION for nb in _neighbors(*cell, h, w))

    cells = np.argwhere(tissue)
    for _ in range(n_groups):
        for _attempt in range(30):
            a = tuple(int(v) for v in cells[rng.integers(len(cells))])
            if not free(a):
                continue
            if rng.random() < 0.5:
                grid[a] = LESION
                break
            opts = [nb for nb in _neighbors(*a, h, w) if free(nb)]
            if not opts:
                continue
            b = opts[rng.integers(len(opts))]
            grid[a] = LESION
            grid[b] = LESION
            break


def sample_grid(cfg: SlideConfig, seed: int) -> np.ndarray:
    cfg.validate()
    rng = stream(seed, "grid")
    tissue = _tissue_mask(cfg, rng)
    grid = np.where(tissue, _stroma(cfg, rng), BACKGROUND).astype(np.int64)
    if cfg.lesion_rate == 0:
        return grid
    if rng.random() < cfg.class_balance:
        lo, hi = cfg.cluster_size
        _grow_cluster(grid, tissue, int(rng.integers(lo, hi + 1)), rng)
    n_groups = int(rng.poisson(cfg.lesion_rate * tissue.sum()))
    _place_decoys(grid, tissue, n_groups, rng)
    return grid


# -- rendering ----------------------------------------------------------------------


def render(grid: np.ndarray, seed: int, patch: int = 16, noise: float = 0.05,
           blend: float = 3.0, colors: np.ndarray = CLASS_COLORS) -> np.ndarray:
    """Pixels for ``grid``: class colours softened across patch borders, plus noise.

    The border softening makes neighbouring patches share pixel statistics,
    so a patch carries a faint imprint of its neighbours' classes.
    """
    base = np.repeat(np.repeat(colors[grid], patch, axis=0), patch, axis=1)
    if blend > 0:
        base = ndimage.gaussian_filter(base, sigma=(blend, blend, 0), mode="nearest")
    rng = stream(seed, "render")
    img = base + rng.normal(0.0, noise, size=base.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_slide(cfg: SlideConfig, seed: int, slide_id: str = "") -> SyntheticSlide:
    grid = sample_grid(cfg, seed)
    pixels = render(grid, seed, cfg.patch, cfg.noise, cfg.blend)
    return SyntheticSlide(grid=grid, pixels=pixels, label=slide_label(grid), seed=seed, slide_id=slide_id)


# -- tessellation ---------------------------------------------------------------------


def luminance(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64)[..., :3] @ LUMA


def recompute_tissue_fraction(window: ContextWindow | np.ndarray) -> float:
    """Fraction of pixels whose luminance is below ``TISSUE_LUMA_MAX``."""
    px = window.patches if isinstance(window, ContextWindow) else window
    return float(np.mean(luminance(px) < TISSUE_LUMA_MAX))


def tile_image(pixels: np.ndarray, s: int, p: int, stride: int | None = None):
    """Yield ``(origin, patches)`` for each aligned window of ``s*s`` patches of side ``p``.

    ``stride`` is in patches; by default windows do not overlap. Origins are
    grid coordinates in patch units.
    """
    stride = s if stride is None else stride
    gh, gw = pixels.shape[0] // p, pixels.shape[1] // p
    for r in range(0, gh - s + 1, stride):
        for c in range(0, gw - s + 1, stride):
            block = pixels[r * p:(r + s) * p, c * p:(c + s) * p]
            patches = block.reshape(s, p, s, p, -1).transpose(0, 2, 1, 3, 4).reshape(s * s, p, p, -1)
            yield (r, c), patches


def extract_context_windows(slide: SyntheticSlide, s: int, p: int, stride: int | None = None) -> list[ContextWindow]:
    out = []
    for (r, c), patches in tile_image(slide.pixels, s, p, stride):
        patches = np.ascontiguousarray(patches)
        classes = slide.grid[r:r + s, c:c + s].reshape(-1).copy()
        out.append(ContextWindow(patches, (r, c), recompute_tissue_fraction(patches), classes))
    return out


def tissue_filter(windows: Iterable[ContextWindow], min_fraction: float = 0.6) -> list[ContextWindow]:
    return [w for w in windows if w.tissue_fraction >= min_fraction]


def untile(windows: Sequence[ContextWindow], grid_shape: tuple[int, int]) -> np.ndarray:
    """Reassemble window patches onto an image; uncovered pixels are NaN."""
    p = windows[0].p
    c = windows[0].patches.shape[-1]
    out = np.full((grid_shape[0] * p, grid_shape[1] * p, c), np.nan)
    for w in windows:
        s = w.s
        r0, c0 = w.origin
        for i, patch in enumerate(w.patches):
            rr, cc = r0 + i // s, c0 + i % s
            out[rr * p:(rr + 1) * p, cc * p:(cc + 1) * p] = patch
    return out


# -- binary formats ----------------------------------------------------------------------

ARCHIVE_MAGIC = b"MCFA"
ARCHIVE_VERSION = 1
_HEADER = struct.Struct("<4sHIHH")


@dataclass
class FeatureArchive:
    s: int
    dim: int
    origins: np.ndarray       # (n, 2) uint32
    vectors: np.ndarray       # (n, s*s, dim) float32

    @property
    def n_sequences(self) -> int:
        return len(self.origins)

    def record_size(self) -> int:
        return 8 + self.s * self.s * self.dim * 4


def archive_size(n: int, s: int, dim: int) -> int:
    return _HEADER.size + n * (8 + s * s * dim * 4)


def write_feature_archive(path, sequences: Sequence[np.ndarray], origins: Sequence[tuple[int, int]],
                          s: int | None = None, dim: int | None = None) -> None:
    """Write ``sequences`` (each ``(s*s, dim)``) with their grid origins."""
    if len(sequences) != len(origins):
        raise ValueError("one origin per sequence is required")
    if sequences:
        n_tok, dim_ = np.shape(sequences[0])
        s_ = int(round(np.sqrt(n_tok)))
        s = s_ if s is None else s
        dim = dim_ if dim is None else dim
    if s is None or dim is None:
        raise ValueError("an empty archive needs explicit s and dim")
    rec = np.dtype([("origin", "<u4", (2,)), ("vec", "<f4", (s * s, dim))])
    data = np.zeros(len(sequences), dtype=rec)
    for i, (seq, org) in enumerate(zip(sequences, origins)):
        if np.shape(seq) != (s * s, dim):
            raise ValueError(f"sequence {i} has shape {np.shape(seq)}, expected {(s * s, dim)}")
        data[i]["origin"] = org
        data[i]["vec"] = seq
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, len(sequences), s, dim))
        fh.write(data.tobytes())


def read_feature_archive(path) -> FeatureArchive:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"file is {len(raw)} bytes, shorter than the {_HEADER.size}-byte header", len(raw))
    magic, version, n, s, dim = _HEADER.unpack_from(raw)
    if magic != ARCHIVE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    want = archive_size(n, s, dim)
    if len(raw) != want:
        raise FormatError(f"file length {len(raw)} does not match header ({want} bytes expected)",
                          min(len(raw), want))
    rec = np.dtype([("origin", "<u4", (2,)), ("vec", "<f4", (s * s, dim))])
    data = np.frombuffer(raw, dtype=rec, offset=_HEADER.size, count=n)
    return FeatureArchive(s=s, dim=dim, origins=data["origin"].copy(), vectors=data["vec"].copy())


def windows_to_archive(path, windows: Sequence[ContextWindow]) -> None:
    """Store raw window pixels: each patch is one flattened ``p*p*c`` vector."""
    seqs = [w.patches.reshape(w.patches.shape[0], -1) for w in windows]
    if windows:
        write_feature_archive(path, seqs, [w.origin for w in windows])


def archive_to_windows(archive: FeatureArchive, p: int, channels: int = 3) -> list[ContextWindow]:
    out = []
    for org, vec in zip(archive.origins, archive.vectors):
        patches = vec.reshape(archive.s * archive.s, p, p, channels)
        out.append(ContextWindow(patches, (int(org[0]), int(org[1])), recompute_tissue_fraction(patches)))
    return out


def write_ppm(path, pixels: np.ndarray) -> None:
    """Binary PPM (P6), 8 bits per channel."""
    img = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def write_pgm(path, values: np.ndarray) -> None:
    """Binary PGM (P5) of an array already scaled to [0, 255]."""
    img = np.clip(np.rint(values), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise FormatError("not a binary PNM header", 0)
    kind, w, h = m.group(1), int(m.group(2)), int(m.group(3))
    body = np.frombuffer(raw, dtype=np.uint8, offset=m.end())
    if kind == b"P6":
        return body.reshape(h, w, 3)
    if kind == b"P5":
        return body.reshape(h, w)
    raise FormatError(f"unsupported image type {kind!r}", 0)
