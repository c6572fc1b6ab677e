from collections import deque

import numpy as np
import pytest

from mcmkd.data import (LESION, ConfigError, ContextWindow, FormatError, SlideConfig, archive_size,
                        archive_to_windows, extract_context_windows, generate_slide, read_feature_archive,
                        read_pnm, recompute_tissue_fraction, sample_grid, slide_label, tile_image,
                        tissue_filter, untile, windows_to_archive, write_feature_archive, write_pgm, write_ppm)
from mcmkd.mil import auroc
from mcmkd.rng import derive_seed

CFG = SlideConfig()


def bfs_largest_cluster(grid):
    """Largest 4-connected lesion component, by plain breadth-first search."""
    h, w = grid.shape
    seen = np.zeros_like(grid, dtype=bool)
    best = 0
    for r in range(h):
        for c in range(w):
            if grid[r, c] != LESION or seen[r, c]:
                continue
            size, q = 0, deque([(r, c)])
            seen[r, c] = True
            while q:
                y, x = q.popleft()
                size += 1
                for yy, xx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= yy < h and 0 <= xx < w and grid[yy, xx] == LESION and not seen[yy, xx]:
                        seen[yy, xx] = True
                        q.append((yy, xx))
            best = max(best, size)
    return best


def grids(seed, n=200, cfg=CFG):
    return [sample_grid(cfg, derive_seed(seed, "slide", i)) for i in range(n)]


class TestSlides:
    def test_deterministic(self):
        a, b = generate_slide(CFG, 42), generate_slide(CFG, 42)
        assert np.array_equal(a.grid, b.grid) and a.pixels.tobytes() == b.pixels.tobytes()
        assert not np.array_equal(generate_slide(CFG, 43).pixels, a.pixels)

    def test_pixels_in_range(self):
        px = generate_slide(CFG, 1).pixels
        assert px.dtype == np.float32 and px.shape == (256, 256, 3)
        assert px.min() >= 0.0 and px.max() <= 1.0

    def test_no_lesions_means_negative(self):
        cfg = SlideConfig(lesion_rate=0.0)
        for i in range(20):
            g = sample_grid(cfg, i)
            assert not (g == LESION).any() and slide_label(g) == 0

    def test_label_balance(self):
        rate = np.mean([slide_label(g) for g in grids(0)])
        assert 0.4 <= rate <= 0.6

    @pytest.mark.parametrize("seed", range(3))
    def test_label_matches_bfs_oracle(self, seed):
        for g in grids(seed, 60):
            assert slide_label(g) == int(bfs_largest_cluster(g) >= 4)

    def test_hand_built_labels(self):
        g = np.zeros((5, 5), dtype=int)
        g[0, 0:3] = LESION
        g[2, 2] = LESION
        assert slide_label(g) == 0  # a 3-run and a singleton
        g[1, 3] = LESION
        assert slide_label(g) == 0  # diagonal contact does not join
        g[1, 2] = LESION
        assert slide_label(g) == 1

    def test_lesion_count_alone_is_not_enough(self):
        for seed in range(5):
            gs = grids(seed)
            counts = [(g == LESION).sum() for g in gs]
            assert auroc(counts, [slide_label(g) for g in gs]) <= 0.95

    def test_negatives_still_carry_decoys(self):
        gs = grids(0)
        neg_with_lesion = sum(1 for g in gs if slide_label(g) == 0 and (g == LESION).any())
        assert neg_with_lesion > 10

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            SlideConfig(lesion_rate=-0.1).validate()


class TestTiling:
    def test_patch_count(self):
        img = np.zeros((1792, 1792, 3))
        (_, patches), = list(tile_image(img, 8, 224))
        assert patches.shape == (64, 224, 224, 3)

    def test_window_count(self):
        img = np.zeros((8 * 4, 8 * 4, 3))
        assert len(list(tile_image(img, 4, 4))) == 4

    def test_row_major_patch_order(self):
        img = np.arange(4 * 4 * 2 * 2, dtype=float).reshape(8, 8, 1)
        img = np.repeat(img, 3, axis=2)
        (_, patches), *_ = list(tile_image(img, 2, 4))
        np.testing.assert_array_equal(patches[1], img[0:4, 4:8])
        np.testing.assert_array_equal(patches[2], img[4:8, 0:4])

    def test_untile_covers_exactly_kept_pixels(self):
        slide = generate_slide(CFG, 3)
        windows = extract_context_windows(slide, 4, 16)
        kept = windows[::2]
        img = untile(kept, slide.grid.shape)
        covered = np.zeros(slide.grid.shape, dtype=bool)
        for w in kept:
            r, c = w.origin
            covered[r:r + 4, c:c + 4] = True
        mask = np.repeat(np.repeat(covered, 16, 0), 16, 1)
        assert np.array_equal(~np.isnan(img[..., 0]), mask)
        np.testing.assert_array_equal(img[mask], slide.pixels[mask])

    def test_window_classes_follow_grid(self):
        slide = generate_slide(CFG, 4)
        for w in extract_context_windows(slide, 4, 16):
            r, c = w.origin
            assert np.array_equal(w.classes, slide.grid[r:r + 4, c:c + 4].ravel())


class TestTissue:
    def window(self, frac):
        return ContextWindow(np.zeros((1, 1, 1, 3)), (0, 0), frac)

    def test_threshold_inclusive(self):
        kept = tissue_filter([self.window(0.6), self.window(0.59999), self.window(1.0)], 0.6)
        assert [w.tissue_fraction for w in kept] == [0.6, 1.0]

    def test_fraction_extremes(self):
        assert recompute_tissue_fraction(np.ones((2, 4, 4, 3))) == 0.0
        assert recompute_tissue_fraction(np.zeros((2, 4, 4, 3))) == 1.0
        half = np.zeros((1, 4, 4, 3))
        half[:, :2] = 1.0
        assert recompute_tissue_fraction(half) == 0.5

    def test_stored_fraction_recomputes(self):
        for w in extract_context_windows(generate_slide(CFG, 5), 4, 16):
            assert w.tissue_fraction == recompute_tissue_fraction(w)


class TestArchive:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        seqs = [rng.normal(size=(16, 5)).astype(np.float32) for _ in range(3)]
        write_feature_archive(tmp_path / "a.mcfa", seqs, [(0, 0), (0, 4), (4, 0)])
        arc = read_feature_archive(tmp_path / "a.mcfa")
        assert (arc.s, arc.dim, arc.n_sequences) == (4, 5, 3)
        np.testing.assert_array_equal(arc.vectors, np.stack(seqs))
        assert arc.origins.tolist() == [[0, 0], [0, 4], [4, 0]]

    def test_truncated(self, tmp_path):
        path = tmp_path / "a.mcfa"
        write_feature_archive(path, [np.zeros((4, 3), np.float32)], [(1, 2)])
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(FormatError) as err:
            read_feature_archive(path)
        assert err.value.offset == len(raw) - 1

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.mcfa"
        write_feature_archive(path, [np.zeros((4, 3), np.float32)], [(0, 0)])
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(FormatError):
            read_feature_archive(path)

    def test_empty_is_header_only(self, tmp_path):
        path = tmp_path / "e.mcfa"
        write_feature_archive(path, [], [], s=4, dim=8)
        assert path.stat().st_size == archive_size(0, 4, 8) == 14
        assert read_feature_archive(path).n_sequences == 0

    def test_windows_round_trip(self, tmp_path):
        windows = extract_context_windows(generate_slide(CFG, 6), 4, 16)[:3]
        windows_to_archive(tmp_path / "w.mcfa", windows)
        back = archive_to_windows(read_feature_archive(tmp_path / "w.mcfa"), 16)
        for a, b in zip(windows, back):
            assert a.origin == b.origin
            np.testing.assert_array_equal(a.patches, b.patches)


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    rgb = rng.integers(0, 256, size=(5, 7, 3)) / 255.0
    write_ppm(tmp_path / "x.ppm", rgb)
    np.testing.assert_array_equal(read_pnm(tmp_path / "x.ppm"), np.rint(rgb * 255))
    gray = rng.integers(0, 256, size=(4, 6)).astype(float)
    write_pgm(tmp_path / "x.pgm", gray)
    np.testing.assert_array_equal(read_pnm(tmp_path / "x.pgm"), gray)
