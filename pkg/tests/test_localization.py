import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppmcount.localization import (
    Detection,
    PeakParams,
    detections_csv,
    find_peaks,
    map_to_image,
    read_detections,
    to_image_space,
    write_detections,
)


def brute_force_peaks(grid, tau, delta):
    """Cell-by-cell reference: strict in-bounds 4-neighbour maxima, then greedy thinning."""
    h, w = grid.shape
    cands = []
    for y in range(h):
        for x in range(w):
            v = grid[y, x]
            if v <= tau:
                continue
            ok = True
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and not v > grid[yy, xx]:
                    ok = False
            if ok:
                cands.append((-v, y, x))
    cands.sort()
    kept = []
    for negv, y, x in cands:
        if all(math.hypot(x - kx, y - ky) > delta for kx, ky, _ in kept):
            kept.append((x, y, -negv))
    return kept


def as_tuples(dets):
    return [(int(d.position[0]), int(d.position[1]), d.confidence) for d in dets]


class TestFindPeaks:
    def test_zero_map(self):
        assert find_peaks(np.zeros((8, 8))) == []

    def test_single_pixel(self):
        g = np.zeros((8, 8))
        g[3, 5] = 0.9
        (d,) = find_peaks(g)
        assert d.position == (5.0, 3.0) and d.confidence == 0.9

    def test_two_maxima_two_pixels_apart_both_kept(self):
        g = np.zeros((5, 7))
        g[2, 2] = 0.8
        g[2, 4] = 0.7
        assert sorted(as_tuples(find_peaks(g))) == [(2, 2, 0.8), (4, 2, 0.7)]

    def test_plateau_yields_nothing(self):
        g = np.zeros((6, 6))
        g[2:4, 2:4] = 0.9
        assert find_peaks(g) == []
        assert find_peaks(np.full((4, 4), 0.9)) == []

    def test_border_and_corner_peaks(self):
        g = np.zeros((5, 5))
        g[0, 0] = 0.6
        g[4, 2] = 0.7
        g[2, 4] = 0.5
        assert sorted(as_tuples(find_peaks(g))) == [(0, 0, 0.6), (2, 4, 0.7), (4, 2, 0.5)]

    def test_tau_is_strict(self):
        g = np.zeros((3, 3))
        g[1, 1] = 0.35
        assert find_peaks(g) == []
        g[1, 1] = np.nextafter(0.35, 1)
        assert len(find_peaks(g)) == 1

    def test_delta_thinning_keeps_stronger(self):
        g = np.zeros((5, 5))
        g[1, 1] = 0.6
        g[2, 2] = 0.9  # diagonal neighbours are not compared by the 4-neighbour rule
        assert as_tuples(find_peaks(g, PeakParams(delta=1.5))) == [(2, 2, 0.9)]
        assert len(find_peaks(g, PeakParams(delta=1.0))) == 2

    def test_equal_confidence_ties_row_major(self):
        g = np.zeros((3, 5))
        g[1, 1] = 0.8
        g[1, 3] = 0.8
        dets = find_peaks(g, PeakParams(delta=3.0))
        assert as_tuples(dets) == [(1, 1, 0.8)]

    def test_random_maps_match_oracle(self):
        rng = np.random.default_rng(1234)
        mismatches = 0
        for trial in range(1000):
            h, w = rng.integers(1, 17, size=2)
            if trial % 2:
                g = np.round(rng.random((h, w)) / 0.05) * 0.05  # quantized: many ties and plateaus
            else:
                g = rng.random((h, w))
            tau = float(rng.choice([0.05, 0.35, 0.6]))
            delta = float(rng.choice([0.0, 1.0, 1.5, 2.5]))
            got = as_tuples(find_peaks(g, PeakParams(tau, delta)))
            mismatches += got != brute_force_peaks(g, tau, delta)
        assert mismatches == 0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_transpose_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        g = np.round(rng.random((9, 12)) / 0.1) * 0.1
        a = {(x, y) for x, y, _ in as_tuples(find_peaks(g, PeakParams(0.35, 0.0)))}
        b = {(y, x) for x, y, _ in as_tuples(find_peaks(g.T, PeakParams(0.35, 0.0)))}
        assert a == b

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_output_properties_and_tau_monotone(self, seed):
        rng = np.random.default_rng(seed)
        g = rng.random((12, 12))
        prev = None
        for tau in (0.1, 0.35, 0.5, 0.8):
            dets = find_peaks(g, PeakParams(tau, 1.0))
            assert all(d.confidence > tau for d in dets)
            for i, a in enumerate(dets):
                for b in dets[i + 1:]:
                    assert math.dist(a.position, b.position) > 1.0
            if prev is not None:
                assert len(dets) <= prev
            prev = len(dets)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            find_peaks(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            PeakParams(tau=1.0)
        with pytest.raises(ValueError):
            PeakParams(delta=-1)


class TestImageSpace:
    def test_stride_eight(self):
        assert map_to_image(32, 32, 8) == (259.5, 259.5)

    def test_stride_one_identity(self):
        assert map_to_image(3, 7, 1) == (3, 7)

    def test_round_trip_bound(self):
        s = 8
        for x in np.arange(0, 64, 0.25):
            p = math.floor((x + 0.5) / s)  # nearest map cell under the centre mapping
            assert abs(map_to_image(p, p, s)[0] - x) <= s / 2

    def test_to_image_space(self):
        dets = [Detection((1.0, 2.0), 0.5, (1.0, 2.0))]
        assert to_image_space(dets, 8)[0].image_position == (11.5, 19.5)

    def test_find_peaks_stride(self):
        g = np.zeros((4, 4))
        g[2, 1] = 0.9
        assert find_peaks(g, stride=8)[0].image_position == (11.5, 19.5)


class TestCsv:
    def test_round_trip(self, tmp_path):
        rows = [("a", [Detection((1.0, 2.0), 0.75, (11.5, 19.5))]), ("b", [])]
        assert detections_csv(rows).splitlines() == [
            "image_id,x_image,y_image,confidence", "a,11.500000,19.500000,0.750000"]
        write_detections(tmp_path / "d.csv", rows)
        got = read_detections(tmp_path / "d.csv")
        np.testing.assert_array_equal(got["a"], [[11.5, 19.5]])

    def test_bad_header(self, tmp_path):
        (tmp_path / "d.csv").write_text("x,y\n")
        with pytest.raises(ValueError):
            read_detections(tmp_path / "d.csv")
