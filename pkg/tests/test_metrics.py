"""Correlation metrics against brute-force definitional oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ahiq.metrics import (
    DegenerateInputError,
    EvalReport,
    main_score,
    plcc,
    psnr,
    rank_average_ties,
    srocc,
)


def plcc_oracle(x, y):
    """Direct formula: sum of centered products over product of norms."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm, ym = x.mean(), y.mean()
    num = sum((a - xm) * (b - ym) for a, b in zip(x, y))
    den = math.sqrt(sum((a - xm) ** 2 for a in x) * sum((b - ym) ** 2 for b in y))
    return num / den


def ranks_oracle(x):
    """O(n^2) fractional ranking: 1 + count(smaller) + count(equal-before+after)/2."""
    x = list(x)
    out = []
    for v in x:
        smaller = sum(1 for u in x if u < v)
        equal = sum(1 for u in x if u == v)
        out.append(smaller + (equal + 1) / 2.0)
    return np.array(out)


class TestPlcc:
    def test_affine_is_one(self):
        x = [1.0, 2.0, 5.0, 9.0]
        y = [2 * v + 3 for v in x]
        assert plcc(x, y) == pytest.approx(1.0, abs=1e-12)

    def test_negation_is_minus_one(self):
        x = [0.5, 1.5, -2.0, 4.0]
        assert plcc(x, [-v for v in x]) == pytest.approx(-1.0, abs=1e-12)

    def test_worked_example(self):
        assert plcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_zero_variance_raises(self):
        with pytest.raises(DegenerateInputError):
            plcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_matches_oracle_on_random(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 101))
            x = rng.standard_normal(n)
            y = rng.standard_normal(n)
            assert plcc(x, y) == pytest.approx(plcc_oracle(x, y), abs=1e-10)

    @given(
        st.lists(st.floats(-100, 100), min_size=3, max_size=40).filter(
            lambda v: max(v) - min(v) > 1e-6
        ),
        st.floats(0.01, 50),
        st.floats(-100, 100),
    )
    def test_affine_invariance(self, xs, a, b):
        ys = [v * 2.5 - 3 for v in xs]  # arbitrary correlate
        base = plcc(xs, ys)
        shifted = plcc([a * v + b for v in xs], ys)
        assert shifted == pytest.approx(base, abs=1e-9)

    def test_symmetry(self, rng):
        x = rng.standard_normal(30)
        y = rng.standard_normal(30)
        assert plcc(x, y) == pytest.approx(plcc(y, x), abs=1e-14)


class TestSrocc:
    def test_monotone_is_one(self):
        x = [1.0, 2.0, 3.5, 7.0]
        assert srocc(x, [math.exp(v) for v in x]) == pytest.approx(1.0, abs=1e-12)

    def test_antitone_is_minus_one(self):
        x = [1.0, 2.0, 3.0, 4.0, 5.0]
        assert srocc(x, x[::-1]) == pytest.approx(-1.0, abs=1e-12)

    def test_tie_case_matches_rank_then_pearson(self):
        x = [1, 2, 3, 4, 5]
        y = [1, 6, 7, 8, 7]
        expected = plcc_oracle(ranks_oracle(x), ranks_oracle(y))
        assert srocc(x, y) == pytest.approx(expected, abs=1e-12)

    def test_ranks_match_oracle_with_ties(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 101))
            x = rng.integers(0, 10, size=n).astype(float)  # many ties
            np.testing.assert_allclose(rank_average_ties(x), ranks_oracle(x), atol=1e-12)

    def test_matches_brute_force_on_random(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 101))
            x = rng.integers(0, 30, size=n).astype(float)
            y = rng.integers(0, 30, size=n).astype(float)
            rx, ry = ranks_oracle(x), ranks_oracle(y)
            if np.ptp(rx) == 0 or np.ptp(ry) == 0:
                continue
            assert srocc(x, y) == pytest.approx(plcc_oracle(rx, ry), abs=1e-10)

    def test_equals_plcc_of_ranks_when_tie_free(self, rng):
        x = rng.permutation(50).astype(float)
        y = rng.permutation(50).astype(float)
        assert srocc(x, y) == pytest.approx(plcc(ranks_oracle(x), ranks_oracle(y)), abs=1e-12)

    def test_monotone_transform_invariance(self, rng):
        x = rng.standard_normal(40)
        y = rng.standard_normal(40)
        base = srocc(x, y)
        assert srocc(np.exp(x), y) == pytest.approx(base, abs=1e-12)
        assert srocc(x, 5 * y + 2) == pytest.approx(base, abs=1e-12)

    def test_all_equal_raises(self):
        with pytest.raises(DegenerateInputError):
            srocc([3.0, 3.0, 3.0], [1.0, 2.0, 3.0])


class TestMainScore:
    def test_fusion_table_row(self):
        assert main_score(0.823, 0.813) == pytest.approx(1.636, abs=1e-12)

    def test_challenge_table_row(self):
        # printed table value 1.651 comes from pre-rounding sums; the rounded
        # addends themselves sum to 1.650
        assert main_score(0.828, 0.822) == pytest.approx(1.650, abs=1e-12)
        assert abs(main_score(0.828, 0.822) - 1.651) <= 1e-3 + 1e-12

    def test_zero(self):
        assert main_score(0.0, 0.0) == 0.0


class TestPsnr:
    def test_identical_is_infinite(self, rng):
        img = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        assert psnr(img, img) == math.inf

    def test_uniform_unit_error(self):
        ref = np.zeros((4, 4), dtype=np.float64)
        dist = np.ones((4, 4), dtype=np.float64)
        assert psnr(ref, dist) == pytest.approx(10 * math.log10(255.0**2), abs=1e-9)
        assert psnr(ref, dist) == pytest.approx(48.1308, abs=1e-3)

    def test_black_vs_white_is_zero(self):
        ref = np.zeros((4, 4), dtype=np.float64)
        dist = np.full((4, 4), 255.0)
        assert psnr(ref, dist) == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((3, 3)))


class TestEvalReport:
    def test_csv_layout(self):
        rep = EvalReport.from_rows([("b", 2.0, 2.5), ("a", 1.0, 1.0)])
        text = rep.to_csv()
        lines = text.strip().split("\n")
        assert lines[0] == "sample_id,predicted,mos"
        assert lines[1].startswith("a,")  # sorted by sample id
        assert lines[-3].startswith("# plcc=")
        assert lines[-2].startswith("# srocc=")
        assert lines[-1].startswith("# main=")
        for tail in lines[-3:]:
            decimals = tail.split("=")[1]
            assert len(decimals.split(".")[1]) == 6

    def test_degenerate_predictions_surface(self):
        with pytest.raises(DegenerateInputError):
            EvalReport.from_rows([("a", 1.0, 1.0), ("b", 1.0, 2.0)])
