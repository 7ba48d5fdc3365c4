import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petlsv.errors import InputError
from petlsv.evalkit import (
    DCF_P01,
    DCF_P05,
    DcfParams,
    ScoreSet,
    compute_eer,
    compute_min_dcf,
    metrics_report,
    score_embeddings,
)


def brute_rates(scores, is_target):
    """O(n^2) sweep: thresholds at each distinct score and +inf."""
    scores = [float(s) for s in scores]
    tar = [s for s, t in zip(scores, is_target) if t]
    non = [s for s, t in zip(scores, is_target) if not t]
    out = []
    for thr in sorted(set(scores)) + [float("inf")]:
        miss = sum(1 for s in tar if s < thr) / len(tar)
        fa = sum(1 for s in non if s >= thr) / len(non)
        out.append((miss, fa))
    return out


def brute_eer(scores, is_target):
    pts = brute_rates(scores, is_target)
    for i, (m, f) in enumerate(pts):
        if m >= f:
            if m == f or i == 0:
                return m
            m0, f0 = pts[i - 1]
            # intersect segment (m0,f0)->(m,f) with the diagonal
            a = (f0 - m0) / ((m - m0) - (f - f0))
            return m0 + a * (m - m0)
    raise AssertionError("unreachable")


def brute_min_dcf(scores, is_target, p_tar, c_miss=1.0, c_fa=1.0):
    pts = [(0.0, 1.0)] + brute_rates(scores, is_target)
    best = min(c_miss * p_tar * m + c_fa * (1 - p_tar) * f for m, f in pts)
    return best / min(c_miss * p_tar, c_fa * (1 - p_tar))


def ss(tar, non):
    return ScoreSet(np.r_[tar, non], np.r_[np.ones(len(tar), bool), np.zeros(len(non), bool)])


class TestEer:
    def test_perfect_separation(self):
        assert compute_eer(ss([0.9, 0.8], [0.2, 0.1])) == 0.0

    def test_interleaved(self):
        assert compute_eer(ss([3, 1], [2, 0])) == 0.5

    def test_interpolated_crossing(self):
        s = ss([1.0, 2.0, 3.0], [0.5, 1.5])
        assert compute_eer(s) == pytest.approx(brute_eer(s.scores, s.is_target), abs=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        s = ss(rng.normal(1, 1, 30), rng.normal(0, 1, 40))
        shifted = ScoreSet(s.scores + 7.25, s.is_target)
        assert compute_eer(shifted) == compute_eer(s)

    def test_needs_both_classes(self):
        with pytest.raises(InputError):
            compute_eer(ScoreSet([1.0, 2.0], [True, True]))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 60), st.integers(1, 60))
    def test_negation_with_flipped_labels(self, seed, nt, nn):
        rng = np.random.default_rng(seed)
        s = ss(rng.normal(0.5, 1, nt), rng.normal(0, 1, nn))
        flipped = ScoreSet(-s.scores, ~s.is_target)
        assert compute_eer(flipped) == pytest.approx(compute_eer(s), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s = ss(rng.normal(0.5, 1, 25), rng.normal(0, 1, 31))
        t = ScoreSet(np.exp(s.scores) * 3 + 1, s.is_target)
        assert compute_eer(t) == pytest.approx(compute_eer(s), abs=1e-12)
        assert compute_min_dcf(t) == pytest.approx(compute_min_dcf(s), abs=1e-12)


class TestMinDcf:
    def test_perfect_separation(self):
        assert compute_min_dcf(ss([0.9, 0.8], [0.2, 0.1])) == 0.0

    def test_all_scores_identical(self):
        s = ss([0.3] * 4, [0.3] * 6)
        assert compute_min_dcf(s, DCF_P01) == 1.0
        assert compute_min_dcf(s, DCF_P05) == 1.0

    def test_bounds(self):
        rng = np.random.default_rng(1)
        s = ss(rng.normal(0, 1, 50), rng.normal(0, 1, 50))
        assert 0.0 <= compute_min_dcf(s) <= 1.0
        assert 0.0 <= compute_eer(s) <= 1.0

    def test_param_validation(self):
        with pytest.raises(InputError):
            DcfParams(p_tar=1.0)
        with pytest.raises(InputError):
            DcfParams(c_fa=0.0)


@pytest.mark.parametrize("seed", range(20))
def test_random_set_matches_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    n = 50
    scores = np.round(rng.normal(0, 1, n), 1)  # rounding forces ties
    labels = rng.random(n) < 0.4
    labels[0], labels[1] = True, False
    s = ScoreSet(scores, labels)
    assert compute_eer(s) == pytest.approx(brute_eer(scores, labels), abs=1e-12)
    for p in (0.01, 0.05):
        assert compute_min_dcf(s, DcfParams(p)) == pytest.approx(brute_min_dcf(scores, labels, p), abs=1e-12)


def test_report_keys(tmp_path):
    rep = metrics_report(ss([0.9, 0.4], [0.5, 0.1, 0.0]))
    assert set(rep) == {"eer", "min_dcf_p01", "min_dcf_p05", "n_target", "n_nontarget"}
    assert (rep["n_target"], rep["n_nontarget"]) == (2, 3)
    json.dumps(rep)


class TestScoring:
    def test_self_trial_and_file(self, tmp_path):
        rng = np.random.default_rng(0)
        emb = {u: rng.standard_normal(8) for u in "abc"}
        trials = [(1, "a", "a"), (0, "a", "b"), (0, "c", "b")]
        s = score_embeddings(emb, trials)
        assert s.scores[0] == pytest.approx(1.0, abs=1e-12)
        s.write(tmp_path / "scores.txt")
        lines = (tmp_path / "scores.txt").read_text().splitlines()
        assert len(lines) == len(trials)
        assert lines[1].split()[:2] == ["a", "b"]

    def test_permutation(self):
        rng = np.random.default_rng(1)
        emb = {u: rng.standard_normal(8) for u in "abcd"}
        trials = [(1, "a", "b"), (0, "c", "d"), (0, "a", "d"), (1, "b", "c")]
        perm = [2, 0, 3, 1]
        s1 = score_embeddings(emb, trials)
        s2 = score_embeddings(emb, [trials[i] for i in perm])
        np.testing.assert_array_equal(s2.scores, s1.scores[perm])

    def test_missing_utterance(self):
        with pytest.raises(InputError, match="zz"):
            score_embeddings({"a": np.ones(2)}, [(1, "a", "zz")])
