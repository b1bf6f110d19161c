import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flab.errors import InputError
from flab.fad import fit_stats, frechet_distance
from flab.selection import (Candidate, CandidatePool, SelectionPolicy,
                         build_audio_target_pool, calibrate_class_threshold,
                         multi_target_select, rescore, select)


def make_pool(scores, prefix="c"):
    cands = []
    for i, s in enumerate(scores):
        e = np.zeros(4, dtype=np.float32)
        e[0] = 1.0
        cands.append(Candidate(f"{prefix}{i:03d}", None, e, float(s)))
    return CandidatePool(cands)


def unit(v):
    v = np.asarray(v, dtype=np.float32)
    return v / np.linalg.norm(v)


class TestPolicy:
    def test_validation(self):
        with pytest.raises(InputError):
            SelectionPolicy(pool_size=0)
        with pytest.raises(InputError):
            SelectionPolicy(mode="best")
        with pytest.raises(InputError):
            SelectionPolicy(thresholds={"a": 1.5})
        with pytest.raises(InputError):
            SelectionPolicy(target_source="oracle")

    def test_default_threshold(self):
        p = SelectionPolicy(thresholds={"a": 0.3})
        assert p.threshold_for("a") == 0.3
        assert p.threshold_for("b") == -1.0


class TestSelectTop1:
    def test_sort_oracle_200_pools(self):
        rng = np.random.default_rng(0)
        policy = SelectionPolicy(mode="top1")
        for trial in range(200):
            n = int(rng.integers(1, 12))
            scores = np.round(rng.uniform(-1, 1, size=n), 3)  # rounding forces ties
            want = int(rng.integers(1, n + 1))
            pool = make_pool(scores)
            got = select(pool, policy, want)
            oracle = [c.clip_id for c in
                      sorted(pool.candidates, key=lambda c: (-c.score, c.clip_id))][:want]
            assert got == oracle, f"trial {trial}"

    def test_degenerate_single_candidate(self):
        pool = make_pool([-0.9])
        assert select(pool, SelectionPolicy(mode="top1"), 1) == ["c000"]

    def test_want_exceeds_pool(self):
        with pytest.raises(InputError):
            select(make_pool([0.1, 0.2]), SelectionPolicy(mode="top1"), 3)

    def test_empty_pool(self):
        with pytest.raises(InputError):
            select(CandidatePool([]), SelectionPolicy(mode="top1"), 1)


class TestSelectThreshold:
    def test_vacuous_threshold_returns_everything(self):
        pool = make_pool([0.5, -0.5, 0.0])
        policy = SelectionPolicy(mode="threshold", thresholds={"k": -1.0})
        assert len(select(pool, policy, 1, class_name="k")) == 3

    def test_threshold_filters(self):
        pool = make_pool([0.9, 0.5, 0.1, -0.3])
        policy = SelectionPolicy(mode="threshold", thresholds={"k": 0.4}, backfill=False)
        assert select(pool, policy, 2, class_name="k") == ["c000", "c001"]

    def test_backfill_reaches_want(self):
        pool = make_pool([0.9, 0.5, 0.1, -0.3])
        policy = SelectionPolicy(mode="threshold", thresholds={"k": 0.8})
        got = select(pool, policy, 3, class_name="k")
        assert got == ["c000", "c001", "c002"]

    def test_monotonicity_in_theta(self):
        rng = np.random.default_rng(5)
        scores = rng.uniform(-1, 1, size=20)
        pool = make_pool(scores)
        sizes = []
        for theta in np.linspace(-1, 1, 9):
            policy = SelectionPolicy(mode="threshold", thresholds={"k": float(theta)},
                                     backfill=False)
            sizes.append(len(select(pool, policy, 1, class_name="k")))
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=15),
           st.floats(-1, 1), st.integers(1, 5))
    def test_selection_properties(self, scores, theta, want):
        pool = make_pool(scores)
        policy = SelectionPolicy(mode="threshold", thresholds={"k": float(theta)})
        got = select(pool, policy, want, class_name="k")
        ids = [c.clip_id for c in pool.candidates]
        assert set(got) <= set(ids)       # never invents clips
        assert len(set(got)) == len(got)  # no duplicates


class TestRescore:
    def test_cosine_identity_and_orthogonal(self):
        target = unit([1, 0, 0, 0])
        cands = [Candidate("a", None, unit([1, 0, 0, 0]), 0.0),
                 Candidate("b", None, unit([0, 1, 0, 0]), 0.0)]
        pool = rescore(CandidatePool(cands), target)
        assert pool.candidates[0].score == pytest.approx(1.0, abs=1e-6)
        assert pool.candidates[1].score == pytest.approx(0.0, abs=1e-6)

    def test_target_scale_invariance_of_top1(self):
        rng = np.random.default_rng(1)
        embs = [unit(rng.normal(size=6)) for _ in range(10)]
        cands = [Candidate(f"c{i}", None, e, 0.0) for i, e in enumerate(embs)]
        target = unit(rng.normal(size=6))
        policy = SelectionPolicy(mode="top1")
        base = select(rescore(CandidatePool(cands), target), policy, 3)
        # Rescaling the target by c > 0 must not change the selected set;
        # cosine is scale-invariant, enforced by unit-norm validation.
        for c in (0.5, 2.0):
            scaled = unit(target * c)
            assert select(rescore(CandidatePool(cands), scaled), policy, 3) == base

    def test_non_unit_target_rejected(self):
        cands = [Candidate("a", None, unit([1, 1, 0, 0]), 0.0)]
        with pytest.raises(InputError):
            rescore(CandidatePool(cands), np.array([2.0, 0, 0, 0], dtype=np.float32))


class TestMultiTarget:
    def _pool(self, rng, n=12):
        return CandidatePool([Candidate(f"c{i:02d}", None, unit(rng.normal(size=5)), 0.0)
                              for i in range(n)])

    def test_single_target_equals_select(self, rng):
        pool = self._pool(rng)
        target = unit(rng.normal(size=5))
        policy = SelectionPolicy(mode="top1")
        got = multi_target_select(pool, [target], policy, 4, seed=0)
        expected = select(rescore(pool, target), policy, 4)
        assert got == expected

    def test_deterministic(self, rng):
        pool = self._pool(rng)
        targets = [unit(rng.normal(size=5)) for _ in range(3)]
        policy = SelectionPolicy(mode="top1")
        a = multi_target_select(pool, targets, policy, 5, seed=9)
        b = multi_target_select(pool, targets, policy, 5, seed=9)
        assert a == b

    def test_no_duplicates_and_subset(self, rng):
        pool = self._pool(rng)
        targets = [unit(rng.normal(size=5)) for _ in range(4)]
        got = multi_target_select(pool, targets, SelectionPolicy(mode="top1"), 6, seed=3)
        assert len(set(got)) == 6
        assert set(got) <= {c.clip_id for c in pool.candidates}

    def test_empty_targets(self, rng):
        with pytest.raises(InputError):
            multi_target_select(self._pool(rng), [], SelectionPolicy(), 2, seed=0)


class TestAudioTargetPool:
    def test_whole_class(self, rng):
        embs = np.stack([unit(rng.normal(size=4)) for _ in range(6)])
        pool, idx = build_audio_target_pool(embs, 6)
        assert pool.shape == (6, 4)
        assert sorted(idx) == list(range(6))

    def test_top1_matches_brute_force(self, rng):
        for _ in range(10):
            embs = np.stack([unit(rng.normal(size=5)) for _ in range(9)])
            _, idx = build_audio_target_pool(embs, 1)
            sims = embs @ embs.T
            means = (sims.sum(axis=1) - np.diag(sims)) / 8
            assert idx[0] == int(np.argmax(means))

    def test_top_m_bound(self, rng):
        embs = np.stack([unit(rng.normal(size=4)) for _ in range(5)])
        with pytest.raises(InputError):
            build_audio_target_pool(embs, 6)


class TestCalibration:
    def test_single_point_grid(self, rng):
        embs = rng.normal(size=(20, 4))
        scores = rng.uniform(-1, 1, size=20)
        ref = fit_stats(rng.normal(size=(30, 4)))
        theta, rows = calibrate_class_threshold(scores, embs, ref, [-1.0])
        assert theta == -1.0
        assert len(rows) == 1

    def test_argmin_never_worse_than_no_selection(self, rng):
        grid = [-1.0, 0.0, 0.2, 0.4, 0.6]
        for _ in range(5):
            embs = rng.normal(size=(30, 4))
            scores = rng.uniform(-1, 1, size=30)
            ref = fit_stats(rng.normal(size=(25, 4)))
            theta, rows = calibrate_class_threshold(scores, embs, ref, grid)
            by_theta = {r["theta"]: r["fad"] for r in rows if r["fad"] is not None}
            assert by_theta[theta] <= by_theta[-1.0]

    def test_tie_prefers_smaller_theta(self, rng):
        # Thresholds below every score select everything: all grid points tie.
        embs = rng.normal(size=(10, 3))
        scores = np.full(10, 0.9)
        ref = fit_stats(rng.normal(size=(12, 3)))
        theta, _ = calibrate_class_threshold(scores, embs, ref, [-1.0, -0.5, 0.0])
        assert theta == -1.0

    def test_underfull_points_skipped(self, rng):
        embs = rng.normal(size=(6, 3))
        scores = np.array([0.9, 0.88, -0.5, -0.6, -0.7, -0.8])
        ref = fit_stats(rng.normal(size=(12, 3)))
        theta, rows = calibrate_class_threshold(scores, embs, ref, [-1.0, 0.85, 0.95])
        skipped = [r for r in rows if r["fad"] is None]
        assert len(skipped) == 1 and skipped[0]["theta"] == 0.95

    def test_deterministic(self, rng):
        embs = rng.normal(size=(15, 3))
        scores = rng.uniform(-1, 1, size=15)
        ref = fit_stats(rng.normal(size=(12, 3)))
        a = calibrate_class_threshold(scores, embs, ref, [-1.0, 0.0, 0.5])
        b = calibrate_class_threshold(scores, embs, ref, [-1.0, 0.0, 0.5])
        assert a == b
