import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abstain import model as M
from abstain.corpus import Role, Split
from abstain.errors import IndexTooSmall, SingleClass
from abstain.evalx import (
    REPORT_SCHEMA,
    Method,
    Thresholds,
    aupr,
    auroc,
    calibrate,
    candidate_thresholds,
    det_err,
    evaluate,
    knn_reference,
    knn_score,
    rates_at,
    scenario_rows,
    score,
)

from .conftest import unit_rows


def brute_auroc(s, y):
    pos = [a for a, l in zip(s, y) if l]
    neg = [a for a, l in zip(s, y) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def brute_ap(s, y):
    # precision at each positive counts every item scored at least as high
    s, y = np.asarray(s), np.asarray(y, dtype=bool)
    precs = [np.sum(y & (s >= t)) / np.sum(s >= t) for t in s[y]]
    return float(np.mean(precs))


labelled = st.integers(4, 60).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 12).map(float), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n).filter(lambda y: 0 < sum(y) < len(y)),
    )
)


class TestAuroc:
    def test_separated(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_equal(self):
        assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_fixture(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_single_class(self):
        with pytest.raises(SingleClass):
            auroc([0.1, 0.2], [1, 1])

    @settings(max_examples=100)
    @given(labelled)
    def test_brute_force(self, data):
        s, y = data
        assert abs(auroc(s, y) - brute_auroc(s, y)) <= 1e-12

    @settings(max_examples=50)
    @given(labelled)
    def test_orientation(self, data):
        s, y = np.asarray(data[0]), np.asarray(data[1])
        a = auroc(s, y)
        assert abs(auroc(-s, ~y) - a) <= 1e-12
        assert abs(auroc(-s, y) - (1.0 - a)) <= 1e-12

    @settings(max_examples=50)
    @given(labelled)
    def test_monotone_invariance(self, data):
        s, y = np.asarray(data[0]), data[1]
        a = auroc(s, y)
        assert auroc(np.exp(s / 4), y) == a
        assert auroc(3.0 * s - 7.0, y) == a

    def test_matches_sklearn(self):
        sk = pytest.importorskip("sklearn.metrics")
        rng = np.random.default_rng(0)
        s, y = rng.standard_normal(500), rng.random(500) < 0.3
        assert auroc(s, y) == pytest.approx(sk.roc_auc_score(y, s), abs=1e-12)


class TestAupr:
    def test_separated(self):
        assert aupr([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_reversed(self):
        s = [0.9, 0.8, 0.7, 0.2, 0.1]
        y = [0, 0, 0, 1, 1]
        assert aupr(s, y) == pytest.approx(brute_ap(s, y), abs=1e-15)
        assert aupr(s, y) == pytest.approx((1 / 4 + 2 / 5) / 2, abs=1e-15)

    @settings(max_examples=100)
    @given(labelled)
    def test_brute_force(self, data):
        s, y = data
        assert abs(aupr(s, y) - brute_ap(s, y)) <= 1e-12

    def test_prevalence_baseline(self):
        rng = np.random.default_rng(1)
        y = rng.random(10_000) < 0.3
        assert abs(aupr(rng.random(10_000), y) - y.mean()) < 0.05

    def test_matches_sklearn_without_ties(self):
        sk = pytest.importorskip("sklearn.metrics")
        rng = np.random.default_rng(2)
        s, y = rng.standard_normal(400), rng.random(400) < 0.4
        assert aupr(s, y) == pytest.approx(sk.average_precision_score(y, s), abs=1e-12)


def sweep_oracle(s, y):
    s, y = np.asarray(s), np.asarray(y, dtype=bool)
    u = sorted(set(s.tolist()))
    cands = [-np.inf] + [(a + b) / 2 for a, b in zip(u, u[1:])] + [np.inf]
    rows = []
    for t in cands:
        fpr = Fraction(sum(1 for v, l in zip(s, y) if not l and v > t), int((~y).sum()))
        tpr = Fraction(sum(1 for v, l in zip(s, y) if l and v > t), int(y.sum()))
        rows.append((t, fpr, tpr))
    return rows


class TestCalibrate:
    def test_separated(self):
        th = calibrate([0.1, 0.2, 0.3, 0.7, 0.8], [0, 0, 0, 1, 1])
        f, t = rates_at([0.1, 0.2, 0.3, 0.7, 0.8], [0, 0, 0, 1, 1], th.tau_deterr)
        assert det_err(f, t) == 0.0
        assert th.tau_deterr == 0.5
        assert th.calibrated_on == "val"

    def test_det_err_identity(self):
        assert det_err(0.2, 0.9) == pytest.approx(0.15, abs=1e-15)

    def test_candidates(self):
        np.testing.assert_array_equal(candidate_thresholds([3.0, 1.0, 1.0, 2.0]), [-np.inf, 1.5, 2.5, np.inf])

    @pytest.mark.parametrize("seed", range(5))
    def test_exhaustive_oracle_20_points(self, seed):
        rng = np.random.default_rng(seed)
        y = np.r_[np.zeros(10, bool), np.ones(10, bool)]
        s = np.round(rng.normal(y * 1.0, 1.0), 1)
        rows = sweep_oracle(s, y)
        best = min(rows, key=lambda r: (r[1] + 1 - r[2], r[0]))
        near = min(rows, key=lambda r: (abs(r[2] - Fraction(19, 20)), -r[2], r[1], r[0]))
        th = calibrate(s, y)
        assert th.tau_deterr == best[0]
        assert th.tau_95 == near[0]
        errs = [float(f + 1 - t) / 2 for _, f, t in rows]
        f, t = rates_at(s, y, th.tau_deterr)
        assert det_err(f, t) == pytest.approx(min(errs), abs=1e-15)

    def test_tau95_prefers_higher_tpr(self):
        # TPR 0.9 and 1.0 are both 0.05 from target; the higher one wins
        s = np.r_[np.arange(10) / 10, np.arange(10) / 10 + 0.05]
        y = np.r_[np.zeros(10, bool), np.ones(10, bool)]
        th = calibrate(s, y)
        _, tpr = rates_at(s, y, th.tau_95)
        assert tpr == 1.0

    def test_single_class(self):
        with pytest.raises(SingleClass):
            calibrate([1.0, 2.0], [0, 0])


class TestEvaluate:
    def test_hand_fixture(self):
        s = [0.1, 0.2, 0.3, 0.4, 0.6, 0.35, 0.5, 0.7, 0.8, 0.9]
        y = [0] * 5 + [1] * 5
        rep = evaluate(s, y, Thresholds(0.45, 0.25), "ebm_energy", "all", "hard", 3)
        assert rep.auroc == pytest.approx(22 / 25, abs=1e-15)
        assert rep.aupr == pytest.approx((3 + 4 / 5 + 5 / 7) / 5, abs=1e-15)
        assert rep.det_err == pytest.approx(0.2, abs=1e-15)
        assert rep.fpr_at_95 == pytest.approx(0.6, abs=1e-15)
        assert (rep.n_id, rep.n_ood, rep.seed) == (5, 5, 3)

    def test_degenerate_threshold(self):
        assert rates_at([0.1, 0.9, 0.5], [0, 1, 0], -np.inf) == (1.0, 1.0)

    def test_oracle_scorer(self):
        y = np.r_[np.zeros(30, bool), np.ones(30, bool)]
        s = y.astype(float)
        rep = evaluate(s, y, calibrate(s, y))
        assert rep.auroc == 1.0 and rep.det_err == 0.0

    def test_schema(self):
        jsonschema = pytest.importorskip("jsonschema")
        rep = evaluate([0.1, 0.9, 0.2, 0.8], [0, 1, 0, 1], Thresholds(0.5, -np.inf), "knn", "all", "easy", 0)
        d = rep.to_dict()
        d["tau_95"] = repr(d["tau_95"])
        jsonschema.validate(d, REPORT_SCHEMA)


class TestScoring:
    def test_knn_self_is_zero(self):
        ref = unit_rows(np.random.default_rng(0), 10, 6)
        assert knn_score(ref, ref[3], k=1)[0] == pytest.approx(0.0, abs=1e-12)

    def test_knn_index_too_small(self):
        with pytest.raises(IndexTooSmall):
            knn_score(np.eye(3), np.eye(3)[0], k=5)

    def test_knn_matches_sort(self):
        rng = np.random.default_rng(1)
        ref, q = unit_rows(rng, 40, 5), unit_rows(rng, 7, 5)
        expect = 1.0 - np.sort(q @ ref.T, axis=1)[:, -5]
        np.testing.assert_allclose(knn_score(ref, q), expect, atol=1e-15)

    def test_knn_orientation(self, small_store):
        s = small_store
        ref = knn_reference(s)
        id_probe = s.vectors[s.where(Role.ANCHOR, Split.TEST)[0]]
        far = s.vectors[s.where(Role.EASY_OOD, Split.TEST)[0]]
        assert score(Method.KNN, ref, far) > score(Method.KNN, ref, id_probe)

    def test_knn_reference_is_train_id(self, small_store):
        s = small_store
        ref = knn_reference(s)
        rows = np.flatnonzero((s.splits == Split.TRAIN) & np.isin(s.roles, (Role.ANCHOR, Role.POSITIVE_POOL)))
        assert ref.shape[0] == rows.size

    def test_softmax_prob_range(self):
        p = M.init_params(12, 0)
        x = unit_rows(np.random.default_rng(2), 1000, 12)
        out = score("softmax_prob", p, x)
        assert out.shape == (1000,) and np.all((out >= 0) & (out <= 1))

    def test_ebm_score_is_energy(self):
        p = M.init_params(12, 0)
        x = unit_rows(np.random.default_rng(3), 4, 12)
        np.testing.assert_array_equal(score("ebm_energy", p, x), M.energy(p, M.project(p, x)))


class TestScenarios:
    @pytest.mark.parametrize("split", [Split.VAL, Split.TEST])
    def test_shapes(self, small_store, split):
        s = small_store
        n_id = s.where(Role.ANCHOR, split).size
        for sc, n_ood in (("hard", n_id), ("easy", n_id), ("mixed", 2 * n_id)):
            rows, lab = scenario_rows(s, split, sc)
            assert (~lab).sum() == n_id and lab.sum() == n_ood
            assert np.all(s.splits[rows] == split)

    def test_roles(self, small_store):
        s = small_store
        rows, lab = scenario_rows(s, Split.TEST, "mixed")
        assert set(s.roles[rows[~lab]].tolist()) == {Role.ANCHOR}
        assert set(s.roles[rows[lab]].tolist()) == {Role.HARD_NEGATIVE, Role.EASY_OOD}
        hard_rows, hard_lab = scenario_rows(s, Split.TEST, "hard")
        assert {s.groups[i] for i in hard_rows[hard_lab]} == {s.groups[i] for i in hard_rows[~hard_lab]}
