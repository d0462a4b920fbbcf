import json
import random
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import dominance_oracle
from thinkroute.policy import (
    NON_THINK,
    THINK,
    FrontierPoint,
    InfeasibleTargetError,
    NoKneeWarning,
    PolicyArtifact,
    SweepData,
    calibrate_eta,
    default_eta_grid,
    dominates,
    epsilon_point,
    find_knee_index,
    freeze_policy,
    knee_point,
    pareto_filter,
    route,
    route_mask,
    solve_anchor,
    sweep_eta,
    umax_point,
    utopia_point,
)
from thinkroute.router import ModelFormatError


def pts(pairs):
    return [FrontierPoint(float(i), float(t), float(u), 0.0) for i, (t, u) in enumerate(pairs)]


def random_sweep(rng, n=40, positive=False):
    a = rng.normal(0.01, 0.05, n)
    if positive:
        a = np.abs(a) + 1e-6
    return SweepData(
        a_hat=a,
        delta_cost=rng.uniform(1, 500, n),
        tokens_think=rng.integers(200, 800, n).astype(float),
        tokens_non=rng.integers(10, 100, n).astype(float),
        utility_think=rng.uniform(0, 1, n),
        utility_non=rng.uniform(0, 1, n),
    )


def hand_data():
    # flip thresholds a/dc: 0.002, 0.0005, never (negative)
    return SweepData(
        a_hat=np.array([0.2, 0.05, -0.1]),
        delta_cost=np.array([100.0, 100.0, 100.0]),
        tokens_think=np.array([300.0, 300.0, 300.0]),
        tokens_non=np.array([30.0, 60.0, 90.0]),
        utility_think=np.array([0.9, 0.6, 0.3]),
        utility_non=np.array([0.5, 0.5, 0.5]),
    )


class TestRoute:
    def test_examples(self):
        assert route(0.165, 350, 0) == THINK
        assert route(0.165, 350, 1e-3) == NON_THINK
        assert route(-0.01, 1, 0) == NON_THINK

    @given(st.floats(-1, -1e-9), st.floats(1, 1e4), st.floats(0, 10))
    def test_negative_never_thinks(self, a, dc, eta):
        assert route(a, dc, eta) == NON_THINK

    def test_negative_eta(self):
        with pytest.raises(ValueError):
            route(0.1, 10, -1)
        with pytest.raises(ValueError):
            route_mask(np.ones(2), np.ones(2), -1)


class TestSweep:
    def test_endpoints(self):
        data = random_sweep(np.random.default_rng(0), positive=True)
        p0 = data.point(0.0)
        assert p0.mean_tokens == data.tokens_think.mean() and p0.utility == data.utility_think.mean()
        big = data.point(float(data.a_hat.max() / data.delta_cost.min()) * 1.01)
        assert big.mean_tokens == data.tokens_non.mean() and big.utility == data.utility_non.mean()
        grid = default_eta_grid(data.a_hat, data.delta_cost)
        assert sweep_eta(data, grid)[-1].think_fraction == 0.0

    def test_hand_dataset(self):
        data = hand_data()
        got = {e: data.point(e) for e in (0.0, 0.001, 0.003)}
        assert got[0.0].mean_tokens == pytest.approx((300 + 300 + 90) / 3)
        assert got[0.0].utility == pytest.approx((0.9 + 0.6 + 0.5) / 3)
        assert got[0.001].mean_tokens == pytest.approx((300 + 60 + 90) / 3)
        assert got[0.001].utility == pytest.approx((0.9 + 0.5 + 0.5) / 3)
        assert got[0.003].think_fraction == 0.0
        assert got[0.003].mean_tokens == pytest.approx(60.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_monotone_think_fraction(self, seed):
        data = random_sweep(np.random.default_rng(seed))
        sweep = sweep_eta(data)
        tf = [p.think_fraction for p in sweep]
        tok = [p.mean_tokens for p in sweep]
        assert all(b <= a for a, b in zip(tf, tf[1:]))
        assert all(b <= a + 1e-9 for a, b in zip(tok, tok[1:]))

    def test_validation(self):
        with pytest.raises(ValueError):
            SweepData(np.ones(2), np.ones(3), np.ones(2), np.ones(2), np.ones(2), np.ones(2))
        with pytest.raises(ValueError):
            SweepData(np.ones(2), np.array([0.5, 2]), np.ones(2), np.ones(2), np.ones(2), np.ones(2))
        with pytest.raises(ValueError):
            sweep_eta(hand_data(), [0.0])


class TestPareto:
    def test_examples(self):
        assert pareto_filter(pts([(1, 0.5)])) == pts([(1, 0.5)])
        front = pareto_filter(pts([(1, 0.5), (2, 0.6), (3, 0.55)]))
        assert [(p.mean_tokens, p.utility) for p in front] == [(1, 0.5), (2, 0.6)]
        assert len(pareto_filter(pts([(1, 0.5), (1, 0.5)]))) == 1

    def test_oracle(self):
        rng = random.Random(0)
        for _ in range(1000):
            n = rng.randint(1, 30)
            points = pts([(rng.randint(0, 20), rng.randint(0, 20) / 20) for _ in range(n)])
            front = pareto_filter(points)
            assert [(p.mean_tokens, p.utility) for p in front] == dominance_oracle(points)
            for p in points:
                assert any(q == p or dominates(q, p) or (q.mean_tokens, q.utility) == (p.mean_tokens, p.utility) for q in front)


class TestKnee:
    def test_examples(self):
        f = pts([(0, 0), (0.1, 0.8), (0.3, 0.9), (1, 1)])
        assert knee_point(f) == f[1]
        g = pts([(0, 0), (0.5, 0.9), (1, 1)])
        assert knee_point(g) == g[1]

    def test_collinear(self):
        f = pts([(0, 0), (0.5, 0.5), (1, 1)])
        with pytest.warns(NoKneeWarning):
            assert knee_point(f) == f[0]

    def test_short_frontier_falls_back(self):
        f = pts([(0, 0.2), (1, 0.9)])
        assert knee_point(f) == utopia_point(f)

    def test_affine_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(3, 15))
            t = np.sort(rng.uniform(0, 1000, n))
            u = np.sort(rng.uniform(0, 1, n))
            a, b, c, d = rng.uniform(0.1, 10), rng.uniform(-100, 100), rng.uniform(0.1, 10), rng.uniform(-1, 1)
            base = find_knee_index(pts(zip(t, u)))
            scaled = find_knee_index(pts(zip(a * t + b, c * u + d)))
            assert base == scaled


class TestAnchors:
    def test_utopia(self):
        assert utopia_point(pts([(0, 0.5), (0, 1), (1, 0)])).mean_tokens == 0
        f = pts([(0.1, 0.8), (0.3, 0.95), (0, 0), (1, 1)])
        assert utopia_point(f) == f[0]
        g = pts([(1, 0.5), (2, 0.9), (3, 0.9)])
        assert utopia_point(g, w_t=0) == g[1]
        with pytest.raises(ValueError):
            utopia_point(g, 0, 0)

    def test_epsilon(self):
        f = pts([(50, 0.60), (120, 0.66), (300, 0.70)])
        assert epsilon_point(f, 0.65, 0.0) == f[1]
        assert epsilon_point(f, 0.60, 0.0) == f[0]
        with pytest.raises(InfeasibleTargetError) as err:
            epsilon_point(f, 0.70, 0.01)
        assert err.value.max_utility == 0.70

    def test_epsilon_scan_oracle(self):
        rng = random.Random(2)
        for _ in range(300):
            f = pareto_filter(pts([(rng.randint(0, 50), rng.random()) for _ in range(rng.randint(1, 12))]))
            target = rng.random()
            feasible = sorted((p for p in f if p.utility >= target), key=lambda p: p.mean_tokens)
            if feasible:
                assert epsilon_point(f, target, 0.0) == feasible[0]
            else:
                with pytest.raises(InfeasibleTargetError):
                    epsilon_point(f, target, 0.0)

    def test_umax(self):
        f = pts([(1, 0.1), (2, 0.2), (3, 0.3)])
        assert umax_point(f) == f[-1]
        g = pts([(300, 0.5), (200, 0.5)])
        assert umax_point(g).mean_tokens == 200
        assert umax_point(f[:1]) == f[0]


class TestCalibrate:
    def test_endpoints(self):
        data = hand_data()
        assert data.point(calibrate_eta(data.tokens_think.mean(), data)).think_fraction >= 2 / 3
        grid = default_eta_grid(data.a_hat, data.delta_cost)
        assert calibrate_eta(data.tokens_non.mean(), data, grid) == pytest.approx(grid.max())

    def test_mid_budget(self):
        data = hand_data()
        target = (300 + 60 + 90) / 3
        eta = calibrate_eta(target, data)
        # the rule is >= 0, so the upper flip threshold itself still routes to Think
        assert 0.0005 < eta <= 0.002
        assert data.point(eta).mean_tokens == pytest.approx(target)


class TestArtifact:
    def artifact(self):
        p = FrontierPoint(0.001, 120.0, 0.7, 0.3)
        return freeze_policy("umax", 0.001, p, {"target_tokens": 120.0}, {"model_hash": "a" * 64})

    def test_freeze_matches_raw(self):
        art = self.artifact()
        rng = np.random.default_rng(0)
        for a, dc in zip(rng.normal(0, 0.1, 100), rng.uniform(1, 500, 100)):
            assert art.route(a, dc) == route(a, dc, 0.001)

    def test_hash_mismatch_warns(self):
        art = self.artifact()
        with pytest.warns(RuntimeWarning, match="frozen for model"):
            art.route(0.1, 10, "b" * 64)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            art.route(0.1, 10, "a" * 64)

    def test_roundtrip(self):
        art = self.artifact()
        assert PolicyArtifact.loads(art.dumps()) == art
        assert PolicyArtifact.loads(art.dumps()).dumps() == art.dumps()

    def test_corruption(self):
        text = self.artifact().dumps()
        body = json.loads(text)
        for bad in (text[:20], "[]", json.dumps(dict(body, eta_frozen=1.0)), json.dumps(dict(body, version=2))):
            with pytest.raises(ModelFormatError):
                PolicyArtifact.loads(bad)
        with pytest.raises(ValueError):
            PolicyArtifact("bogus", 0.1, 1, 1, 1)


class TestSolveAnchor:
    @pytest.mark.parametrize("anchor", ["knee", "utopia", "umax", "epsilon"])
    def test_anchor_point_is_realized(self, anchor):
        data = random_sweep(np.random.default_rng(4), n=200)
        points = sweep_eta(data)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NoKneeWarning)
            eta, point, _ = solve_anchor(anchor, points, data, epsilon=0.0)
        assert point == data.point(eta)

    def test_umax_meets_frontier_max(self):
        data = random_sweep(np.random.default_rng(5), n=200)
        points = sweep_eta(data)
        eta, point, _ = solve_anchor("umax", points, data)
        assert point.utility == pytest.approx(umax_point(pareto_filter(points)).utility)

    def test_manual(self):
        data = hand_data()
        eta, point, params = solve_anchor("manual", sweep_eta(data), data, eta=0.001)
        assert eta == 0.001 and params == {"eta": 0.001}
        with pytest.raises(ValueError):
            solve_anchor("manual", sweep_eta(data), data)

    def test_unknown(self):
        data = hand_data()
        with pytest.raises(ValueError):
            solve_anchor("median", sweep_eta(data), data)


def test_oracle_routing_dominance():
    rng = np.random.default_rng(6)
    n = 500
    ut, un = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    tt, tn = rng.uniform(200, 600, n), rng.uniform(20, 80, n)
    lam = 1e-4
    a_true = (ut - un) - lam * (tt - tn)
    data = SweepData(a_true, np.maximum(tt - tn, 1), tt, tn, ut, un)
    p = data.point(0.0)
    assert p.utility > max(ut.mean(), un.mean())
    assert p.mean_tokens <= tt.mean()
