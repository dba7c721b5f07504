import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_force_curve, path_metrics, riemann_auc

from lpr.dataset import SyntheticConfig, generate_synthetic
from lpr.evaluation import (
    ABLATION_MASKS,
    CurvePoint,
    EvalReport,
    ScoreMatrix,
    bias_sweep,
    evaluate_matrix,
    format_table,
    harmonic_mean,
    metrics,
    run_alpha_sweep,
    run_path_ablation,
    score_testset,
)
from lpr.model import LprParams
from lpr.objective import FusionWeights


def random_matrix(rng, integer=False):
    n = int(rng.integers(2, 11))
    c = int(rng.integers(2, 13))
    unseen_cols = np.zeros(c, dtype=bool)
    unseen_cols[rng.choice(c, size=int(rng.integers(1, c)), replace=False)] = True
    seen_idx, unseen_idx = np.flatnonzero(~unseen_cols), np.flatnonzero(unseen_cols)
    labels = rng.integers(0, c, size=n)
    labels[0] = rng.choice(seen_idx)
    labels[1] = rng.choice(unseen_idx)
    scores = rng.integers(0, 4, size=(n, c)).astype(float) if integer else rng.normal(size=(n, c))
    return ScoreMatrix(scores, labels, unseen_cols)


def collapsed(curve):
    out = []
    for p in curve:
        if not out or out[-1] != (p.seen_acc, p.unseen_acc):
            out.append((p.seen_acc, p.unseen_acc))
    return out


@pytest.mark.parametrize("seed", range(60))
def test_sweep_matches_interval_oracle(seed):
    rng = np.random.default_rng(seed)
    m = random_matrix(rng, integer=seed % 3 == 0)
    curve = bias_sweep(m)
    oracle = brute_force_curve(m.scores, m.labels, m.unseen_cols)
    assert collapsed(curve) == oracle
    S, U, HM, AUC = metrics(curve)
    oS, oU, oHM, oAUC = path_metrics(oracle)
    assert (S, U, HM) == (oS, oU, oHM)
    assert AUC == pytest.approx(oAUC, abs=1e-12)
    assert AUC / 100 == pytest.approx(riemann_auc(oracle), abs=1e-6)


class TestBiasSweep:
    def test_endpoints(self):
        m = random_matrix(np.random.default_rng(1))
        curve = bias_sweep(m)
        u = m.unseen_rows
        pred = np.argmax(m.scores, axis=1)
        seen_only = np.argmax(np.where(m.unseen_cols, -np.inf, m.scores), axis=1)
        assert curve[0].seen_acc == np.mean(seen_only[~u] == m.labels[~u])
        unseen_only = np.argmax(np.where(m.unseen_cols, m.scores, -np.inf), axis=1)
        assert curve[-1].unseen_acc == np.mean(unseen_only[u] == m.labels[u])
        assert curve[-1].seen_acc == 0.0
        assert pred.shape == (len(m.labels),)

    def test_sorted_by_bias(self):
        curve = bias_sweep(random_matrix(np.random.default_rng(2)))
        b = [p.bias for p in curve]
        assert b == sorted(b)

    def test_needs_both_partitions(self):
        with pytest.raises(ValueError):
            bias_sweep(ScoreMatrix(np.zeros((2, 3)), [0, 1], [False, False, True]))

    def test_label_outside_candidates(self):
        with pytest.raises(ValueError, match="label not in candidate set"):
            ScoreMatrix(np.zeros((2, 3)), [0, 3], [False, True, True])

    @settings(max_examples=40)
    @given(st.integers(0, 10_000), st.floats(-100, 100))
    def test_constant_shift_invariant(self, seed, k):
        m = random_matrix(np.random.default_rng(seed))
        shifted = ScoreMatrix(m.scores + k, m.labels, m.unseen_cols)
        assert collapsed(bias_sweep(shifted)) == collapsed(bias_sweep(m))

    @pytest.mark.parametrize("seed", range(10))
    def test_closed_equals_open_with_excluded_columns(self, seed):
        rng = np.random.default_rng(seed)
        m = random_matrix(rng)
        extra = int(rng.integers(1, 5))
        wide = np.hstack([m.scores, np.full((len(m.labels), extra), -np.inf)])
        flags = np.concatenate([m.unseen_cols, rng.random(extra) < 0.5])
        open_m = ScoreMatrix(wide, m.labels, flags)
        assert metrics(bias_sweep(open_m)) == metrics(bias_sweep(m))


class TestMetrics:
    def test_single_point(self):
        assert metrics([CurvePoint(0.0, 0.5, 0.5)]) == (50.0, 50.0, 50.0, 0.0)

    def test_triangle(self):
        S, U, HM, AUC = metrics([CurvePoint(0.0, 1.0, 0.0), CurvePoint(1.0, 0.0, 1.0)])
        assert (S, U, HM) == (100.0, 100.0, 0.0)
        assert AUC == pytest.approx(50.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_five_points_vs_riemann(self, seed):
        rng = np.random.default_rng(seed)
        seen = np.sort(rng.random(5))[::-1]
        unseen = np.sort(rng.random(5))
        curve = [CurvePoint(float(i), s, u) for i, (s, u) in enumerate(zip(seen, unseen))]
        assert metrics(curve)[3] / 100 == pytest.approx(riemann_auc(list(zip(seen, unseen))), abs=1e-9)

    @settings(max_examples=40)
    @given(st.integers(0, 10_000), st.data())
    def test_duplicate_point_invariant(self, seed, data):
        curve = bias_sweep(random_matrix(np.random.default_rng(seed)))
        k = data.draw(st.integers(0, len(curve) - 1))
        assert metrics(curve + [curve[k]]) == pytest.approx(metrics(curve), abs=1e-12)

    def test_bounds(self):
        for seed in range(20):
            vals = metrics(bias_sweep(random_matrix(np.random.default_rng(seed))))
            assert all(0 <= v <= 100 for v in vals)

    def test_empty(self):
        with pytest.raises(ValueError):
            metrics([])

    def test_harmonic_mean(self):
        assert harmonic_mean(0.0, 0.0) == 0.0
        assert harmonic_mean(0.5, 0.5) == 0.5


@pytest.fixture(scope="module")
def small():
    ds = generate_synthetic(SyntheticConfig(n_states=3, n_objects=4, dim=8, samples_per_seen=3, samples_per_test=3))
    return ds, LprParams.init(8, np.random.default_rng(0))


class TestScoreTestset:
    def test_shapes(self, small):
        ds, params = small
        x, y = ds.arrays("test")
        closed = score_testset(params, ds.bank, ds.space, x, y, "closed", FusionWeights())
        opened = score_testset(params, ds.bank, ds.space, x, y, "open", FusionWeights())
        assert closed.scores.shape == (len(x), len(ds.space.closed_world))
        assert opened.scores.shape == (len(x), 12)

    def test_open_row_sums(self, small):
        ds, params = small
        x, y = ds.arrays("test")
        fw = FusionWeights(0.3, 0.5)
        m = score_testset(params, ds.bank, ds.space, x, y, "open", fw)
        np.testing.assert_allclose(m.scores.sum(axis=1), 0.3 + 2 * 0.5, atol=1e-6)

    def test_identical_records_identical_rows(self, small):
        ds, params = small
        x, y = ds.arrays("test")
        xx, yy = np.vstack([x[:1], x[:1]]), np.vstack([y[:1], y[:1]])
        m = score_testset(params, ds.bank, ds.space, xx, yy, "closed", FusionWeights())
        np.testing.assert_array_equal(m.scores[0], m.scores[1])

    def test_label_outside_regime(self, small):
        ds, params = small
        missing = next(p for p in ds.space.open_world if p not in set(ds.space.closed_world))
        x, _ = ds.arrays("test")
        with pytest.raises(ValueError, match="label not in candidate set"):
            score_testset(params, ds.bank, ds.space, x[:1], np.array([missing]), "closed", FusionWeights())

    def test_feasibility_hook(self, small):
        ds, params = small
        x, y = ds.arrays("test")
        base = score_testset(params, ds.bank, ds.space, x, y, "open", FusionWeights())
        hooked = score_testset(params, ds.bank, ds.space, x, y, "open", FusionWeights(), feasibility=lambda s: s * 2)
        np.testing.assert_allclose(hooked.scores, 2 * base.scores)


class TestRunners:
    def _report(self, hm):
        return EvalReport("open", 50.0, 40.0, hm, 20.0, [])

    def test_path_ablation_rows(self):
        rows = run_path_ablation(lambda mask: mask, lambda h, mask: self._report(float(len(mask))))
        assert len(rows) == 7
        assert [tuple(b for b in ("com", "sor", "osr") if r[b]) for r in rows] == list(ABLATION_MASKS)
        assert rows[-1]["HM"] == 3.0

    def test_path_ablation_missing_checkpoint(self):
        def no_train(mask):
            raise FileNotFoundError("missing checkpoint and training disabled")

        with pytest.raises(FileNotFoundError):
            run_path_ablation(no_train, lambda h, m: self._report(0.0))

    def test_alpha_sweep(self, small):
        ds, params = small
        x, y = ds.arrays("test")
        rows = run_alpha_sweep(
            lambda fw: score_testset(params, ds.bank, ds.space, x, y, "closed", fw), np.arange(0.2, 0.81, 0.1))
        assert len(rows) == 7
        assert [r["alpha"] for r in rows] == [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
        com_only = score_testset(params, ds.bank, ds.space, x, y, "closed", FusionWeights(1.0, 0.0), mask=("com",))
        one = run_alpha_sweep(lambda fw: score_testset(params, ds.bank, ds.space, x, y, "closed", fw), [1.0])[0]
        S, U, HM, AUC = metrics(bias_sweep(com_only))
        assert (one["S"], one["U"], one["HM"]) == (S, U, HM)
        with pytest.raises(ValueError):
            run_alpha_sweep(lambda fw: None, [1.5])


def test_report_serialisation():
    rep = evaluate_matrix(random_matrix(np.random.default_rng(3)), "closed", {"alpha": 0.4})
    d = json.loads(rep.to_json())
    assert d["config"] == {"alpha": 0.4}
    assert set(d) >= {"S", "U", "HM", "AUC", "curve", "regime"}
    text = rep.to_text()
    assert "HM" in text and "closed" in text


def test_format_table():
    text = format_table([{"com": True, "sor": False, "HM": 12.345}])
    lines = text.splitlines()
    assert lines[0].split() == ["com", "sor", "HM"]
    assert lines[2].split() == ["x", "12.3"]
