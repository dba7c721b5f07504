import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpr import diffmath as dm
from lpr.diffmath import Tensor
from lpr.model import Logits
from lpr.objective import (
    FusionWeights,
    LossWeights,
    Probabilities,
    fuse,
    loss_com,
    loss_osr,
    loss_sor,
    predict,
    total_loss,
)

# 2*ln48 + 1.5*(ln8 + ln10), evaluated at 30 digits with mpmath
L_SOR_UNIFORM = 14.3154419738


def _grid(ns, no):
    return [(s, o) for s in range(ns) for o in range(no)]


class TestLosses:
    def test_com_uniform(self):
        assert loss_com(np.zeros(48), 3).item() == pytest.approx(math.log(48), abs=1e-12)
        assert loss_com(np.zeros(48), 3).item() == pytest.approx(3.871201011, abs=1e-9)

    def test_com_confident(self):
        assert loss_com([0.0, 1000.0], 1).item() == pytest.approx(0.0, abs=1e-12)

    def test_com_matches_cross_entropy(self):
        z = np.random.default_rng(0).normal(size=(4, 9))
        t = np.array([0, 3, 8, 2])
        assert loss_com(z, t).item() == dm.cross_entropy(z, t).item()

    def test_com_rejects_unseen(self):
        seen = np.array([True, True, False])
        with pytest.raises(ValueError, match="train-time unseen label"):
            loss_com(np.zeros(3), 2, seen=seen)

    def test_sor_uniform_closed_form(self):
        w = LossWeights(2.0, 1.5)
        got = loss_sor((np.zeros(48), np.zeros(8), np.zeros(10)), (0, 0, 0), w).item()
        assert got == pytest.approx(2 * math.log(48) + 1.5 * (math.log(8) + math.log(10)), abs=1e-9)
        assert got == pytest.approx(L_SOR_UNIFORM, abs=1e-9)

    def test_osr_uniform_closed_form(self):
        got = loss_osr((np.zeros(48), np.zeros(10), np.zeros(8)), (0, 0, 0), LossWeights(2.0, 1.5)).item()
        assert got == pytest.approx(L_SOR_UNIFORM, abs=1e-9)

    def test_zero_weights(self):
        rng = np.random.default_rng(1)
        logits = (rng.normal(size=6), rng.normal(size=2), rng.normal(size=3))
        assert loss_sor(logits, (1, 0, 1), LossWeights(0.0, 0.0)).item() == 0.0
        assert loss_sor(logits, (1, 0, 1), LossWeights(1.0, 0.0)).item() == pytest.approx(
            dm.cross_entropy(logits[0], 1).item(), abs=1e-15)

    def test_osr_pairs_logits_with_targets(self):
        # object logits come first for osr; only the object target 2 is confidently right
        obj, state = np.array([0.0, 0.0, 50.0]), np.zeros(2)
        w = LossWeights(0.0, 1.0)
        assert loss_osr((np.zeros(6), obj, state), (5, 1, 2), w).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_inconsistent_targets(self):
        pairs = _grid(2, 3)
        with pytest.raises(ValueError, match="inconsistent targets"):
            loss_sor((np.zeros(6), np.zeros(2), np.zeros(3)), (4, 0, 1), LossWeights(), pairs=pairs)
        loss_sor((np.zeros(6), np.zeros(2), np.zeros(3)), (4, 1, 1), LossWeights(), pairs=pairs)

    @pytest.mark.parametrize("kw", [dict(lambda1=-1.0), dict(lambda2=float("nan"))])
    def test_weight_validation(self, kw):
        with pytest.raises(ValueError):
            LossWeights(**kw)


def _random_logits(rng, b, ns, no, nc):
    return Logits(*(Tensor(rng.normal(size=(b, n))) for n in (nc, nc, ns, no, nc, ns, no)))


class TestTotalLoss:
    def test_zero_lambdas_leave_com(self):
        rng = np.random.default_rng(2)
        lg = _random_logits(rng, 4, 2, 3, 6)
        c = np.array([0, 5, 3, 1])
        s, o = c // 3, c % 3
        br = total_loss(lg, (c, s, o), LossWeights(0.0, 0.0))
        assert br.total == pytest.approx(loss_com(lg.comp_com, c).item(), abs=1e-15)

    def test_breakdown_sums(self):
        rng = np.random.default_rng(3)
        lg = _random_logits(rng, 4, 2, 3, 6)
        c = np.array([0, 5, 3, 1])
        br = total_loss(lg, (c, c // 3, c % 3), LossWeights())
        assert abs(br.total - (br.com + br.sor + br.osr)) <= 1e-12
        assert set(br.terms) == {"sor.comp", "sor.first", "sor.second", "osr.comp", "osr.first", "osr.second"}
        assert all(v >= 0 for v in br.terms.values())

    def test_batch_is_mean_of_samples(self):
        rng = np.random.default_rng(4)
        lg = _random_logits(rng, 5, 2, 3, 6)
        c = rng.integers(0, 6, size=5)
        batch = total_loss(lg, (c, c // 3, c % 3), LossWeights()).total
        single = []
        for i in range(5):
            li = Logits(*(Tensor(getattr(lg, f).data[i]) for f, _ in lg.items()))
            single.append(total_loss(li, (c[i], c[i] // 3, c[i] % 3), LossWeights()).total)
        assert batch == pytest.approx(np.mean(single), abs=1e-12)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_candidate_relabeling_invariant(self, seed):
        rng = np.random.default_rng(seed)
        pairs = _grid(2, 3)
        lg = _random_logits(rng, 3, 2, 3, 6)
        c = rng.integers(0, 6, size=3)
        base = total_loss(lg, (c, c // 3, c % 3), LossWeights(), pairs=pairs).total
        perm = rng.permutation(6)  # new column j holds old candidate perm[j]
        inv = np.argsort(perm)
        moved = Logits(**{k: Tensor(v.data[:, perm]) if v.shape[1] == 6 else v for k, v in lg.items()})
        new_pairs = [pairs[i] for i in perm]
        got = total_loss(moved, (inv[c], c // 3, c % 3), LossWeights(), pairs=new_pairs).total
        assert got == pytest.approx(base, abs=1e-12)

    def test_masked_terms(self):
        rng = np.random.default_rng(5)
        lg = _random_logits(rng, 2, 2, 3, 6)
        c = np.array([1, 4])
        br = total_loss(lg, (c, c // 3, c % 3), LossWeights(), mask=("sor",))
        assert br.com == 0.0 and br.osr == 0.0
        assert br.total == pytest.approx(br.sor)

    def test_gradients_reach_logits(self):
        rng = np.random.default_rng(6)
        params = [dm.Parameter(rng.normal(size=(3, n))) for n in (6, 6, 2, 3, 6, 2, 3)]
        c = np.array([2, 0, 5])
        f = lambda: total_loss(Logits(*params), (c, c // 3, c % 3), LossWeights()).loss  # noqa: E731
        for p in params:
            assert dm.grad_check(f, p) < 1e-6


def _scalar_fuse(p, alpha, beta, pairs):
    """Independent loop evaluation of the fused score for one sample."""
    out = []
    for j, (s, o) in enumerate(pairs):
        v = alpha * p["c_com"][j]
        v += beta / 2 * (p["c_sor"][j] + p["s_sor"][s] * p["o_sor"][o])
        v += beta / 2 * (p["c_osr"][j] + p["s_osr"][s] * p["o_osr"][o])
        out.append(v)
    return out


class TestFuse:
    toy = {
        "c_com": [0.1, 0.2, 0.3, 0.4],
        "c_sor": [0.25, 0.25, 0.4, 0.1],
        "s_sor": [0.7, 0.3],
        "o_sor": [0.6, 0.4],
        "c_osr": [0.05, 0.15, 0.5, 0.3],
        "s_osr": [0.2, 0.8],
        "o_osr": [0.9, 0.1],
    }

    def _probs(self, p):
        return Probabilities(*(np.array(p[k]) for k in ("c_com", "c_sor", "s_sor", "o_sor", "c_osr", "s_osr", "o_osr")))

    def test_two_by_two_toy(self):
        pairs = _grid(2, 2)
        got = fuse(self._probs(self.toy), FusionWeights(0.4, 0.6), pairs)
        np.testing.assert_allclose(got, _scalar_fuse(self.toy, 0.4, 0.6, pairs), atol=1e-12)
        # first candidate by hand: 0.04 + 0.3*(0.25+0.42) + 0.3*(0.05+0.18)
        assert got[0] == pytest.approx(0.31, abs=1e-12)

    def test_com_only(self):
        got = fuse(self._probs(self.toy), FusionWeights(1.0, 0.0), _grid(2, 2))
        np.testing.assert_allclose(got, self.toy["c_com"], atol=1e-15)

    @settings(max_examples=50)
    @given(st.integers(0, 10_000), st.floats(0, 3), st.floats(0, 3))
    def test_open_world_sum(self, seed, alpha, beta):
        if alpha + beta == 0:
            return
        rng = np.random.default_rng(seed)
        ns, no = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        lg = _random_logits(rng, 3, ns, no, ns * no)
        scores = fuse(Probabilities.from_logits(lg), FusionWeights(alpha, beta), _grid(ns, no))
        np.testing.assert_allclose(scores.sum(axis=1), alpha + 2 * beta, atol=1e-9)

    def test_unnormalised_rejected(self):
        bad = dict(self.toy, s_sor=[0.7, 0.31])
        with pytest.raises(ValueError, match="normalised"):
            fuse(self._probs(bad), FusionWeights(), _grid(2, 2))

    def test_candidate_count_checked(self):
        with pytest.raises(ValueError):
            fuse(self._probs(self.toy), FusionWeights(), _grid(2, 2)[:3])

    def test_alpha_zero_is_relation_average(self):
        pairs = _grid(2, 2)
        got = fuse(self._probs(self.toy), FusionWeights(0.0, 1.0), pairs)
        p = self.toy
        rel = [(p["c_sor"][j] + p["s_sor"][s] * p["o_sor"][o] + p["c_osr"][j] + p["s_osr"][s] * p["o_osr"][o]) / 2
               for j, (s, o) in enumerate(pairs)]
        assert predict(got) == predict(rel)

    def test_mask_renormalises(self):
        w = FusionWeights(0.4, 0.6).branch_weights(("com", "sor"))
        assert w["osr"] == 0.0
        assert w["com"] + w["sor"] == pytest.approx(1.0)
        assert w["com"] / w["sor"] == pytest.approx(0.4 / 0.3)

    def test_default_beta(self):
        assert FusionWeights(0.7).beta == pytest.approx(0.3)
        with pytest.raises(ValueError):
            FusionWeights(0.0, 0.0)


class TestPredict:
    def test_one_hot(self):
        assert predict([0, 0, 1, 0]) == 2

    def test_tie_goes_low(self):
        assert predict([0.1, 0.2, 0.9, 0.3, 0.1, 0.9]) == 2

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(0.01, 100))
    def test_positive_scaling(self, scores, k):
        scores = np.array(scores)
        if len(np.unique(scores * k)) < len(np.unique(scores)):
            return  # scaling merged two close values
        assert predict(scores * k) == predict(scores)

    def test_empty(self):
        with pytest.raises(ValueError):
            predict([])
