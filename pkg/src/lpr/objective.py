"""Training losses per branch, the fused inference score and argmax prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .model import BRANCHES, Logits


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 2.0
    lambda2: float = 1.5

    def __post_init__(self):
        for v in (self.lambda1, self.lambda2):
            if not math.isfinite(v) or v < 0:
                raise ValueError("loss weights must be finite and nonnegative")


@dataclass(frozen=True)
class FusionWeights:
    alpha: float = 0.4
    beta: float | None = None  # None -> 1 - alpha

    def __post_init__(self):
        if self.beta is None:
            object.__setattr__(self, "beta", 1.0 - self.alpha)
        for v in (self.alpha, self.beta):
            if not math.isfinite(v) or v < 0:
                raise ValueError("fusion weights must be finite and nonnegative")
        if self.alpha + self.beta <= 0:
            raise ValueError("alpha + beta must be positive")

    def branch_weights(self, mask=BRANCHES) -> dict[str, float]:
        """Per-branch weights; masked branches drop out and the rest are rescaled
        so the active total stays alpha + beta."""
        raw = {"com": self.alpha, "sor": self.beta / 2, "osr": self.beta / 2}
        active = {b: w for b, w in raw.items() if b in mask}
        total = sum(active.values())
        if total <= 0:
            raise ValueError(f"fusion weights give zero weight to every active branch {tuple(mask)}")
        scale = (self.alpha + self.beta) / total
        return {b: active.get(b, 0.0) * scale for b in BRANCHES}


@dataclass
class LossBreakdown:
    loss: dm.Tensor  # differentiable total
    com: float = 0.0
    sor: float = 0.0
    osr: float = 0.0
    terms: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(self.loss.data)


def _check_targets(pairs, c, s, o):
    if pairs is None:
        return
    pairs = np.asarray(pairs)
    c, s, o = np.atleast_1d(c), np.atleast_1d(s), np.atleast_1d(o)
    bad = (pairs[c, 0] != s) | (pairs[c, 1] != o)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"inconsistent targets: candidate {int(c[i])} is {tuple(pairs[c[i]])}, not ({s[i]}, {o[i]})")


def loss_com(logits, target, seen=None) -> dm.Tensor:
    """Cross-entropy of the composition logits.

    ``seen`` is an optional boolean mask over candidates; a target outside
    it is rejected as a train-time unseen label.
    """
    t = np.atleast_1d(np.asarray(target))
    if seen is not None and not np.all(np.asarray(seen)[t]):
        raise ValueError("train-time unseen label")
    return dm.cross_entropy(logits, t if np.ndim(target) else int(target))


def _relation_loss(comp, first, second, c, first_t, second_t, w: LossWeights, terms=None, prefix=""):
    ce_c = dm.cross_entropy(comp, c)
    ce_1 = dm.cross_entropy(first, first_t)
    ce_2 = dm.cross_entropy(second, second_t)
    if terms is not None:
        terms[f"{prefix}.comp"] = float(ce_c.data)
        terms[f"{prefix}.first"] = float(ce_1.data)
        terms[f"{prefix}.second"] = float(ce_2.data)
    return ce_c * w.lambda1 + (ce_1 + ce_2) * w.lambda2


def loss_sor(logits, targets, w: LossWeights, pairs=None, terms=None) -> dm.Tensor:
    """``logits`` = (composition | xbar_so, state | x_s, object | xbar_s);
    ``targets`` = (c, s, o)."""
    comp, state, obj = logits
    c, s, o = targets
    _check_targets(pairs, c, s, o)
    return _relation_loss(comp, state, obj, c, s, o, w, terms, "sor")


def loss_osr(logits, targets, w: LossWeights, pairs=None, terms=None) -> dm.Tensor:
    """``logits`` = (composition | xbar_os, object | x_o, state | xbar_o)."""
    comp, obj, state = logits
    c, s, o = targets
    _check_targets(pairs, c, s, o)
    return _relation_loss(comp, obj, state, c, o, s, w, terms, "osr")


def total_loss(logits: Logits, targets, w: LossWeights, pairs=None, mask=BRANCHES) -> LossBreakdown:
    """Sum of the active branch losses (each a batch mean)."""
    c, s, o = (np.atleast_1d(np.asarray(t)) for t in targets)
    _check_targets(pairs, c, s, o)
    terms: dict[str, float] = {}
    parts = {}
    if "com" in mask:
        parts["com"] = loss_com(logits.comp_com, c)
    if "sor" in mask:
        parts["sor"] = loss_sor((logits.comp_sor, logits.state_sor, logits.object_sor), (c, s, o), w, terms=terms)
    if "osr" in mask:
        parts["osr"] = loss_osr((logits.comp_osr, logits.object_osr, logits.state_osr), (c, s, o), w, terms=terms)
    if not parts:
        raise ValueError("empty branch mask")
    total = None
    for v in parts.values():
        total = v if total is None else total + v
    return LossBreakdown(total, **{k: float(v.data) for k, v in parts.items()}, terms=terms)


# ---------------------------------------------------------------------------
# inference


@dataclass
class Probabilities:
    """Softmax outputs of the seven heads, each (B, n) or (n,)."""

    comp_com: np.ndarray | None = None
    comp_sor: np.ndarray | None = None
    state_sor: np.ndarray | None = None
    object_sor: np.ndarray | None = None
    comp_osr: np.ndarray | None = None
    state_osr: np.ndarray | None = None
    object_osr: np.ndarray | None = None

    @classmethod
    def from_logits(cls, logits: Logits) -> "Probabilities":
        return cls(**{k: dm.softmax(v).data for k, v in logits.items()})


def _check_dist(name, p, tol=1e-6):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ValueError(f"{name} is not a normalised distribution")
    return np.atleast_2d(p)


def fuse(probs: Probabilities, fw: FusionWeights, pairs, mask=BRANCHES) -> np.ndarray:
    """Score every candidate ``(s, o)`` in ``pairs``::

        alpha * p(c|x_c)
        + beta/2 * [p(c|xbar_so) + p(s|x_s) p(o|xbar_s)]
        + beta/2 * [p(c|xbar_os) + p(s|xbar_o) p(o|x_o)]

    Masked-out branches are dropped and the remaining weights rescaled.
    Returns (B, n_candidates), or (n_candidates,) for single-sample input.
    """
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    s_idx, o_idx = pairs[:, 0], pairs[:, 1]
    wts = fw.branch_weights(mask)
    single = None
    score = 0.0
    if "com" in mask:
        pc = _check_dist("p(c|x_c)", probs.comp_com)
        single = np.ndim(probs.comp_com) == 1
        score = score + wts["com"] * pc
    for branch, comp, st, ob in (
        ("sor", "comp_sor", "state_sor", "object_sor"),
        ("osr", "comp_osr", "state_osr", "object_osr"),
    ):
        if branch not in mask:
            continue
        pc = _check_dist(f"p(c|{branch})", getattr(probs, comp))
        ps = _check_dist(f"p(s|{branch})", getattr(probs, st))
        po = _check_dist(f"p(o|{branch})", getattr(probs, ob))
        single = np.ndim(getattr(probs, comp)) == 1
        score = score + wts[branch] * (pc + ps[:, s_idx] * po[:, o_idx])
    if single is None:
        raise ValueError("empty branch mask")
    if np.shape(score)[-1] != len(pairs):
        raise ValueError(f"composition distributions cover {np.shape(score)[-1]} candidates, expected {len(pairs)}")
    return score[0] if single else score


def predict(scores) -> int | np.ndarray:
    """Argmax with ties resolved to the lowest candidate index."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("empty score vector")
    return int(np.argmax(scores)) if scores.ndim == 1 else np.argmax(scores, axis=-1)
