"""Closed/open-world scoring, calibration-bias sweep and S/U/HM/AUC metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffmath as dm
from .model import BRANCHES, forward_all
from .objective import FusionWeights, Probabilities, fuse


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (N, C)
    labels: np.ndarray  # (N,) column index of the true composition
    unseen_cols: np.ndarray  # (C,) bool; False means a seen composition

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        self.unseen_cols = np.asarray(self.unseen_cols, dtype=bool)
        n, c = self.scores.shape
        if self.labels.shape != (n,) or self.unseen_cols.shape != (c,):
            raise ValueError("score matrix, labels and column flags disagree in shape")
        if np.isnan(self.scores).any():
            raise ValueError("NaN in score matrix")
        if n and (self.labels.min() < 0 or self.labels.max() >= c):
            raise ValueError("label not in candidate set")

    @property
    def unseen_rows(self) -> np.ndarray:
        return self.unseen_cols[self.labels]


@dataclass(frozen=True)
class CurvePoint:
    bias: float
    seen_acc: float
    unseen_acc: float


@dataclass
class EvalReport:
    regime: str
    S: float
    U: float
    HM: float
    AUC: float
    curve: list[CurvePoint]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curve"] = [[p.bias, p.seen_acc, p.unseen_acc] for p in self.curve]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        return format_table([{"regime": self.regime, "S": self.S, "U": self.U, "HM": self.HM, "AUC": self.AUC}])


def score_testset(params, bank, space, features, labels, regime: str, fw: FusionWeights,
                  mask=BRANCHES, feasibility: Callable[[np.ndarray], np.ndarray] | None = None) -> ScoreMatrix:
    """Fused scores for every test sample over the regime's candidate columns.

    ``bank`` must carry composition rows for the whole grid (or at least the
    regime's candidates); ``labels`` are (N, 2) state/object pairs.
    ``feasibility`` may rewrite the score matrix; it is identity by default.
    """
    pairs = space.candidates(regime)
    column = {p: i for i, p in enumerate(pairs)}
    try:
        label_cols = np.array([column[tuple(map(int, lab))] for lab in labels], dtype=np.intp)
    except KeyError as exc:
        raise ValueError(f"label not in candidate set: {exc.args[0]}") from None
    active = bank.restrict(pairs)
    with dm.no_grad():
        _, logits = forward_all(np.asarray(features), params, active, mask)
    scores = fuse(Probabilities.from_logits(logits), fw, pairs, mask)
    if feasibility is not None:
        scores = feasibility(scores)
    seen = set(space.seen)
    unseen_cols = np.array([p not in seen for p in pairs])
    return ScoreMatrix(np.atleast_2d(scores), label_cols, unseen_cols)


def _accuracies(m: ScoreMatrix, bias: float) -> tuple[float, float]:
    pred = np.argmax(m.scores + bias * m.unseen_cols, axis=1)
    hit = pred == m.labels
    u = m.unseen_rows
    return float(hit[~u].mean()), float(hit[u].mean())


def bias_sweep(m: ScoreMatrix) -> list[CurvePoint]:
    """Seen/unseen accuracy for every distinct calibration state.

    A bias ``b`` is added to all unseen columns. Row r flips from its best
    seen column to its best unseen column exactly when ``b`` crosses its
    margin (max seen score - max unseen score), so accuracies are constant
    between consecutive sorted margins. One point is evaluated strictly
    inside each such interval plus one beyond each end (+-M).
    """
    u = m.unseen_rows
    if u.all() or not u.any():
        raise ValueError("bias sweep needs both seen-labelled and unseen-labelled test samples")
    if m.unseen_cols.all() or not m.unseen_cols.any():
        raise ValueError("bias sweep needs both seen and unseen candidate columns")
    s = m.scores
    margins = np.unique(s[:, ~m.unseen_cols].max(axis=1) - s[:, m.unseen_cols].max(axis=1))
    # -inf columns (excluded candidates) never win; size M from finite entries only
    finite = np.isfinite(margins)
    big = 2.0 * (np.abs(s[np.isfinite(s)]).max() + np.abs(margins[finite]).max(initial=0.0)) + 1.0
    margins = margins[finite]
    grid = np.concatenate([[-big], (margins[:-1] + margins[1:]) / 2.0, [big]])
    return [CurvePoint(float(b), *_accuracies(m, b)) for b in grid]


def harmonic_mean(a: float, b: float) -> float:
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


def metrics(curve) -> tuple[float, float, float, float]:
    """(S, U, HM, AUC) in percent. AUC is the trapezoidal area under unseen
    accuracy as a function of seen accuracy, both as fractions, times 100."""
    if not curve:
        raise ValueError("empty curve")
    seen = np.array([p.seen_acc for p in curve])
    unseen = np.array([p.unseen_acc for p in curve])
    hm = max(harmonic_mean(a, b) for a, b in zip(seen, unseen))
    # seen ascending, ties by unseen descending: the order a bias sweep traces
    order = np.lexsort((-unseen, seen))
    xs, ys = seen[order], unseen[order]
    auc = float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))
    return float(100.0 * seen.max()), float(100.0 * unseen.max()), float(100.0 * hm), 100.0 * auc


def evaluate_matrix(m: ScoreMatrix, regime: str, config: dict | None = None) -> EvalReport:
    curve = bias_sweep(m)
    S, U, HM, AUC = metrics(curve)
    return EvalReport(regime, S, U, HM, AUC, curve, dict(config or {}))


# ---------------------------------------------------------------------------
# plain-text tables


def format_table(rows: list[dict], columns=None) -> str:
    if not rows:
        return ""
    columns = columns or list(rows[0])
    cells = [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    line = lambda vals: "  ".join(v.rjust(w) for v, w in zip(vals, widths))  # noqa: E731
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(columns), sep] + [line(r) for r in cells]) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "x" if v else ""
    if isinstance(v, float):
        return f"{v:.1f}"
    return str(v)


# ---------------------------------------------------------------------------
# experiment runners

ABLATION_MASKS = (
    ("com",),
    ("sor",),
    ("osr",),
    ("com", "sor"),
    ("com", "osr"),
    ("sor", "osr"),
    ("com", "sor", "osr"),
)


def run_path_ablation(train_fn: Callable, evaluate_fn: Callable, masks=ABLATION_MASKS) -> list[dict]:
    """One row per branch mask, in ablation-table order.

    ``train_fn(mask)`` returns a trained model handle (or raises if training
    is disabled and no checkpoint exists); ``evaluate_fn(handle, mask)``
    returns its open-world EvalReport.
    """
    rows = []
    for mask in masks:
        handle = train_fn(mask)
        rep = evaluate_fn(handle, mask)
        row = {b: b in mask for b in BRANCHES}
        row.update(S=rep.S, U=rep.U, HM=rep.HM, AUC=rep.AUC)
        rows.append(row)
    return rows


def run_alpha_sweep(score_fn: Callable[[FusionWeights], ScoreMatrix], grid) -> list[dict]:
    """Inference-only sweep of the com-branch weight with beta = 1 - alpha."""
    rows = []
    for alpha in grid:
        alpha = float(alpha)
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha {alpha} outside [0, 1]")
        m = score_fn(FusionWeights(alpha, 1.0 - alpha))
        S, U, HM, AUC = metrics(bias_sweep(m))
        rows.append({"alpha": round(alpha, 10), "S": S, "U": U, "HM": HM, "AUC": AUC})
    return rows
