"""Training loop, configuration, evaluation wiring and run manifests."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .checkpoint import Checkpoint, blob_hash, encode_checkpoint, save_checkpoint
from .dataset import Dataset, SyntheticConfig, batches, encode_features, generate_synthetic, substream
from .evaluation import (
    EvalReport,
    bias_sweep,
    evaluate_matrix,
    metrics,
    run_alpha_sweep,
    run_path_ablation,
    score_testset,
)
from .model import BRANCHES, LprParams, forward_all
from .objective import FusionWeights, LossWeights, total_loss

log = logging.getLogger(__name__)

# name -> (alpha, lambda1, lambda2)
HYPERPARAMETERS = {
    "mit-states": (0.4, 2.0, 1.5),
    "ut-zappos": (0.7, 3.0, 1.0),
    "c-gqa": (0.4, 2.0, 1.5),
    "synthetic": (0.4, 2.0, 1.5),
}


def hyperparameter_defaults(name: str) -> tuple[float, float, float]:
    """(alpha, lambda1, lambda2) used for a benchmark name."""
    key = name.strip().lower().replace("_", "-").replace(" ", "-")
    key = {"mitstates": "mit-states", "utzappos": "ut-zappos", "cgqa": "c-gqa"}.get(key, key)
    if key not in HYPERPARAMETERS:
        raise ValueError(f"unknown dataset {name!r}; known: MIT-States, UT-Zappos, C-GQA, synthetic")
    return HYPERPARAMETERS[key]


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    """Every field has a default, so ``TrainConfig()`` is the reference run.

    ``alpha``, ``lambda1`` and ``lambda2`` left as ``None`` take the values
    for ``dataset`` from :func:`hyperparameter_defaults`; ``beta`` left as
    ``None`` becomes ``1 - alpha``.
    """

    epochs: int = 30
    batch_size: int = 64
    seed: int = 7
    dataset: str = "synthetic"
    lambda1: float | None = None
    lambda2: float | None = None
    alpha: float | None = None
    beta: float | None = None
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    patience: int = 5
    mask: tuple[str, ...] = BRANCHES
    ratio: float = 0.2
    hidden: int = 0  # 0 -> dim // 4
    tau: float = 0.01
    data: str = ""
    checkpoint: str = ""
    report: str = ""
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        alpha, l1, l2 = hyperparameter_defaults(self.dataset)
        if self.alpha is None:
            self.alpha = alpha
        if self.lambda1 is None:
            self.lambda1 = l1
        if self.lambda2 is None:
            self.lambda2 = l2
        if self.beta is None:
            self.beta = 1.0 - self.alpha
        if isinstance(self.mask, str):
            self.mask = parse_mask(self.mask)
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.mask:
            raise ValueError("mask must name at least one branch")
        LossWeights(self.lambda1, self.lambda2)
        FusionWeights(self.alpha, self.beta)
        if self.data and not Path(self.data).exists():
            raise ValueError(f"data file {self.data} does not exist")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    @property
    def fusion(self) -> FusionWeights:
        return FusionWeights(self.alpha, self.beta)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mask"] = ",".join(self.mask)
        return d


def parse_mask(text: str) -> tuple[str, ...]:
    parts = [p.strip() for p in text.replace("+", ",").split(",") if p.strip()]
    bad = [p for p in parts if p not in BRANCHES]
    if bad:
        raise ValueError(f"unknown branch {bad[0]!r}; expected a subset of com,sor,osr")
    return tuple(b for b in BRANCHES if b in parts)


# ---------------------------------------------------------------------------
# flat key/value config files

CONFIG_KEYS = {
    "epochs": int, "batch_size": int, "seed": int, "dataset": str, "lambda1": float, "lambda2": float,
    "alpha": float, "beta": float, "lr": float, "beta1": float, "beta2": float, "eps": float,
    "weight_decay": float, "patience": int, "mask": str, "ratio": float, "hidden": int, "tau": float,
    "data": str, "checkpoint": str, "report": str,
}
SYNTHETIC_KEYS = {f.name: f.type for f in dataclasses.fields(SyntheticConfig) if f.name != "seed"}
_CASTS = {"int": int, "float": float, "str": str}


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS and key not in SYNTHETIC_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build_config(values: dict[str, object]) -> TrainConfig:
    """Typed TrainConfig from raw key/value strings (config file plus overrides)."""
    top, syn = {}, {}
    for key, raw in values.items():
        if raw is None:
            continue
        if key in CONFIG_KEYS:
            top[key] = CONFIG_KEYS[key](raw) if key != "mask" else parse_mask(str(raw))
        elif key in SYNTHETIC_KEYS:
            syn[key] = _CASTS[SYNTHETIC_KEYS[key]](raw)
        else:
            raise ValueError(f"unknown config key {key!r}")
    seed = int(top.get("seed", TrainConfig.seed))
    return TrainConfig(**top, synthetic=SyntheticConfig(seed=seed, **syn))


def load_config(path) -> TrainConfig:
    return build_config(parse_config_text(Path(path).read_text()))


# ---------------------------------------------------------------------------
# training


@dataclass
class RunManifest:
    config: dict
    dataset_hash: str
    checkpoint_hash: str
    wall_clock: float
    loss_trace: list[float]
    val_trace: list[list[float]]
    best_epoch: int
    stopped_epoch: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    def train_config(self) -> TrainConfig:
        d = dict(self.config)
        syn = SyntheticConfig(**d.pop("synthetic"))
        d["mask"] = parse_mask(d["mask"])
        return TrainConfig(**d, synthetic=syn)


def dataset_hash(ds: Dataset) -> str:
    return hashlib.sha256(encode_features(ds)).hexdigest()


def _targets(space, labels):
    index = {p: i for i, p in enumerate(space.seen)}
    try:
        c = np.array([index[tuple(map(int, lab))] for lab in labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"train-time unseen label {exc.args[0]}") from None
    return c, labels[:, 0].astype(np.int64), labels[:, 1].astype(np.int64)


def _validation(params, ds, cfg, x, y, train_bank):
    """(closed-world accuracy or HM, validation loss) for early stopping."""
    if len(x) == 0:
        return 0.0, 0.0
    space = ds.space
    with dm.no_grad():
        _, logits = forward_all(x, params, train_bank, cfg.mask)
        loss = total_loss(logits, _targets(space, y), cfg.loss_weights, mask=cfg.mask).total
    m = score_testset(params, ds.bank, space, x, y, "closed", cfg.fusion, cfg.mask)
    if m.unseen_rows.any() and not m.unseen_rows.all():
        return metrics(bias_sweep(m))[2], loss
    pred = np.argmax(m.scores, axis=1)
    return float(np.mean(pred == m.labels)) * 100.0, loss


def train(cfg: TrainConfig, ds: Dataset | None = None) -> tuple[Checkpoint, RunManifest]:
    """Seeded AdamW training of the active branches with early stopping.

    The returned checkpoint holds the parameters of the best validation epoch.
    """
    start = time.perf_counter()
    if ds is None:
        from .dataset import load_features

        ds = load_features(cfg.data) if cfg.data else generate_synthetic(cfg.synthetic)
    space, bank = ds.space, ds.bank
    d = bank.dim
    params = LprParams.init(d, substream(cfg.seed, "init"), hidden=cfg.hidden or None, ratio=cfg.ratio, tau=cfg.tau)
    active = {id(p) for b in cfg.mask for p in params.branch_parameters(b)}
    for p in params.parameters():
        p.trainable = id(p) in active or p is params.log_tau
    opt = dm.AdamW(params.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                   weight_decay=cfg.weight_decay)

    train_bank = bank.restrict(space.seen)
    X = np.stack([r.feature for r in ds.records])
    Y = np.array([r.label for r in ds.records], dtype=np.int64)
    if not any(r.split == "train" for r in ds.records):
        raise ValueError("dataset has no train records")
    x_val, y_val = ds.arrays("val")
    C, S, O = np.zeros(len(Y), np.int64), Y[:, 0], Y[:, 1]
    train_idx = np.array([i for i, r in enumerate(ds.records) if r.split == "train"])
    C[train_idx] = _targets(space, Y[train_idx])[0]

    loss_trace, val_trace = [], []
    best_key, best_state, best_epoch, stale = None, None, 0, 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for b, idx in enumerate(batches(ds.records, cfg.batch_size, cfg.seed, epoch)):
            opt.zero_grad()
            try:
                _, logits = forward_all(X[idx], params, train_bank, cfg.mask)
                br = total_loss(logits, (C[idx], S[idx], O[idx]), cfg.loss_weights, mask=cfg.mask)
                br.loss.backward()
                opt.step()
            except FloatingPointError as exc:
                raise TrainingDiverged(f"diverged at epoch {epoch} batch {b}: {exc}") from None
            total += br.total * len(idx)
            count += len(idx)
        loss_trace.append(total / count)
        score, vloss = _validation(params, ds, cfg, x_val, y_val, train_bank)
        val_trace.append([score, vloss])
        key = (score, -vloss)
        log.info("epoch %d loss %.4f val %.2f val-loss %.4f", epoch, loss_trace[-1], score, vloss)
        if best_key is None or key > best_key:
            best_key, best_epoch, stale = key, epoch, 0
            best_state = {n: p.data.copy() for n, p in params.named().items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for n, p in params.named().items():
        p.data = best_state[n]
        p.trainable = True
    ckpt = Checkpoint(params, tuple(cfg.mask), space.n_states, space.n_objects, dataset_hash(ds))
    if cfg.checkpoint:
        ckpt_hash = save_checkpoint(cfg.checkpoint, ckpt)
    else:
        ckpt_hash = blob_hash(encode_checkpoint(ckpt))
    manifest = RunManifest(
        config=cfg.to_dict(),
        dataset_hash=ckpt.data_hash,
        checkpoint_hash=ckpt_hash,
        wall_clock=time.perf_counter() - start,
        loss_trace=loss_trace,
        val_trace=val_trace,
        best_epoch=best_epoch,
        stopped_epoch=epoch,
    )
    if cfg.checkpoint:
        Path(cfg.checkpoint + ".manifest.json").write_text(manifest.to_json())
    return ckpt, manifest


# ---------------------------------------------------------------------------
# evaluation


def evaluate(ckpt: Checkpoint, ds: Dataset, regime: str, fw: FusionWeights, mask=None, seed=None,
             out: str | None = None) -> EvalReport:
    """Score the test split in one regime and summarise it as an EvalReport."""
    ckpt.check_compatible(ds.space, ds.bank.dim)
    mask = tuple(ckpt.mask if mask is None else mask)
    ckpt.check_mask(mask)
    x, y = ds.arrays("test")
    if len(x) == 0:
        raise ValueError("dataset has no test records")
    m = score_testset(ckpt.params, ds.bank, ds.space, x, y, regime, fw, mask)
    echo = {"alpha": fw.alpha, "beta": fw.beta, "mask": ",".join(mask), "seed": seed}
    report = evaluate_matrix(m, regime, echo)
    if out:
        write_report(report, out)
    return report


def write_report(report: EvalReport, stem):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{stem}.json").write_text(report.to_json())
    Path(f"{stem}.txt").write_text(report.to_text())


def path_ablation(cfg: TrainConfig, ds: Dataset, fw: FusionWeights | None = None,
                  checkpoint_dir: str | None = None, allow_training: bool = True) -> list[dict]:
    """Train (or load) one model per branch mask and evaluate each open-world."""
    from .checkpoint import load_checkpoint

    fw = fw or cfg.fusion
    data_hash = dataset_hash(ds)

    def train_fn(mask):
        path = Path(checkpoint_dir) / f"ablation-{'-'.join(mask)}.ckpt" if checkpoint_dir else None
        sub = copy.deepcopy(cfg)
        sub.mask = tuple(mask)
        sub.checkpoint = str(path) if path is not None else ""
        if path is not None and path.exists() and _cached_run_matches(path, sub, data_hash):
            return load_checkpoint(path, ds.space, ds.bank.dim)
        if not allow_training:
            raise FileNotFoundError(f"no matching checkpoint for mask {mask} and training is disabled")
        return train(sub, ds)[0]

    return run_path_ablation(train_fn, lambda ck, mask: evaluate(ck, ds, "open", fw, mask, cfg.seed))


_RUN_IRRELEVANT = ("checkpoint", "report", "data")


def _cached_run_matches(path: Path, cfg: TrainConfig, data_hash: str) -> bool:
    """True if the manifest beside ``path`` was produced by ``cfg`` on the same data."""
    manifest = Path(str(path) + ".manifest.json")
    if not manifest.exists():
        return False
    try:
        old = RunManifest.from_json(manifest.read_text())
    except (ValueError, TypeError):
        return False
    strip = lambda d: {k: v for k, v in d.items() if k not in _RUN_IRRELEVANT}  # noqa: E731
    same_cfg = strip(json.loads(json.dumps(old.config))) == strip(json.loads(json.dumps(cfg.to_dict())))
    return same_cfg and old.dataset_hash == data_hash


def alpha_sweep(ckpt: Checkpoint, ds: Dataset, grid, regime: str = "open") -> list[dict]:
    ckpt.check_compatible(ds.space, ds.bank.dim)
    x, y = ds.arrays("test")
    return run_alpha_sweep(lambda fw: score_testset(ckpt.params, ds.bank, ds.space, x, y, regime, fw, ckpt.mask),
                           grid)


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive stop) or a comma-separated list."""
    if ":" in text:
        start, stop, step = (float(t) for t in text.split(":"))
        if step <= 0:
            raise ValueError("grid step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(t) for t in text.split(",") if t.strip()]

