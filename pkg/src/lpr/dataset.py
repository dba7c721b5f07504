"""Composition space, synthetic shared-space data and the feature file format."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")
FEATURE_MAGIC = b"LPRF"
FEATURE_VERSION = 1
UNIT_TOL = 1e-9


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one named stage derived from a root seed."""
    key = (zlib.crc32(name.encode()),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


@dataclass(frozen=True)
class CompositionSpace:
    states: tuple[str, ...]
    objects: tuple[str, ...]
    seen: tuple[tuple[int, int], ...]
    unseen: tuple[tuple[int, int], ...]
    closed_world: tuple[tuple[int, int], ...] = ()
    open_world: tuple[tuple[int, int], ...] = field(default=(), compare=False)

    def __post_init__(self):
        ns, no = len(self.states), len(self.objects)
        seen = tuple(sorted(map(tuple, self.seen)))
        unseen = tuple(sorted(map(tuple, self.unseen)))
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "seen", seen)
        object.__setattr__(self, "unseen", unseen)
        closed = tuple(map(tuple, self.closed_world)) or tuple(sorted(seen + unseen))
        object.__setattr__(self, "closed_world", closed)
        object.__setattr__(self, "open_world", tuple((s, o) for s in range(ns) for o in range(no)))
        for s, o in seen + unseen + closed:
            if not (0 <= s < ns and 0 <= o < no):
                raise ValueError(f"composition ({s}, {o}) out of range for {ns} states x {no} objects")
        if set(seen) & set(unseen):
            raise ValueError("seen and unseen compositions overlap")
        if len(set(closed)) != len(closed):
            raise ValueError("duplicate closed-world candidate")
        if not set(seen + unseen) <= set(closed):
            raise ValueError("closed-world candidates must include every seen and unseen composition")

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def candidates(self, regime: str) -> tuple[tuple[int, int], ...]:
        """Ordered candidate pairs: ``train`` (seen only), ``closed`` or ``open``."""
        if regime == "train":
            return self.seen
        if regime == "closed":
            return self.closed_world
        if regime == "open":
            return self.open_world
        raise ValueError(f"unknown regime {regime!r}; expected train, closed or open")

    def pair_name(self, pair) -> str:
        return f"{self.states[pair[0]]} {self.objects[pair[1]]}"


@dataclass(frozen=True)
class TextBank:
    """Frozen prototypes. ``T_c`` rows follow ``pairs``."""

    T_s: np.ndarray
    T_o: np.ndarray
    T_c: np.ndarray
    pairs: tuple[tuple[int, int], ...]
    trainable: bool = False

    def __post_init__(self):
        for name in ("T_s", "T_o", "T_c"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.ndim != 2:
                raise ValueError(f"{name} must be a matrix")
            bad = np.flatnonzero(np.abs(np.linalg.norm(m, axis=1) - 1.0) > UNIT_TOL)
            if bad.size:
                raise ValueError(f"non-unit text row {int(bad[0])} in {name}")
            object.__setattr__(self, name, m)
        if len(self.pairs) != self.T_c.shape[0]:
            raise ValueError(f"T_c has {self.T_c.shape[0]} rows but {len(self.pairs)} candidate pairs")
        dims = {self.T_s.shape[1], self.T_o.shape[1], self.T_c.shape[1]}
        if len(dims) != 1:
            raise ValueError(f"text bank dimension mismatch: {sorted(dims)}")
        object.__setattr__(self, "pairs", tuple(map(tuple, self.pairs)))

    @property
    def dim(self) -> int:
        return self.T_s.shape[1]

    def restrict(self, pairs) -> "TextBank":
        """Bank whose composition rows are exactly ``pairs`` in that order."""
        index = {p: i for i, p in enumerate(self.pairs)}
        try:
            rows = [index[tuple(p)] for p in pairs]
        except KeyError as exc:
            raise ValueError(f"no composition text for pair {exc.args[0]}") from None
        return TextBank(self.T_s, self.T_o, self.T_c[rows], tuple(map(tuple, pairs)), self.trainable)

    def swapped(self) -> "TextBank":
        """State and object roles exchanged (used by the mirror test)."""
        return TextBank(self.T_o, self.T_s, self.T_c, tuple((o, s) for s, o in self.pairs), self.trainable)


@dataclass(frozen=True)
class FeatureRecord:
    feature: np.ndarray
    label: tuple[int, int]
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split tag {self.split!r}")


@dataclass
class Dataset:
    space: CompositionSpace
    bank: TextBank
    records: list[FeatureRecord]

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Stacked features (N, d) and labels (N, 2) for one split."""
        rows = [r for r in self.records if r.split == split]
        d = self.bank.dim
        if not rows:
            return np.zeros((0, d)), np.zeros((0, 2), dtype=np.int64)
        x = np.stack([r.feature for r in rows])
        y = np.array([r.label for r in rows], dtype=np.int64)
        return x, y

    def validate(self):
        seen = set(self.space.seen)
        unseen = set(self.space.unseen)
        for k, r in enumerate(self.records):
            if abs(np.linalg.norm(r.feature) - 1.0) > UNIT_TOL:
                raise ValueError(f"non-unit feature at record {k}")
            if r.feature.shape != (self.bank.dim,):
                raise ValueError(f"record {k} has dimension {r.feature.shape}, expected {self.bank.dim}")
            if r.split != "test" and r.label not in seen:
                raise ValueError(f"record {k}: {r.split} record carries non-seen label {r.label}")
            if r.label in unseen and r.split != "test":
                raise ValueError(f"record {k}: unseen composition outside the test split")
        if self.bank.T_s.shape[0] != self.space.n_states or self.bank.T_o.shape[0] != self.space.n_objects:
            raise ValueError("text bank row counts do not match the composition space")


@dataclass(frozen=True)
class SyntheticConfig:
    n_states: int = 8
    n_objects: int = 10
    dim: int = 32
    samples_per_seen: int = 25
    samples_per_test: int = 10
    seen_fraction: float = 0.6
    unseen_fraction: float = 0.5
    noise: float = 0.3
    seed: int = 7
    val_fraction: float = 0.2
    latent_dim: int = 0  # 0 -> dim // 4
    text_gap: float = 0.3

    def __post_init__(self):
        for name in ("n_states", "n_objects", "dim", "samples_per_seen", "samples_per_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.seen_fraction < 1:
            raise ValueError("seen_fraction must lie strictly between 0 and 1")
        if not 0 < self.unseen_fraction <= 1:
            raise ValueError("unseen_fraction must lie in (0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.text_gap < 0:
            raise ValueError("text_gap must be nonnegative")
        if self.latent_dim < 0:
            raise ValueError("latent_dim must be nonnegative")


def _draw_split(rng, n_states, n_objects, n_seen):
    pairs = [(s, o) for s in range(n_states) for o in range(n_objects)]
    for _ in range(100):
        order = rng.permutation(len(pairs))
        seen = sorted(pairs[i] for i in order[:n_seen])
        if {s for s, _ in seen} == set(range(n_states)) and {o for _, o in seen} == set(range(n_objects)):
            rest = [pairs[i] for i in order[n_seen:]]
            return seen, rest
    raise ValueError("split infeasible: no draw covered every state and object with seen compositions")


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Build a seeded dataset whose image and text features share one space.

    Each primitive has a unit latent. Images mix the state latent, the object
    latent and their elementwise product through one matrix ``A``; text
    prototypes reuse the matching column blocks of ``A`` so the two
    modalities are aligned up to the interaction term and noise.
    """
    ns, no, d = cfg.n_states, cfg.n_objects, cfg.dim
    n_pairs = ns * no
    if n_pairs < 4:
        raise ValueError("need at least 4 compositions")
    n_seen = int(round(cfg.seen_fraction * n_pairs))
    if not 1 <= n_seen < n_pairs:
        raise ValueError("seen_fraction must leave at least one seen and one unseen composition")
    k = cfg.latent_dim or max(2, d // 4)
    rng = substream(cfg.seed, "data")

    z_s = _unit_rows(rng.standard_normal((ns, k)))
    z_o = _unit_rows(rng.standard_normal((no, k)))
    A = rng.standard_normal((d, 3 * k)) / np.sqrt(d)
    if 2 * k <= d:
        # state and object blocks orthonormal; the interaction block stays a plain
        # Gaussian so it leaks into both primitive subspaces
        A[:, : 2 * k], _ = np.linalg.qr(A[:, : 2 * k])
    B_c = A[:, : 2 * k] + cfg.text_gap * rng.standard_normal((d, 2 * k)) / np.sqrt(d)
    B_s, B_o = B_c[:, :k], B_c[:, k:]

    seen, rest = _draw_split(rng, ns, no, n_seen)
    n_unseen = max(1, int(np.ceil(cfg.unseen_fraction * len(rest))))
    pick = np.sort(rng.choice(len(rest), size=n_unseen, replace=False))
    unseen = [rest[i] for i in pick]

    space = CompositionSpace(
        states=tuple(f"state{i}" for i in range(ns)),
        objects=tuple(f"object{i}" for i in range(no)),
        seen=tuple(seen),
        unseen=tuple(unseen),
    )
    grid = space.open_world
    T_c = _unit_rows(np.stack([B_c @ np.concatenate([z_s[s], z_o[o]]) for s, o in grid]))
    bank = TextBank(_unit_rows(z_s @ B_s.T), _unit_rows(z_o @ B_o.T), T_c, grid)

    def sample(s, o, n):
        clean = A @ np.concatenate([z_s[s], z_o[o], z_s[s] * z_o[o]])
        eps = cfg.noise * rng.standard_normal((n, d))
        return _unit_rows(clean[None, :] + eps)

    records: list[FeatureRecord] = []
    train_feats = []
    for s, o in seen:
        for x in sample(s, o, cfg.samples_per_seen):
            train_feats.append((x, (s, o)))
    n_val = int(round(cfg.val_fraction * len(train_feats)))
    val_idx = set(rng.choice(len(train_feats), size=n_val, replace=False).tolist()) if n_val else set()
    for i, (x, lab) in enumerate(train_feats):
        records.append(FeatureRecord(x, lab, "val" if i in val_idx else "train"))
    for s, o in space.closed_world:
        for x in sample(s, o, cfg.samples_per_test):
            records.append(FeatureRecord(x, (s, o), "test"))
    return Dataset(space, bank, records)


def batches(records, batch_size: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    """Shuffle the train records for ``epoch`` and cut them into index batches."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    train = np.array([i for i, r in enumerate(records) if r.split == "train"], dtype=np.int64)
    order = train[substream(seed, "shuffle", epoch).permutation(len(train))]
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


# ---------------------------------------------------------------------------
# feature file


class FeatureFileError(ValueError):
    pass


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("x", "<f8", (d,)), ("s", "<u2"), ("o", "<u2"), ("t", "u1")])


def _pack_pairs(pairs) -> bytes:
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
        raise ValueError("pair index does not fit in u16")
    return arr.astype("<u2").tobytes()


def _pack_names(names) -> bytes:
    out = []
    for n in names:
        b = n.encode("utf-8")
        out.append(struct.pack("<I", len(b)) + b)
    return b"".join(out)


def encode_features(ds: Dataset) -> bytes:
    space, bank, records = ds.space, ds.bank, ds.records
    d = bank.dim
    if bank.pairs != space.open_world:
        bank = bank.restrict(space.open_world)
    parts = [
        FEATURE_MAGIC,
        struct.pack(
            "<9I",
            FEATURE_VERSION,
            space.n_states,
            space.n_objects,
            d,
            len(space.seen),
            len(space.unseen),
            len(space.closed_world),
            len(space.open_world),
            0,
        ),
        _pack_names(space.states),
        _pack_names(space.objects),
        _pack_pairs(space.seen),
        _pack_pairs(space.unseen),
        _pack_pairs(space.closed_world),
        bank.T_s.astype("<f8").tobytes(),
        bank.T_o.astype("<f8").tobytes(),
        bank.T_c.astype("<f8").tobytes(),
        struct.pack("<I", len(records)),
    ]
    rec = np.zeros(len(records), dtype=_record_dtype(d))
    for i, r in enumerate(records):
        if r.feature.shape != (d,):
            raise ValueError(f"record {i} has dimension {r.feature.shape}, expected {d}")
        rec[i] = (r.feature, r.label[0], r.label[1], SPLITS.index(r.split))
    parts.append(rec.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FeatureFileError(f"truncated file while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def names(self, n: int, what: str) -> tuple[str, ...]:
        out = []
        for i in range(n):
            length = self.u32(f"{what}[{i}] length")
            try:
                out.append(self.take(length, f"{what}[{i}]").decode("utf-8"))
            except UnicodeDecodeError:
                raise FeatureFileError(f"invalid UTF-8 in {what}[{i}]") from None
        return tuple(out)

    def pairs(self, n: int, what: str):
        raw = np.frombuffer(self.take(4 * n, what), dtype="<u2").reshape(n, 2)
        return tuple((int(s), int(o)) for s, o in raw)

    def matrix(self, rows: int, cols: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * rows * cols, what), dtype="<f8").reshape(rows, cols).copy()


def decode_features(buf: bytes) -> Dataset:
    if len(buf) < len(FEATURE_MAGIC) + 32:
        raise FeatureFileError("truncated file: shorter than header and checksum")
    body, digest = buf[:-32], buf[-32:]
    r = _Reader(body)
    if r.take(4, "magic") != FEATURE_MAGIC:
        raise FeatureFileError("malformed header: bad magic (expected LPRF)")
    version = r.u32("version")
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"unsupported feature file version {version}")
    ns, no, d, n_seen, n_unseen, n_closed, n_open, _ = (r.u32(w) for w in (
        "state count", "object count", "dimension", "seen count", "unseen count",
        "closed candidate count", "open candidate count", "reserved"))
    if min(ns, no, d) < 1:
        raise FeatureFileError("malformed header: zero-sized dimension")
    if n_open != ns * no:
        raise FeatureFileError(f"dimension mismatch: open candidate count {n_open} != {ns}*{no}")
    states = r.names(ns, "state name")
    objects = r.names(no, "object name")
    seen = r.pairs(n_seen, "seen pairs")
    unseen = r.pairs(n_unseen, "unseen pairs")
    closed = r.pairs(n_closed, "closed candidates")
    T_s = r.matrix(ns, d, "state text rows")
    T_o = r.matrix(no, d, "object text rows")
    T_c = r.matrix(n_open, d, "composition text rows")
    n_rec = r.u32("record count")
    dt = _record_dtype(d)
    raw = np.frombuffer(r.take(dt.itemsize * n_rec, "records"), dtype=dt)
    if r.pos != len(body):
        raise FeatureFileError(f"dimension mismatch: {len(body) - r.pos} trailing bytes after records")
    if hashlib.sha256(body).digest() != digest:
        raise FeatureFileError("checksum mismatch: file is corrupted")
    try:
        space = CompositionSpace(states, objects, seen, unseen, closed)
        bank = TextBank(T_s, T_o, T_c, space.open_world)
    except ValueError as exc:
        raise FeatureFileError(str(exc)) from None
    records = []
    for k, row in enumerate(raw):
        x = row["x"].copy()
        if not np.all(np.isfinite(x)) or abs(np.linalg.norm(x) - 1.0) > UNIT_TOL:
            raise FeatureFileError(f"non-unit feature at record {k}")
        s, o, t = int(row["s"]), int(row["o"]), int(row["t"])
        if not (s < ns and o < no):
            raise FeatureFileError(f"label out of range at record {k}")
        if t >= len(SPLITS):
            raise FeatureFileError(f"bad split tag {t} at record {k}")
        records.append(FeatureRecord(x, (s, o), SPLITS[t]))
    ds = Dataset(space, bank, records)
    try:
        ds.validate()
    except ValueError as exc:
        raise FeatureFileError(str(exc)) from None
    return ds


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_features(path, ds: Dataset) -> str:
    """Write the binary feature file plus a JSON sidecar; return the file hash."""
    path = Path(path)
    blob = encode_features(ds)
    _atomic_write(path, blob)
    digest = hashlib.sha256(blob).hexdigest()
    counts = {s: sum(1 for r in ds.records if r.split == s) for s in SPLITS}
    meta = {
        "format": "LPRF",
        "version": FEATURE_VERSION,
        "sha256": digest,
        "dim": ds.bank.dim,
        "states": list(ds.space.states),
        "objects": list(ds.space.objects),
        "seen": [list(p) for p in ds.space.seen],
        "unseen": [list(p) for p in ds.space.unseen],
        "closed_world": [list(p) for p in ds.space.closed_world],
        "n_open_world": len(ds.space.open_world),
        "records": counts,
    }
    _atomic_write(path.with_name(path.name + ".json"), json.dumps(meta, indent=2).encode())
    return digest


def load_features(path) -> Dataset:
    return decode_features(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
