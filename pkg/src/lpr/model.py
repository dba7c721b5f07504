"""The three-branch LPR network: adapters, stacked cross-attention, cosine heads.

Every forward function accepts a single feature vector (d,) or a batch
(B, d) and works row-wise, so a batch is just B independent samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from . import diffmath as dm
from .diffmath import Parameter, Tensor

BRANCHES = ("com", "sor", "osr")


@dataclass
class AdapterParams:
    W1: Parameter
    b1: Parameter
    W2: Parameter
    b2: Parameter
    ratio: float = 0.2

    @classmethod
    def init(cls, rng, d, hidden, ratio=0.2, prefix="adapter"):
        return cls(
            Parameter(dm.fan_in_uniform(rng, d, (d, hidden)), f"{prefix}.W1"),
            Parameter(dm.fan_in_uniform(rng, d, (hidden,)), f"{prefix}.b1"),
            Parameter(dm.fan_in_uniform(rng, hidden, (hidden, d)), f"{prefix}.W2"),
            Parameter(dm.fan_in_uniform(rng, hidden, (d,)), f"{prefix}.b2"),
            ratio,
        )

    def parameters(self) -> list[Parameter]:
        return [self.W1, self.b1, self.W2, self.b2]


@dataclass
class AttentionBlockParams:
    W_q: Parameter
    W_k: Parameter
    W_v: Parameter
    W_out: Parameter
    mlp_W1: Parameter
    mlp_b1: Parameter
    mlp_W2: Parameter
    mlp_b2: Parameter
    ln1_gain: Parameter
    ln1_bias: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter

    @classmethod
    def init(cls, rng, d, prefix="block"):
        wide = 4 * d
        p = lambda fan, shape, name: Parameter(dm.fan_in_uniform(rng, fan, shape), f"{prefix}.{name}")  # noqa: E731
        return cls(
            p(d, (d, d), "W_q"),
            p(d, (d, d), "W_k"),
            p(d, (d, d), "W_v"),
            p(d, (d, d), "W_out"),
            p(d, (d, wide), "mlp.W1"),
            p(d, (wide,), "mlp.b1"),
            p(wide, (wide, d), "mlp.W2"),
            p(wide, (d,), "mlp.b2"),
            Parameter(np.ones(d), f"{prefix}.ln1.gain"),
            Parameter(np.zeros(d), f"{prefix}.ln1.bias"),
            Parameter(np.ones(d), f"{prefix}.ln2.gain"),
            Parameter(np.zeros(d), f"{prefix}.ln2.bias"),
        )

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class LprParams:
    com: AdapterParams
    sor: AdapterParams
    osr: AdapterParams
    sor1: AttentionBlockParams
    sor2: AttentionBlockParams
    osr1: AttentionBlockParams
    osr2: AttentionBlockParams
    log_tau: Parameter

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, hidden: int | None = None, ratio: float = 0.2, tau: float = 0.01):
        """Seeded fan-in-uniform initialisation; ``hidden`` defaults to d // 4."""
        if tau <= 0:
            raise ValueError("temperature must be positive")
        h = hidden or max(1, d // 4)
        return cls(
            com=AdapterParams.init(rng, d, h, ratio, "com.adapter"),
            sor=AdapterParams.init(rng, d, h, ratio, "sor.adapter"),
            osr=AdapterParams.init(rng, d, h, ratio, "osr.adapter"),
            sor1=AttentionBlockParams.init(rng, d, "sor.stage1"),
            sor2=AttentionBlockParams.init(rng, d, "sor.stage2"),
            osr1=AttentionBlockParams.init(rng, d, "osr.stage1"),
            osr2=AttentionBlockParams.init(rng, d, "osr.stage2"),
            log_tau=Parameter(np.array([math.log(tau)]), "log_tau"),
        )

    @property
    def dim(self) -> int:
        return self.com.W1.shape[0]

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data[0]))

    def branch_parameters(self, branch: str) -> list[Parameter]:
        if branch == "com":
            return self.com.parameters()
        if branch == "sor":
            return self.sor.parameters() + self.sor1.parameters() + self.sor2.parameters()
        if branch == "osr":
            return self.osr.parameters() + self.osr1.parameters() + self.osr2.parameters()
        raise ValueError(f"unknown branch {branch!r}")

    def parameters(self) -> list[Parameter]:
        out = []
        for b in BRANCHES:
            out += self.branch_parameters(b)
        return out + [self.log_tau]

    def named(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.parameters())

    def mirrored(self) -> "LprParams":
        """Same tensors with the sor and osr roles exchanged."""
        return LprParams(self.com, self.osr, self.sor, self.osr1, self.osr2, self.sor1, self.sor2, self.log_tau)


@dataclass
class BranchOutputs:
    x_c: Tensor | None = None
    x_s: Tensor | None = None
    x_o: Tensor | None = None
    xbar_s: Tensor | None = None
    xbar_o: Tensor | None = None
    xbar_so: Tensor | None = None
    xbar_os: Tensor | None = None
    attn_state: np.ndarray | None = None
    attn_object: np.ndarray | None = None


@dataclass
class Logits:
    """The seven logit groups; ``None`` for branches that were not run."""

    comp_com: Tensor | None = None  # c | x_c
    comp_sor: Tensor | None = None  # c | xbar_so
    state_sor: Tensor | None = None  # s | x_s
    object_sor: Tensor | None = None  # o | xbar_s
    comp_osr: Tensor | None = None  # c | xbar_os
    state_osr: Tensor | None = None  # s | xbar_o
    object_osr: Tensor | None = None  # o | x_o

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self) if getattr(self, f.name) is not None]


def _as_batch(x) -> Tensor:
    x = dm.as_tensor(x)
    return dm.reshape(x, (1, -1)) if x.ndim == 1 else x


def adapter_forward(x, p: AdapterParams) -> Tensor:
    """Residual bottleneck ``ratio * MLP(x) + (1 - ratio) * x``, unit-normalised."""
    x = _as_batch(x)
    hidden = dm.relu(x @ p.W1 + p.b1)
    out = (hidden @ p.W2 + p.b2) * p.ratio + x * (1.0 - p.ratio)
    return dm.normalize(out)


def cross_attend(query, prototypes, block: AttentionBlockParams) -> tuple[Tensor, np.ndarray]:
    """Single-head attention of each query row over the prototype rows.

    Returns the unit-norm output features and the (B, n) attention weights.
    """
    query = dm.normalize(_as_batch(query))
    protos = dm.as_tensor(prototypes)
    d = query.shape[1]
    q = query @ block.W_q
    K = protos @ block.W_k
    V = protos @ block.W_v
    weights = dm.softmax((q @ K.T) * (1.0 / math.sqrt(d)))
    context = (weights @ V) @ block.W_out
    h = dm.layer_norm(query + context, block.ln1_gain, block.ln1_bias)
    mlp = dm.relu(h @ block.mlp_W1 + block.mlp_b1) @ block.mlp_W2 + block.mlp_b2
    out = dm.layer_norm(h + mlp, block.ln2_gain, block.ln2_bias)
    return dm.normalize(out), weights.data


def _scale(params: LprParams) -> Tensor:
    return dm.exp(dm.neg(params.log_tau))


def _cos_logits(feat: Tensor, protos: np.ndarray, inv_tau: Tensor) -> Tensor:
    return dm.cosine_sim_matrix(feat, protos) * inv_tau


def forward_com(x, params: LprParams, bank) -> tuple[Tensor, Tensor]:
    """Returns (x_c, composition logits over ``bank.pairs``)."""
    x_c = adapter_forward(x, params.com)
    return x_c, _cos_logits(x_c, bank.T_c, _scale(params))


def _relation(x, adapter, first, second, stage1, stage2, T_c, inv_tau):
    x_a = adapter_forward(x, adapter)
    xbar_a, attn = cross_attend(x_a, first, stage1)
    xbar_ab, _ = cross_attend(xbar_a, second, stage2)
    logits = (
        _cos_logits(x_a, first, inv_tau),
        _cos_logits(xbar_a, second, inv_tau),
        _cos_logits(xbar_ab, T_c, inv_tau),
    )
    return x_a, xbar_a, xbar_ab, attn, logits


def forward_sor(x, params: LprParams, bank):
    """State first, then object conditioned on the state-informed feature.

    Returns ``(x_s, xbar_s, xbar_so, attn_state, (state, object, composition) logits)``.
    """
    return _relation(x, params.sor, bank.T_s, bank.T_o, params.sor1, params.sor2, bank.T_c, _scale(params))


def forward_osr(x, params: LprParams, bank):
    """Object first, then state. Logit triple is ``(object, state, composition)``."""
    return _relation(x, params.osr, bank.T_o, bank.T_s, params.osr1, params.osr2, bank.T_c, _scale(params))


def forward_all(x, params: LprParams, bank, mask=BRANCHES) -> tuple[BranchOutputs, Logits]:
    out, logits = BranchOutputs(), Logits()
    if "com" in mask:
        out.x_c, logits.comp_com = forward_com(x, params, bank)
    if "sor" in mask:
        out.x_s, out.xbar_s, out.xbar_so, out.attn_state, (ls, lo, lc) = forward_sor(x, params, bank)
        logits.state_sor, logits.object_sor, logits.comp_sor = ls, lo, lc
    if "osr" in mask:
        out.x_o, out.xbar_o, out.xbar_os, out.attn_object, (lo, ls, lc) = forward_osr(x, params, bank)
        logits.object_osr, logits.state_osr, logits.comp_osr = lo, ls, lc
    return out, logits
