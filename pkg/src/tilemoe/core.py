"""Shared domain types, counter-based randomness and the dense GEMM primitive.

Everything numeric is float64. ``MoEConfig.element_bytes`` only feeds the byte
accounting in :mod:`tilemoe.cost_models`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

NORMALIZATIONS = ("full_softmax", "topk_softmax")
PLAN_KINDS = ("token_choice", "expert_choice", "token_rounded")


def _frozen(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MoEConfig:
    """Layer shape plus tiling parameters of one MoE layer."""

    T: int
    d: int
    n: int
    E: int
    K: int
    M_tile: int = 128
    element_bytes: int = 2

    def __post_init__(self):
        for name in ("T", "d", "n", "E", "M_tile"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 1 <= self.K <= self.E:
            raise ValueError(f"K must satisfy 1 <= K <= E, got K={self.K}, E={self.E}")
        if self.element_bytes not in (2, 4, 8):
            raise ValueError(f"element_bytes must be 2, 4 or 8, got {self.element_bytes}")

    @property
    def G(self) -> Fraction:
        """Expert granularity d/n."""
        return Fraction(self.d, self.n)

    @property
    def rho(self) -> Fraction:
        """Activation ratio K/E."""
        return Fraction(self.K, self.E)

    def replace(self, **changes) -> "MoEConfig":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return MoEConfig(**kw)


@dataclass(frozen=True, eq=False)
class ExpertWeights:
    """Router matrix ``Wr`` (d, E), up projections ``W1`` (E, d, 2n), down projections ``W2`` (E, n, d)."""

    Wr: np.ndarray
    W1: np.ndarray
    W2: np.ndarray

    def __post_init__(self):
        Wr, W1, W2 = (np.asarray(a, dtype=np.float64) for a in (self.Wr, self.W1, self.W2))
        if Wr.ndim != 2 or W1.ndim != 3 or W2.ndim != 3:
            raise ValueError("Wr must be 2-D, W1 and W2 must be stacks of matrices")
        d, E = Wr.shape
        if W1.shape[0] != E or W2.shape[0] != E:
            raise ValueError(f"expected {E} expert matrices, got {W1.shape[0]} and {W2.shape[0]}")
        if W1.shape[1] != d or W1.shape[2] % 2:
            raise ValueError(f"W1 must be (E, d, 2n), got {W1.shape}")
        n = W1.shape[2] // 2
        if W2.shape[1:] != (n, d):
            raise ValueError(f"W2 must be (E, {n}, {d}), got {W2.shape}")
        for a in (Wr, W1, W2):
            if not np.all(np.isfinite(a)):
                raise ValueError("weights must be finite")
        object.__setattr__(self, "Wr", _frozen(Wr))
        object.__setattr__(self, "W1", _frozen(W1))
        object.__setattr__(self, "W2", _frozen(W2))

    @property
    def d(self) -> int:
        return self.Wr.shape[0]

    @property
    def E(self) -> int:
        return self.Wr.shape[1]

    @property
    def n(self) -> int:
        return self.W2.shape[1]

    def check(self, cfg: MoEConfig) -> None:
        if (self.d, self.E, self.n) != (cfg.d, cfg.E, cfg.n):
            raise ValueError(
                f"weights (d={self.d}, E={self.E}, n={self.n}) do not match config "
                f"(d={cfg.d}, E={cfg.E}, n={cfg.n})"
            )

    @classmethod
    def random(cls, cfg: MoEConfig, seed: int, scale: float = 1.0) -> "ExpertWeights":
        gen = seeded_rng(seed, "weights").generator(0)
        Wr = gen.standard_normal((cfg.d, cfg.E)) * (scale / np.sqrt(cfg.d))
        W1 = gen.standard_normal((cfg.E, cfg.d, 2 * cfg.n)) * (scale / np.sqrt(cfg.d))
        W2 = gen.standard_normal((cfg.E, cfg.n, cfg.d)) * (scale / np.sqrt(cfg.n))
        return cls(Wr, W1, W2)


@dataclass(frozen=True, eq=False)
class RoutingPlan:
    """Sparse routing decision of one microbatch.

    Assignments are stored flat in *expert-contiguous* order: sorted by expert
    id, then by token index. Every per-assignment array in the package
    (gates, ``GradientSet.dS``, rows of grouped matrices) uses this order.
    """

    T: int
    E: int
    token_idx: np.ndarray
    expert_idx: np.ndarray
    gates: np.ndarray
    kind: str = "token_choice"
    normalization: str = "full_softmax"
    K: int | None = None
    m_tile: int | None = None
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        tok = np.asarray(self.token_idx, dtype=np.int64).ravel()
        exp = np.asarray(self.expert_idx, dtype=np.int64).ravel()
        gates = np.asarray(self.gates, dtype=np.float64).ravel()
        if not (len(tok) == len(exp) == len(gates)):
            raise ValueError("token_idx, expert_idx and gates must have equal length")
        order = np.lexsort((tok, exp))
        tok, exp, gates = tok[order], exp[order], gates[order]
        object.__setattr__(self, "token_idx", _frozen(tok))
        object.__setattr__(self, "expert_idx", _frozen(exp))
        object.__setattr__(self, "gates", _frozen(gates))
        counts = np.bincount(exp, minlength=self.E) if len(exp) else np.zeros(self.E, np.int64)
        offsets = np.zeros(self.E + 1, dtype=np.int64)
        np.cumsum(counts[: self.E], out=offsets[1:])
        object.__setattr__(self, "offsets", _frozen(offsets))
        self.validate()

    def validate(self) -> None:
        if self.kind not in PLAN_KINDS:
            raise ValueError(f"unknown plan kind {self.kind!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        tok, exp = self.token_idx, self.expert_idx
        if len(tok) and (tok.min() < 0 or tok.max() >= self.T):
            raise ValueError("token index out of range")
        if len(exp) and (exp.min() < 0 or exp.max() >= self.E):
            raise ValueError("expert id out of range")
        if not np.all(np.isfinite(self.gates)):
            raise ValueError("gate scores must be finite")
        pair = exp * self.T + tok
        if len(np.unique(pair)) != len(pair):
            raise ValueError("duplicate (token, expert) assignment")
        if self.kind == "token_choice":
            if self.K is None:
                raise ValueError("token_choice plans must record K")
            per_token = np.bincount(tok, minlength=self.T)
            if np.any(per_token != self.K):
                raise ValueError("every token must hold exactly K experts under token choice")
        if self.kind == "token_rounded" and self.m_tile is not None:
            f = self.frequencies
            # an expert saturated at all T tokens cannot be padded further
            bad = (f % self.m_tile != 0) & (f != self.T)
            if np.any(bad):
                raise ValueError(f"token_rounded frequencies not multiples of {self.m_tile}: {f[bad]}")

    @property
    def frequencies(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def num_assignments(self) -> int:
        return len(self.token_idx)

    @property
    def expert_tokens(self) -> list[np.ndarray]:
        return [self.token_idx[self.offsets[e] : self.offsets[e + 1]] for e in range(self.E)]

    @property
    def assignments(self) -> list[list[tuple[int, float]]]:
        """Per-token ``(expert, gate)`` pairs in ascending expert order."""
        out: list[list[tuple[int, float]]] = [[] for _ in range(self.T)]
        for t, e, g in zip(self.token_idx.tolist(), self.expert_idx.tolist(), self.gates.tolist()):
            out[t].append((e, g))
        return out

    def with_gates(self, gates: np.ndarray) -> "RoutingPlan":
        """Same selection, new gate values (given in expert-contiguous order)."""
        return RoutingPlan(
            self.T, self.E, self.token_idx, self.expert_idx, gates,
            kind=self.kind, normalization=self.normalization, K=self.K, m_tile=self.m_tile,
        )

    def permuted(self, perm: np.ndarray) -> "RoutingPlan":
        """Plan for the row-permuted input ``X[perm]``."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return RoutingPlan(
            self.T, self.E, inv[self.token_idx], self.expert_idx, self.gates,
            kind=self.kind, normalization=self.normalization, K=self.K, m_tile=self.m_tile,
        )


@dataclass(frozen=True, eq=False)
class ForwardCache:
    """Activations kept between forward and backward: the input, H and the plan. Nothing else."""

    X: np.ndarray
    H: np.ndarray
    plan: RoutingPlan

    def __post_init__(self):
        if self.H.shape[0] != self.plan.num_assignments:
            raise ValueError("H row count must equal the number of assignments")

    def nbytes(self, element_bytes: int = 2) -> int:
        """Activation bytes at ``element_bytes`` per element, routing metadata excluded."""
        return element_bytes * (self.X.size + self.H.size)


@dataclass(frozen=True, eq=False)
class GradientSet:
    dX: np.ndarray
    dWr: np.ndarray
    dW1: np.ndarray
    dW2: np.ndarray
    dS: np.ndarray

    FIELDS = ("dX", "dWr", "dW1", "dW2", "dS")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass(frozen=True, eq=False)
class TileStats:
    tiles: np.ndarray
    padded_rows: np.ndarray
    wasted_flops_fwd: int
    wasted_flops_total: int


@dataclass(frozen=True)
class CostReport:
    cfg: MoEConfig
    flops_model: int
    io_bytes_forward: float
    arithmetic_intensity: float
    activation_bytes: int
    activation_bytes_with_y: int
    wasted_flops: float


class CounterRNG:
    """Counter-based generator: every draw is a pure function of (seed, stream, index).

    Backed by numpy's Philox with the key derived from ``seed`` and a stable
    hash of ``stream``; the counter is the draw index.
    """

    def __init__(self, seed: int, stream: str):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = stream
        digest = hashlib.blake2b(stream.encode(), digest_size=8).digest()
        self._key = (self.seed, int.from_bytes(digest, "little"))

    def _bitgen(self, index: int) -> np.random.Philox:
        if index < 0:
            raise ValueError("draw index must be nonnegative")
        # counter word 1 carries the index so bulk generators for adjacent indices never overlap
        return np.random.Philox(key=list(self._key), counter=[0, int(index), 0, 0])

    def uniform(self, index: int) -> float:
        raw = int(self._bitgen(index).random_raw())
        return (raw >> 11) * 2.0**-53

    def uniforms(self, indices) -> np.ndarray:
        return np.array([self.uniform(int(i)) for i in np.asarray(indices).ravel()], dtype=np.float64)

    def generator(self, index: int) -> np.random.Generator:
        """Independent bulk generator for draw slot ``index``."""
        return np.random.Generator(self._bitgen(index))


def seeded_rng(seed: int, stream: str) -> CounterRNG:
    return CounterRNG(seed, stream)


def dense_gemm(A, B) -> np.ndarray:
    """C = A @ B in float64 with a fixed left-to-right reduction over the inner dimension.

    The reduction is a sequence of rank-1 updates, so each C[i, j] is summed
    in the order k = 0, 1, ... regardless of BLAS threading. Rows of C depend
    only on the matching rows of A.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"shape mismatch: {A.shape} @ {B.shape}")
    C = np.zeros((A.shape[0], B.shape[1]), dtype=np.float64)
    for k in range(A.shape[1]):
        C += A[:, k : k + 1] * B[k : k + 1, :]
    return C
