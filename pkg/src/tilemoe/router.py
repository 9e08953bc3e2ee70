"""Routing: router scores, the packed-key top-K sorter, TC/EC routing and token rounding."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .core import NORMALIZATIONS, RoutingPlan, dense_gemm, seeded_rng

MAX_EXPERTS = 4096
MAX_TOPK = 16

_SIGN = np.uint64(1 << 63)
# float64 widened from float32 never uses the low 29 mantissa bits
_FREE_BITS = np.uint64((1 << 29) - 1)


@dataclass(frozen=True, eq=False)
class RouterScores:
    logits: np.ndarray
    probs: np.ndarray
    normalization: str = "full_softmax"


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def router_scores(X, Wr, normalization: str = "full_softmax") -> RouterScores:
    """Router logits ``X @ Wr`` and their row softmax.

    Expert selection always ranks ``probs``; since softmax is monotone this is
    the same ranking as the logits. ``normalization`` decides the gate values
    later: ``full_softmax`` gates are the probabilities themselves,
    ``topk_softmax`` renormalizes over the experts a token keeps.
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}")
    logits = dense_gemm(X, Wr)
    if not np.all(np.isfinite(logits)):
        raise ValueError("router logits are not finite")
    return RouterScores(logits, softmax(logits), normalization)


# ---------------------------------------------------------------------------
# top-K with packed indices


def index_bits(E: int) -> int:
    """Bits needed to store a column index below E, i.e. ceil(log2 E)."""
    return (int(E) - 1).bit_length()


def _orderable(v: np.ndarray) -> np.ndarray:
    bits = v.view(np.uint64)
    return np.where(bits & _SIGN, ~bits, bits | _SIGN)


def _as_fp32_grid(values) -> np.ndarray:
    # selection works on FP32 router outputs, widened so index bits fit below the FP32 mantissa
    v = np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64) + 0.0
    if not np.all(np.isfinite(v)):
        raise ValueError("top-K inputs must be finite in float32")
    return v


def pack_keys(values, E: int, indices=None) -> np.ndarray:
    """Sort keys with the column index packed into the low mantissa bits.

    The value is rounded to FP32, widened to FP64 and mapped to an unsigned
    integer with the same order (sign-magnitude flip). The low
    ``index_bits(E)`` bits then hold ``2**b - 1 - index``, so among equal
    values the smaller index gets the larger key. Keys are unique per row.
    """
    v = _as_fp32_grid(values)
    b = index_bits(E)
    mask = np.uint64((1 << b) - 1)
    if indices is None:
        indices = np.broadcast_to(np.arange(v.shape[-1]), v.shape)
    idx = np.asarray(indices, dtype=np.uint64)
    if np.any(idx > mask):
        raise ValueError(f"index does not fit in {b} bits")
    return (_orderable(v) & ~mask) | (mask - idx)


def unpack_index(keys, E: int) -> np.ndarray:
    mask = np.uint64((1 << index_bits(E)) - 1)
    return (mask - (np.asarray(keys, dtype=np.uint64) & mask)).astype(np.int64)


def unpack_value(keys) -> np.ndarray:
    """FP32-rounded value encoded in a packed key."""
    k = np.asarray(keys, dtype=np.uint64)
    bits = np.where(k & _SIGN, (k & ~_FREE_BITS) & ~_SIGN, ~(k | _FREE_BITS))
    return bits.view(np.float64)


def bitonic_sort_desc(keys: np.ndarray) -> np.ndarray:
    """Sort each row of a (rows, 2**m) uint64 array in descending order with a bitonic network."""
    keys = np.array(keys, dtype=np.uint64, copy=True)
    N = keys.shape[-1]
    if N & (N - 1):
        raise ValueError("bitonic network width must be a power of two")
    lead = keys.shape[:-1]
    k = 2
    while k <= N:
        j = k // 2
        while j >= 1:
            # stage (k, j): element i pairs with i + j; runs of k alternate descending / ascending
            runs = max(N // (2 * k), 1)
            dirs = 2 if k < N else 1
            v = keys.reshape(*lead, runs, dirs, k // (2 * j), 2, j)
            for d in range(dirs):
                first, second = v[..., d, :, 0, :], v[..., d, :, 1, :]
                big = np.maximum(first, second)
                if d == 0:
                    np.minimum(first, second, out=second)
                    first[...] = big
                else:
                    np.minimum(first, second, out=first)
                    second[...] = big
            j //= 2
        k *= 2
    return keys


def topk_stable_rows(rows, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise stable top-K of a (R, E) matrix; see :func:`topk_stable`."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError("expected a 2-D array of rows")
    R, E = rows.shape
    if not 1 <= E <= MAX_EXPERTS:
        raise ValueError(f"E={E} outside supported range [1, {MAX_EXPERTS}]")
    if not 1 <= K <= min(E, MAX_TOPK):
        raise ValueError(f"K={K} outside supported range [1, min(E, {MAX_TOPK})]")
    width = 1 << index_bits(E)
    keys = np.zeros((R, width), dtype=np.uint64)  # zero sorts below every packed key
    keys[:, :E] = pack_keys(rows, E)
    top = bitonic_sort_desc(keys)[:, :K]
    idx = unpack_index(top, E)
    return np.take_along_axis(rows, idx, axis=1), idx


def topk_stable(row, K: int) -> tuple[np.ndarray, np.ndarray]:
    """The K largest entries of ``row``, descending, ties to the smaller column.

    Ordering is decided on the FP32-rounded values, as in a kernel fed FP32
    router output; returned values are the original entries.
    """
    vals, idx = topk_stable_rows(np.asarray(row, dtype=np.float64)[None, :], K)
    return vals[0], idx[0]


# ---------------------------------------------------------------------------
# routing


def _gates(scores: np.ndarray, tok: np.ndarray, exp: np.ndarray, normalization: str) -> np.ndarray:
    g = scores[tok, exp]
    if normalization == "full_softmax":
        return g
    if normalization != "topk_softmax":
        raise ValueError(f"unknown normalization {normalization!r}")
    total = np.bincount(tok, weights=g, minlength=scores.shape[0])
    return g / total[tok]


def tc_route(scores, K: int, normalization: str = "full_softmax") -> RoutingPlan:
    """Token choice: every token keeps its top-K experts by ``topk_stable``."""
    scores = np.asarray(scores, dtype=np.float64)
    T, E = scores.shape
    _, idx = topk_stable_rows(scores, K)
    tok = np.repeat(np.arange(T), K)
    exp = idx.ravel()
    return RoutingPlan(T, E, tok, exp, _gates(scores, tok, exp, normalization),
                       kind="token_choice", normalization=normalization, K=K)


def _column_order(col: np.ndarray) -> np.ndarray:
    # descending score, ascending token index on ties
    return np.lexsort((np.arange(len(col)), -col))


def ec_route(scores, capacity: int, normalization: str = "full_softmax") -> RoutingPlan:
    """Expert choice: every expert keeps its top-``capacity`` tokens by score column."""
    scores = np.asarray(scores, dtype=np.float64)
    T, E = scores.shape
    if not 0 <= capacity <= T:
        raise ValueError(f"capacity must lie in [0, T={T}], got {capacity}")
    tok = np.concatenate([_column_order(scores[:, e])[:capacity] for e in range(E)]) if E else []
    exp = np.repeat(np.arange(E), capacity)
    tok = np.asarray(tok, dtype=np.int64)
    return RoutingPlan(T, E, tok, exp, _gates(scores, tok, exp, normalization),
                       kind="expert_choice", normalization=normalization)


class Rounding(str, enum.Enum):
    NR_F = "nr-f"
    SR_F = "sr-f"
    NR_S = "nr-s"
    BALANCE_F = "balance-f"
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class RoundingSubroutine:
    variant: Rounding
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Rounding(self.variant))


@dataclass(frozen=True, eq=False)
class RoundedFrequencies:
    f: np.ndarray
    f_up: np.ndarray
    f_down: np.ndarray
    f_rounded: np.ndarray


def round_and_sparsify(f, sub: RoundingSubroutine, M_tile: int, score_sums=None) -> RoundedFrequencies:
    """Choose, per expert, between rounding its token count down or up to an M_tile multiple.

    ``score_sums`` is an (E, 3) array of (score mass of the TC tokens, of the
    first ``f_down`` ranked tokens, of the first ``f_up`` ranked tokens); it is
    only read by NR_S.
    """
    f = np.asarray(f, dtype=np.int64)
    if np.any(f < 0):
        raise ValueError("frequencies must be nonnegative")
    if M_tile < 1:
        raise ValueError("M_tile must be >= 1")
    f_down = (f // M_tile) * M_tile
    f_up = -(-f // M_tile) * M_tile
    v = sub.variant
    if v is Rounding.UP:
        up = np.ones(len(f), dtype=bool)
    elif v is Rounding.DOWN:
        up = np.zeros(len(f), dtype=bool)
    elif v is Rounding.NR_F:
        up = (f_up - f) < (f - f_down)  # exact tie rounds down
    elif v is Rounding.SR_F:
        u = seeded_rng(sub.seed, "sr-f").uniforms(range(len(f)))
        up = u < (f - f_down) / M_tile
    elif v is Rounding.NR_S:
        if score_sums is None:
            raise ValueError("NR_S needs per-expert score sums")
        sums = np.asarray(score_sums, dtype=np.float64).reshape(len(f), 3)
        num = sums[:, 0] - sums[:, 1]
        den = sums[:, 2] - sums[:, 1]
        p = np.divide(num, den, out=np.zeros(len(f)), where=den != 0)
        u = seeded_rng(sub.seed, "nr-s").uniforms(range(len(f)))
        up = u < p
    elif v is Rounding.BALANCE_F:
        up = np.zeros(len(f), dtype=bool)
        z = 0
        for e in range(len(f)):
            r_up = int(f_up[e] - f[e])
            r_down = int(f_down[e] - f[e])
            if abs(r_up + z) < abs(r_down + z):
                up[e] = True
                z += r_up
            else:
                z += r_down
    else:  # pragma: no cover
        raise ValueError(f"unknown rounding {v}")
    return RoundedFrequencies(f, f_up, f_down, np.where(up, f_up, f_down))


def token_round(scores, K: int, M_tile: int, sub: RoundingSubroutine,
                normalization: str = "full_softmax") -> RoutingPlan:
    """Token rounding: TC top-K, then pad or drop each expert to an M_tile multiple.

    Tokens are ranked per expert on the TC-preferred matrix (``scores - 1``
    with the TC entries restored), so padding pulls in the best non-TC tokens
    and dropping removes the weakest TC tokens. Gates use the original scores;
    under ``topk_softmax`` they are renormalized over each token's kept experts.
    """
    scores = np.asarray(scores, dtype=np.float64)
    T, E = scores.shape
    tc = tc_route(scores, K, normalization)
    f = tc.frequencies
    preferred = scores - 1.0
    preferred[tc.token_idx, tc.expert_idx] = scores[tc.token_idx, tc.expert_idx]

    orders = [_column_order(preferred[:, e]) for e in range(E)]
    f_down = (f // M_tile) * M_tile
    f_up = np.minimum(-(-f // M_tile) * M_tile, T)
    sums = None
    if Rounding(sub.variant) is Rounding.NR_S:
        sums = np.empty((E, 3))
        for e, order in enumerate(orders):
            ranked = scores[order, e]
            sums[e] = ranked[: f[e]].sum(), ranked[: f_down[e]].sum(), ranked[: f_up[e]].sum()
    rounded = round_and_sparsify(f, sub, M_tile, sums)

    keep = np.minimum(rounded.f_rounded, T)
    if np.any(rounded.f_rounded > T):
        short = np.flatnonzero(rounded.f_rounded > T).tolist()
        warnings.warn(f"experts {short} rounded past T={T}; keeping all {T} tokens", RuntimeWarning)
    tok = np.concatenate([orders[e][: keep[e]] for e in range(E)]).astype(np.int64)
    exp = np.repeat(np.arange(E), keep)
    return RoutingPlan(T, E, tok, exp, _gates(scores, tok, exp, normalization),
                       kind="token_rounded", normalization=normalization, K=K, m_tile=M_tile)


def load_balance_loss(plan: RoutingPlan, probs) -> float:
    """Switch-style auxiliary loss ``E * sum_e (f_e / (T K)) * mean_t probs[t, e]``; 1 when balanced."""
    probs = np.asarray(probs, dtype=np.float64)
    T, E = probs.shape
    K = plan.K if plan.K else plan.num_assignments / T
    frac = plan.frequencies / (T * K)
    return float(E * np.dot(frac, probs.mean(axis=0)))
