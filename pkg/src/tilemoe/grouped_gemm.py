"""Variable-length grouped GEMMs over expert-contiguous row groups, with tile accounting."""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import RoutingPlan, TileStats, dense_gemm


@dataclass(frozen=True, eq=False)
class GroupLayout:
    """Expert row partition of a packed matrix.

    ``indices`` (when given) maps every packed row to a row of an un-gathered
    T-row operand; without it the operand is already packed (contiguous mode).
    """

    frequencies: np.ndarray
    indices: np.ndarray | None = None

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=np.int64)
        if np.any(f < 0):
            raise ValueError("frequencies must be nonnegative")
        object.__setattr__(self, "frequencies", f)
        if self.indices is not None:
            idx = np.asarray(self.indices, dtype=np.int64)
            if len(idx) != f.sum():
                raise ValueError("gather indices must cover every packed row")
            object.__setattr__(self, "indices", idx)

    @property
    def offsets(self) -> np.ndarray:
        out = np.zeros(len(self.frequencies) + 1, dtype=np.int64)
        np.cumsum(self.frequencies, out=out[1:])
        return out

    @property
    def rows(self) -> int:
        return int(self.frequencies.sum())

    @property
    def gathered(self) -> bool:
        return self.indices is not None

    def contiguous(self) -> "GroupLayout":
        return GroupLayout(self.frequencies)

    @classmethod
    def from_plan(cls, plan: RoutingPlan, gathered: bool = True) -> "GroupLayout":
        return cls(plan.frequencies, plan.token_idx if gathered else None)


def _fetch(operand: np.ndarray, layout: GroupLayout, lo: int, hi: int) -> np.ndarray:
    if layout.indices is None:
        return operand[lo:hi]
    idx = layout.indices[lo:hi]
    if len(idx) and (idx.min() < 0 or idx.max() >= operand.shape[0]):
        raise IndexError("gather index out of range")
    return operand[idx]


def _check_operand(operand: np.ndarray, layout: GroupLayout, name: str) -> None:
    if not layout.gathered and operand.shape[0] != layout.rows:
        raise ValueError(f"{name} has {operand.shape[0]} rows, layout packs {layout.rows}")


def _run(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def tile_stats(frequencies, M_tile: int, n: int, d: int) -> TileStats:
    """Row tiles per expert and the FLOPs burnt on zero-padded rows.

    A padded row wastes 6nd FLOPs in forward (up 4nd + down 2nd) and as much
    again in the varlen-M backward GEMMs; varlen-K padding is not charged.
    """
    f = np.asarray(frequencies, dtype=np.int64)
    if np.any(f < 0):
        raise ValueError("frequencies must be nonnegative")
    tiles = -(-f // M_tile)
    padded = (M_tile - f % M_tile) % M_tile
    waste = int(padded.sum()) * n * d
    return TileStats(tiles, padded, 6 * waste, 12 * waste)


def grouped_gemm_varlen_m(inp, layout: GroupLayout, weights, M_tile: int, *,
                          flop_dims: tuple[int, int] | None = None,
                          counter: Counter | None = None, stage: str = "varlen_m",
                          workers: int = 1) -> tuple[np.ndarray, TileStats]:
    """Per expert, ``out[group e] = rows(inp, e) @ weights[e]``, computed in M_tile row tiles.

    ``flop_dims=(n, d)`` sets the MoE dims used for the padding-waste fields
    of the returned stats; by default the weights are read as an up
    projection, (K_dim, N_dim) = (d, 2n).
    """
    inp = np.asarray(inp, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    E, K_dim, N_dim = weights.shape
    if len(layout.frequencies) != E:
        raise ValueError(f"layout has {len(layout.frequencies)} groups, weights {E}")
    if inp.ndim != 2 or inp.shape[1] != K_dim:
        raise ValueError(f"input width {inp.shape[-1]} != weight rows {K_dim}")
    if M_tile < 1:
        raise ValueError("M_tile must be >= 1")
    _check_operand(inp, layout, "input")
    out = np.zeros((layout.rows, N_dim), dtype=np.float64)
    offsets = layout.offsets

    def expert(e: int) -> None:
        for lo in range(offsets[e], offsets[e + 1], M_tile):
            hi = min(lo + M_tile, offsets[e + 1])
            # padded rows of the last tile are implicit zeros: never computed, never written
            out[lo:hi] = dense_gemm(_fetch(inp, layout, lo, hi), weights[e])

    _run(expert, range(E), workers)
    if counter is not None:
        counter[stage] += 2 * layout.rows * K_dim * N_dim
    n, d = flop_dims if flop_dims is not None else (N_dim // 2, K_dim)
    return out, tile_stats(layout.frequencies, M_tile, n, d)


def grouped_gemm_varlen_k(lhs, rhs, layout: GroupLayout, *, gather_lhs: bool = False,
                          gather_rhs: bool = False, counter: Counter | None = None,
                          stage: str = "varlen_k", workers: int = 1) -> np.ndarray:
    """Per expert ``lhs_e^T @ rhs_e``, reducing over that expert's tokens.

    Either operand may be an un-gathered T-row matrix read through
    ``layout.indices`` (``gather_lhs`` / ``gather_rhs``); otherwise it is
    packed in the layout's row order. Returns an (E, P, Q) stack.
    """
    lhs = np.asarray(lhs, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if (gather_lhs or gather_rhs) and not layout.gathered:
        raise ValueError("gathering needs a layout with indices")
    packed = layout.contiguous()
    lhs_layout = layout if gather_lhs else packed
    rhs_layout = layout if gather_rhs else packed
    _check_operand(lhs, lhs_layout, "lhs")
    _check_operand(rhs, rhs_layout, "rhs")
    E = len(layout.frequencies)
    P, Q = lhs.shape[1], rhs.shape[1]
    offsets = layout.offsets
    out = np.zeros((E, P, Q), dtype=np.float64)

    def expert(e: int) -> None:
        lo, hi = offsets[e], offsets[e + 1]
        if hi > lo:
            out[e] = dense_gemm(_fetch(lhs, lhs_layout, lo, hi).T, _fetch(rhs, rhs_layout, lo, hi))

    _run(expert, range(E), workers)
    if counter is not None:
        counter[stage] += 2 * layout.rows * P * Q
    return out
