"""Closed-form FLOP, IO and activation-memory models, plus padding-waste estimates."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Iterable

import numpy as np

from .core import CostReport, MoEConfig, seeded_rng
from .grouped_gemm import tile_stats

CACHE_SETS = ("X", "H", "Y", "gathered_X", "gathered_dO")
MINIMAL_POLICY = frozenset({"X", "H"})
POLICY_WITH_Y = frozenset({"X", "H", "Y"})


def model_flops(cfg: MoEConfig, forward_only: bool = False) -> int:
    """Model FLOPs of one layer: 6TnKd forward, 12TnKd backward."""
    per = cfg.T * cfg.n * cfg.K * cfg.d
    return 6 * per if forward_only else 18 * per


def _tokens_per_expert(cfg: MoEConfig, frequencies=None) -> np.ndarray:
    if frequencies is None:
        return np.full(cfg.E, cfg.T * cfg.K / cfg.E)
    f = np.asarray(frequencies, dtype=np.float64)
    if f.shape != (cfg.E,):
        raise ValueError(f"expected {cfg.E} frequencies")
    return f


def io_bytes_forward(cfg: MoEConfig, uniform: bool = True, include_H_writes: bool = False,
                     frequencies=None) -> float:
    """HBM bytes moved by the up and down projections of all experts.

    Per expert with T_e tokens the up projection reads X_e, W1_e and writes
    A_e, and the down projection reads A_e, W2_e and writes Y_e:
    ``b * (2 T_e n + 3 n d + 2 T_e d)`` at ``b`` bytes per element. H writes
    (``b * 2 T_e n``) are left out unless ``include_H_writes``. With
    ``uniform`` every expert gets T K / E tokens; otherwise pass
    ``frequencies``.
    """
    if not uniform and frequencies is None:
        raise ValueError("non-uniform IO needs per-expert frequencies")
    Te = _tokens_per_expert(cfg, None if uniform else frequencies)
    b, n, d = cfg.element_bytes, cfg.n, cfg.d
    per = b * (2 * Te * n + 3 * n * d + 2 * Te * d)
    if include_H_writes:
        per = per + b * 2 * Te * n
    return float(per.sum())


def arithmetic_intensity(cfg: MoEConfig, uniform: bool = True) -> float:
    """Forward FLOPs per byte of one expert under uniform routing, H writes ignored.

    ``3 / ((2 + 2G)/d + 3/(T rho))`` for 2-byte elements; wider elements scale
    the bytes, hence the ``2 / element_bytes`` factor.
    """
    if not uniform:
        raise ValueError("the closed form assumes uniform routing")
    G = float(cfg.G)
    Trho = cfg.T * float(cfg.rho)
    return 3.0 / ((2.0 + 2.0 * G) / cfg.d + 3.0 / Trho) * (2.0 / cfg.element_bytes)


def activation_bytes(cfg: MoEConfig, policy: Iterable[str] = MINIMAL_POLICY) -> int:
    """Bytes cached for backward under ``policy``; routing metadata is not counted."""
    policy = frozenset(policy)
    if not policy:
        raise ValueError("cache policy must not be empty")
    unknown = policy - set(CACHE_SETS)
    if unknown:
        raise ValueError(f"unknown cached sets {sorted(unknown)}")
    T, d, n, K = cfg.T, cfg.d, cfg.n, cfg.K
    terms = {"X": T * d, "H": 2 * T * K * n, "Y": T * K * d,
             "gathered_X": T * K * d, "gathered_dO": T * K * d}
    return cfg.element_bytes * sum(terms[s] for s in policy)


def sample_frequencies(cfg: MoEConfig, gen: np.random.Generator) -> np.ndarray:
    """Expert counts of uniform multinomial routing: T*K draws over E equally likely experts."""
    return gen.multinomial(cfg.T * cfg.K, np.full(cfg.E, 1.0 / cfg.E))


def expected_wasted_flops(cfg: MoEConfig, trials: int = 100, seed: int = 0,
                          total: bool = True) -> float:
    """Monte-Carlo mean of padding-wasted FLOPs under uniform multinomial routing."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = seeded_rng(seed, f"waste/T{cfg.T}/E{cfg.E}/K{cfg.K}/M{cfg.M_tile}")
    acc = 0
    for i in range(trials):
        st = tile_stats(sample_frequencies(cfg, rng.generator(i)), cfg.M_tile, cfg.n, cfg.d)
        acc += st.wasted_flops_total if total else st.wasted_flops_fwd
    return acc / trials


def cost_report(cfg: MoEConfig, trials: int = 100, seed: int = 0) -> CostReport:
    return CostReport(
        cfg=cfg,
        flops_model=model_flops(cfg),
        io_bytes_forward=io_bytes_forward(cfg),
        arithmetic_intensity=arithmetic_intensity(cfg),
        activation_bytes=activation_bytes(cfg, MINIMAL_POLICY),
        activation_bytes_with_y=activation_bytes(cfg, POLICY_WITH_Y),
        wasted_flops=expected_wasted_flops(cfg, trials, seed),
    )


def sweep(configs: Iterable[MoEConfig], trials: int = 100, seed: int = 0,
          workers: int = 1) -> list[CostReport]:
    """One report per config, in input order."""
    configs = list(configs)
    if workers <= 1:
        return [cost_report(c, trials, seed) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: cost_report(c, trials, seed), configs))


def _rows(T, d, shapes, M_tile=128):
    return [MoEConfig(T=T, d=d, n=n, E=E, K=K, M_tile=M_tile) for n, E, K in shapes]


_GRAN5 = [(64, 512, 32), (128, 256, 16), (256, 128, 8), (512, 64, 4), (1024, 32, 2)]
_GRAN3 = [(256, 128, 8), (512, 64, 4), (1024, 32, 2)]

PRESETS: dict[str, list[MoEConfig]] = {
    # memory-IO benchmark rows, one model size each
    "1.4b-io": _rows(40960, 768, _GRAN5),
    "7b-io": _rows(24576, 1536, _GRAN5),
    "30b-io": _rows(32768, 4096, [(64, 1024, 64), (128, 512, 32), (256, 256, 16),
                                  (512, 128, 8), (1024, 64, 4)]),
    "120b-io": _rows(32768, 4096, [(128, 1024, 64), (256, 512, 32), (512, 256, 16),
                                   (1024, 128, 8), (2048, 64, 4)]),
    # activation-memory / throughput benchmark rows
    "1.4b-granularity": _rows(40960, 768, _GRAN3),
    "7b-granularity": _rows(24576, 1536, _GRAN3),
    "30b-granularity": _rows(32768, 4096, [(256, 256, 16), (512, 128, 8), (1024, 64, 4)]),
    "120b-granularity": _rows(32768, 4096, [(512, 256, 16), (1024, 128, 8), (2048, 64, 4)]),
    # padding-waste sweep over E at T=16k, d=4k, n=1k, K=4
    "fig8": [MoEConfig(T=16384, d=4096, n=1024, E=E, K=4, M_tile=128) for E in (32, 64, 128, 256, 512)],
}
