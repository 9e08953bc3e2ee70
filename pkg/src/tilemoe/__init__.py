"""Reference MoE layer with grouped GEMMs, token-rounding routing and analytic cost models."""

from .core import (CostReport, ExpertWeights, ForwardCache, GradientSet, MoEConfig, RoutingPlan,
                   TileStats, dense_gemm, seeded_rng)
from .grouped_gemm import GroupLayout, grouped_gemm_varlen_k, grouped_gemm_varlen_m, tile_stats
from .moe_engine import backward, backward_reference, forward, forward_reference
from .router import (Rounding, RoundingSubroutine, ec_route, round_and_sparsify, router_scores,
                     tc_route, token_round, topk_stable)

__all__ = [
    "CostReport", "ExpertWeights", "ForwardCache", "GradientSet", "GroupLayout", "MoEConfig",
    "Rounding", "RoundingSubroutine", "RoutingPlan", "TileStats", "backward", "backward_reference",
    "dense_gemm", "ec_route", "forward", "forward_reference", "grouped_gemm_varlen_k",
    "grouped_gemm_varlen_m", "round_and_sparsify", "router_scores", "seeded_rng", "tc_route",
    "tile_stats", "token_round", "topk_stable",
]
