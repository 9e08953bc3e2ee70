"""MoE layer forward/backward.

``forward``/``backward`` are the memory-efficient path: only X, H and the plan
survive forward, Y is a transient buffer, and the score gradient is reduced
as <dA', A> over n instead of <dO, Y> over d. ``forward_reference`` and
``backward_reference`` are plain per-assignment loops that materialize Y and
dY; they exist to be compared against.
"""

from __future__ import annotations

from collections import Counter
from typing import Callable

import numpy as np
from scipy.special import expit

from .core import ExpertWeights, ForwardCache, GradientSet, RoutingPlan, dense_gemm
from .grouped_gemm import GroupLayout, grouped_gemm_varlen_k, grouped_gemm_varlen_m
from .router import router_scores, softmax


def silu(x):
    return x * expit(x)


def swiglu(H) -> np.ndarray:
    """``silu(gate) * up`` where the first half of the columns is the gate, the second half up."""
    H = np.asarray(H, dtype=np.float64)
    if H.shape[-1] % 2:
        raise ValueError("SwiGLU input width must be even")
    n = H.shape[-1] // 2
    return silu(H[..., :n]) * H[..., n:]


def dswiglu(dA, H) -> tuple[np.ndarray, np.ndarray]:
    """Recompute ``A = swiglu(H)`` and return it with ``dH`` for upstream gradient ``dA``."""
    H = np.asarray(H, dtype=np.float64)
    dA = np.asarray(dA, dtype=np.float64)
    n = H.shape[-1] // 2
    if dA.shape != H.shape[:-1] + (n,):
        raise ValueError(f"dA shape {dA.shape} does not match H shape {H.shape}")
    gate, up = H[..., :n], H[..., n:]
    sig = expit(gate)
    act = gate * sig
    dgate = dA * up * sig * (1.0 + gate * (1.0 - sig))
    dup = dA * act
    return act * up, np.concatenate([dgate, dup], axis=-1)


def _token_slots(plan: RoutingPlan) -> np.ndarray:
    """(T, max experts per token) table of packed row positions, -1 where empty."""
    tok = plan.token_idx
    by_token = np.lexsort((plan.expert_idx, tok))
    counts = np.bincount(tok, minlength=plan.T)
    width = int(counts.max()) if len(tok) else 0
    starts = np.zeros(plan.T, dtype=np.int64)
    np.cumsum(counts[:-1], out=starts[1:])
    slot = np.arange(len(by_token)) - starts[tok[by_token]]
    table = np.full((plan.T, width), -1, dtype=np.int64)
    table[tok[by_token], slot] = by_token
    return table


def expert_aggregate(Y, plan: RoutingPlan, gates=None) -> np.ndarray:
    """Each token gathers its experts' rows and sums them with gate weights (ascending expert order)."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape[0] != plan.num_assignments:
        raise ValueError("Y rows do not match the plan")
    gates = plan.gates if gates is None else np.asarray(gates, dtype=np.float64)
    O = np.zeros((plan.T, Y.shape[1]), dtype=np.float64)
    table = _token_slots(plan)
    for s in range(table.shape[1]):
        rows = table[:, s]
        live = rows >= 0
        O[live] += gates[rows[live], None] * Y[rows[live]]
    return O


def _check(X, weights: ExpertWeights, plan: RoutingPlan) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (plan.T, weights.d):
        raise ValueError(f"X shape {X.shape} != (T={plan.T}, d={weights.d})")
    if plan.E != weights.E:
        raise ValueError(f"plan routes to {plan.E} experts, weights hold {weights.E}")
    return X


def forward(X, weights: ExpertWeights, plan: RoutingPlan, *, m_tile: int = 128,
            workers: int = 1, counter: Counter | None = None) -> tuple[np.ndarray, ForwardCache]:
    X = _check(X, weights, plan)
    layout = GroupLayout.from_plan(plan)
    dims = (weights.n, weights.d)
    H, _ = grouped_gemm_varlen_m(X, layout, weights.W1, m_tile, flop_dims=dims,
                                 counter=counter, stage="up_proj", workers=workers)
    A = swiglu(H)
    Y, _ = grouped_gemm_varlen_m(A, layout.contiguous(), weights.W2, m_tile, flop_dims=dims,
                                 counter=counter, stage="down_proj", workers=workers)
    O = expert_aggregate(Y, plan)
    del Y, A
    return O, ForwardCache(X, H, plan)


def router_grad_logits(probs, plan: RoutingPlan, dS) -> np.ndarray:
    """Gradient w.r.t. router logits given per-assignment gate gradients ``dS``."""
    probs = np.asarray(probs, dtype=np.float64)
    tok, exp = plan.token_idx, plan.expert_idx
    dlogits = np.zeros_like(probs)
    if plan.normalization == "full_softmax":
        g = np.zeros_like(probs)
        g[tok, exp] = dS
        dlogits = probs * (g - np.sum(g * probs, axis=1, keepdims=True))
    else:
        q = plan.gates
        c = np.bincount(tok, weights=q * dS, minlength=plan.T)
        dlogits[tok, exp] = q * (dS - c[tok])
    return dlogits


def backward(dO, cache: ForwardCache, weights: ExpertWeights, *, m_tile: int = 128,
             workers: int = 1, counter: Counter | None = None, router_grad: bool = True,
             trace: dict | None = None) -> GradientSet:
    """Memory-efficient backward from the cached X and H only.

    ``router_grad`` propagates dS through the router softmax (recomputing the
    router scores from X); switch it off for plans whose gates did not come
    from ``weights.Wr``. ``trace``, if given, receives dH, dA_prime, A and
    A_prime.
    """
    plan, X, H = cache.plan, cache.X, cache.H
    dO = np.asarray(dO, dtype=np.float64)
    if dO.shape != X.shape:
        raise ValueError(f"dO shape {dO.shape} != X shape {X.shape}")
    layout = GroupLayout.from_plan(plan)
    packed = layout.contiguous()
    dims = (weights.n, weights.d)
    s = plan.gates[:, None]

    dA_prime, _ = grouped_gemm_varlen_m(dO, layout, weights.W2.transpose(0, 2, 1), m_tile,
                                        flop_dims=dims, counter=counter, stage="down_bwd_act",
                                        workers=workers)
    A, dH = dswiglu(s * dA_prime, H)
    dS = np.einsum("ij,ij->i", dA_prime, A)
    if counter is not None:
        counter["dS_reduce"] += 2 * A.size
    A_prime = s * A
    dW2 = grouped_gemm_varlen_k(A_prime, dO, layout, gather_rhs=True, counter=counter,
                                stage="down_bwd_weight", workers=workers)
    dX_packed, _ = grouped_gemm_varlen_m(dH, packed, weights.W1.transpose(0, 2, 1), m_tile,
                                         flop_dims=dims, counter=counter, stage="up_bwd_act",
                                         workers=workers)
    dW1 = grouped_gemm_varlen_k(X, dH, layout, gather_lhs=True, counter=counter,
                                stage="up_bwd_weight", workers=workers)
    dX = expert_aggregate(dX_packed, plan, gates=np.ones(plan.num_assignments))

    dWr = np.zeros_like(weights.Wr)
    if router_grad:
        probs = router_scores(X, weights.Wr, plan.normalization).probs
        dlogits = router_grad_logits(probs, plan, dS)
        dWr = dense_gemm(X.T, dlogits)
        dX = dX + dense_gemm(dlogits, weights.Wr.T)
    if trace is not None:
        trace.update(dH=dH, dA_prime=dA_prime, A=A, A_prime=A_prime)
    return GradientSet(dX, dWr, dW1, dW2, dS)


# ---------------------------------------------------------------------------
# reference path


def _ref_expert(x, W1e, W2e):
    n = W2e.shape[0]
    h = x @ W1e
    g, u = h[:n], h[n:]
    sig = 1.0 / (1.0 + np.exp(-g))
    a = g * sig * u
    return h, g, u, sig, a, a @ W2e


def forward_reference(X, weights: ExpertWeights, plan: RoutingPlan) -> np.ndarray:
    X = _check(X, weights, plan)
    O = np.zeros_like(X)
    for t, e, s in zip(plan.token_idx, plan.expert_idx, plan.gates):
        O[t] += s * _ref_expert(X[t], weights.W1[e], weights.W2[e])[-1]
    return O


def backward_reference(dO, X, weights: ExpertWeights, plan: RoutingPlan, *,
                       counter: Counter | None = None, router_grad: bool = True,
                       trace: dict | None = None) -> GradientSet:
    """Textbook backward that materializes Y and dY = s * dO, with dS = <dO_t, Y_e,t>."""
    X = _check(X, weights, plan)
    dO = np.asarray(dO, dtype=np.float64)
    d, n = weights.d, weights.n
    N = plan.num_assignments
    dX = np.zeros_like(X)
    dW1 = np.zeros_like(weights.W1)
    dW2 = np.zeros_like(weights.W2)
    dS = np.zeros(N)
    dH = np.zeros((N, 2 * n))
    Y = np.zeros((N, d))
    for i, (t, e, s) in enumerate(zip(plan.token_idx, plan.expert_idx, plan.gates)):
        _, g, u, sig, a, y = _ref_expert(X[t], weights.W1[e], weights.W2[e])
        Y[i] = y
        dy = s * dO[t]
        dS[i] = dO[t] @ y
        dW2[e] += np.outer(a, dy)
        da = weights.W2[e] @ dy
        dh = np.concatenate([da * u * (sig + g * sig * (1.0 - sig)), da * g * sig])
        dH[i] = dh
        dW1[e] += np.outer(X[t], dh)
        dX[t] += weights.W1[e] @ dh
    if counter is not None:
        counter["down_bwd_act"] += 2 * N * d * n
        counter["up_bwd_act"] += 2 * N * 2 * n * d
        counter["down_bwd_weight"] += 2 * N * n * d
        counter["up_bwd_weight"] += 2 * N * d * 2 * n
        counter["dS_reduce"] += 2 * N * d
        counter["Y_recompute"] += 2 * N * n * d

    dWr = np.zeros_like(weights.Wr)
    if router_grad:
        probs = softmax(X @ weights.Wr)
        dz = np.zeros_like(probs)
        for t, pairs in enumerate(plan.assignments):
            if not pairs:
                continue
            experts = np.array([e for e, _ in pairs])
            sel = np.isin(plan.token_idx, [t]) & np.isin(plan.expert_idx, experts)
            grad = dS[sel]  # ascending expert order, same as ``experts``
            if plan.normalization == "full_softmax":
                p = probs[t]
                jac = np.diag(p) - np.outer(p, p)
                full = np.zeros(plan.E)
                full[experts] = grad
                dz[t] = jac @ full
            else:
                q = probs[t, experts] / probs[t, experts].sum()
                jac = np.diag(q) - np.outer(q, q)
                dz[t, experts] = jac @ grad
        dWr = X.T @ dz
        dX += dz @ weights.Wr.T
    if trace is not None:
        trace.update(dH=dH, Y=Y)
    return GradientSet(dX, dWr, dW1, dW2, dS)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grads(loss: Callable[[dict], float], point: dict, step: float = 1e-5) -> dict:
    """Central differences of ``loss`` w.r.t. every coordinate of every array in ``point``."""
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in point.items()}
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss(params)
            flat[i] = orig - step
            lo = loss(params)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads[name] = g
    return grads


Router = Callable[[np.ndarray], RoutingPlan]


def moe_loss(route: Router, normalization: str = "full_softmax", m_tile: int = 128):
    """Scalar ``0.5 * ||O||^2`` as a function of {X, Wr, W1, W2}, re-routing on every call."""

    def loss(p: dict) -> float:
        scores = router_scores(p["X"], p["Wr"], normalization)
        plan = route(scores.probs)
        O, _ = forward(p["X"], ExpertWeights(p["Wr"], p["W1"], p["W2"]), plan, m_tile=m_tile)
        return 0.5 * float(np.sum(O * O))

    return loss


def analytic_grads(X, weights: ExpertWeights, route: Router, normalization: str = "full_softmax",
                   m_tile: int = 128) -> tuple[RoutingPlan, GradientSet]:
    """Route, run forward, and backpropagate the ``0.5 * ||O||^2`` loss (so dO = O)."""
    plan = route(router_scores(X, weights.Wr, normalization).probs)
    O, cache = forward(X, weights, plan, m_tile=m_tile)
    return plan, backward(O, cache, weights, m_tile=m_tile)


def mlp_forward(X, W1, W2) -> np.ndarray:
    """Dense SwiGLU MLP, the E = K = 1 limit of the layer."""
    return swiglu(np.asarray(X) @ W1) @ W2
