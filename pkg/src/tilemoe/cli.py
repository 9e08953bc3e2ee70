"""Command line entry point: ``tilemoe cost | route | gradcheck | simulate``.

Exit codes: 0 success, 1 a check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .core import ExpertWeights, MoEConfig, seeded_rng
from .cost_models import (MINIMAL_POLICY, PRESETS, activation_bytes, model_flops, sweep)
from .grouped_gemm import tile_stats
from .moe_engine import (analytic_grads, backward, backward_reference, finite_diff_grads,
                         forward, forward_reference, moe_loss)
from .router import (Rounding, RoundingSubroutine, ec_route, load_balance_loss, router_scores,
                     tc_route, token_round)

CONFIG_KEYS = ("T", "d", "n", "E", "K", "M_tile", "element_bytes")
DEFAULT_CONFIG = dict(T=1024, d=64, n=32, E=16, K=2, M_tile=32, element_bytes=2)
SIM_GUARD = 10**8
COST_COLUMNS = ("T", "d", "n", "E", "K", "M_tile", "G", "rho", "flops", "io_bytes_fwd",
                "arith_intensity", "act_bytes_minimal", "act_bytes_with_Y",
                "expected_wasted_flops", "seed")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunManifest:
    config: MoEConfig
    seed: int
    command: str
    output_path: str | None = None

    def as_dict(self) -> dict:
        return {"command": self.command, "seed": self.seed, "config": asdict(self.config)}


def parse_config_text(text: str) -> dict[str, int]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in CONFIG_KEYS:
            raise UsageError(f"config line {lineno}: expected one of {CONFIG_KEYS} = <int>")
        try:
            out[key] = int(value.strip())
        except ValueError:
            raise UsageError(f"config line {lineno}: {key} is not an integer") from None
    return out


def load_config(args) -> MoEConfig:
    values = dict(DEFAULT_CONFIG)
    if args.config:
        try:
            with open(args.config) as fh:
                values.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    try:
        return MoEConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def parse_grid(spec: str, base: MoEConfig) -> list[MoEConfig]:
    """``"E=32,64;K=2,4"`` -> cartesian product over ``base``; an empty spec yields no rows."""
    spec = spec.strip()
    if not spec:
        return []
    axes = []
    for part in spec.split(";"):
        key, sep, vals = part.partition("=")
        key = key.strip()
        if not sep or key not in CONFIG_KEYS:
            raise UsageError(f"bad grid axis {part!r}")
        try:
            axes.append((key, [int(v) for v in vals.split(",") if v.strip()]))
        except ValueError:
            raise UsageError(f"bad grid values in {part!r}") from None
    rows = []
    for combo in itertools.product(*(v for _, v in axes)):
        try:
            rows.append(base.replace(**dict(zip((k for k, _ in axes), combo))))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return rows


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _problem(cfg: MoEConfig, seed: int) -> tuple[np.ndarray, ExpertWeights]:
    X = seeded_rng(seed, "inputs").generator(0).standard_normal((cfg.T, cfg.d))
    return X, ExpertWeights.random(cfg, seed)


def _route(method: str, rounding: str | None, probs, cfg: MoEConfig, seed: int,
           normalization: str, capacity: int | None = None):
    if method == "tc":
        return tc_route(probs, cfg.K, normalization)
    if method == "ec":
        cap = cfg.T * cfg.K // cfg.E if capacity is None else capacity
        return ec_route(probs, cap, normalization)
    return token_round(probs, cfg.K, cfg.M_tile, RoundingSubroutine(Rounding(rounding), seed),
                       normalization)


def _check_method(args) -> None:
    if args.method == "tr" and args.round is None:
        raise UsageError("--method tr requires --round")
    if args.method != "tr" and args.round is not None:
        raise UsageError("--round only applies to --method tr")


# ---------------------------------------------------------------------------
# commands


def cmd_cost(args) -> int:
    base = load_config(args)
    if args.sweep is None:
        configs = [base]
    elif args.sweep in PRESETS:
        configs = PRESETS[args.sweep]
    else:
        configs = parse_grid(args.sweep, base)
    reports = sweep(configs, trials=args.trials, seed=args.seed, workers=args.threads)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COST_COLUMNS)
    for r in reports:
        c = r.cfg
        w.writerow([c.T, c.d, c.n, c.E, c.K, c.M_tile, repr(float(c.G)), repr(float(c.rho)),
                    r.flops_model, repr(r.io_bytes_forward), repr(r.arithmetic_intensity),
                    r.activation_bytes, r.activation_bytes_with_y, repr(float(r.wasted_flops)),
                    args.seed])
    _emit(buf.getvalue(), args.out)
    return 0


def cmd_route(args) -> int:
    _check_method(args)
    cfg = load_config(args)
    X, weights = _problem(cfg, args.seed)
    probs = router_scores(X, weights.Wr, args.normalization).probs
    tc = tc_route(probs, cfg.K, args.normalization)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        plan = _route(args.method, args.round, probs, cfg, args.seed, args.normalization,
                      args.capacity)
    f_tc = tc.frequencies
    f = plan.frequencies
    stats = tile_stats(f, cfg.M_tile, cfg.n, cfg.d)
    kept, dropped, padded = [], [], []
    for tc_set, new in zip(tc.expert_tokens, plan.expert_tokens):
        a, b = set(tc_set.tolist()), set(new.tolist())
        kept.append(len(a & b))
        dropped.append(len(a - b))
        padded.append(len(b - a))
    report = RunManifest(cfg, args.seed, "route", args.out).as_dict()
    report.update(
        method=args.method,
        round=args.round,
        normalization=args.normalization,
        f=f_tc.tolist(),
        f_rounded=f.tolist(),
        padded_rows=stats.padded_rows.tolist(),
        tiles=stats.tiles.tolist(),
        kept_tokens=kept,
        dropped_tokens=dropped,
        padded_tokens=padded,
        totals={"f": int(f_tc.sum()), "f_rounded": int(f.sum()),
                "deviation": int(f.sum() - f_tc.sum()),
                "kept": sum(kept), "dropped": sum(dropped), "padded": sum(padded)},
        wasted_flops_total=stats.wasted_flops_total,
        load_balance_loss=load_balance_loss(plan, probs),
        warnings=[str(w.message) for w in caught],
    )
    _emit(_json(report), args.out)
    return 0


def _gradcheck_case(i: int, seed: int) -> tuple[MoEConfig, str, str]:
    gen = seeded_rng(seed, "gradcheck").generator(i)
    E = int(gen.integers(1, 9))
    cfg = MoEConfig(T=int(gen.integers(2, 17)), d=int(gen.integers(2, 7)), n=int(gen.integers(1, 5)),
                    E=E, K=int(gen.integers(1, min(E, 4) + 1)), M_tile=int(gen.choice([1, 2, 4, 8])))
    method = ("tc", "tc", "tr", "ec")[i % 4]
    normalization = ("full_softmax", "topk_softmax")[(i // 2) % 2]
    return cfg, method, normalization


def field_rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """max |a - n| / max |n|; absolute error when the field magnitude is below ``floor``."""
    err = float(np.max(np.abs(analytic - numeric))) if np.size(numeric) else 0.0
    scale = float(np.max(np.abs(numeric))) if np.size(numeric) else 0.0
    return err if scale < floor else err / scale


def gradcheck_passes(err: float, scale: float) -> bool:
    return err <= (1e-10 if scale < 1e-8 else 1e-6)


def run_gradcheck(trials: int, seed: int, out=None) -> bool:
    out = out or sys.stdout
    ok = True
    worst = {k: 0.0 for k in ("dX", "dWr", "dW1", "dW2")}
    dual = 0.0
    for i in range(trials):
        cfg, method, norm = _gradcheck_case(i, seed)
        X, w = _problem(cfg, seed + i)
        route = lambda p, cfg=cfg, method=method, norm=norm: _route(
            method, "nr-f" if method == "tr" else None, p, cfg, seed, norm)
        plan, grads = analytic_grads(X, w, route, norm, cfg.M_tile)
        O, _ = forward(X, w, plan, m_tile=cfg.M_tile)
        ref = backward_reference(O, X, w, plan)
        for name in ("dX", "dWr", "dW1", "dW2", "dS"):
            diff = getattr(grads, name) - getattr(ref, name)
            dual = max(dual, float(np.max(np.abs(diff))) if diff.size else 0.0)
        numeric = finite_diff_grads(moe_loss(route, norm, cfg.M_tile),
                                    dict(X=X, Wr=w.Wr, W1=w.W1, W2=w.W2), 1e-5)
        for name, key in (("dX", "X"), ("dWr", "Wr"), ("dW1", "W1"), ("dW2", "W2")):
            a, n = getattr(grads, name), numeric[key]
            err = field_rel_error(a, n)
            scale = float(np.max(np.abs(n))) if n.size else 0.0
            worst[name] = max(worst[name], err)
            if not gradcheck_passes(err, scale):
                ok = False
                print(f"FAIL trial {i} {method}/{norm} {cfg}: {name} rel err {err:.3e}", file=out)
    dual_ok = dual <= 1e-12
    ok = ok and dual_ok
    # smoke: zero upstream gradient gives zero gradients everywhere
    cfg, _, _ = _gradcheck_case(0, seed)
    X, w = _problem(cfg, seed)
    plan = tc_route(router_scores(X, w.Wr).probs, cfg.K)
    _, cache = forward(X, w, plan, m_tile=cfg.M_tile)
    zero = backward(np.zeros_like(X), cache, w, m_tile=cfg.M_tile)
    zero_ok = all(not np.any(v) for v in zero.as_dict().values())
    ok = ok and zero_ok
    for name, err in worst.items():
        print(f"{name}: max rel err vs finite differences {err:.3e}", file=out)
    print(f"dual path: max abs diff {dual:.3e} ({'ok' if dual_ok else 'FAIL'})", file=out)
    print(f"zero dO smoke: {'all-zero gradients' if zero_ok else 'FAIL nonzero gradients'}", file=out)
    print(f"gradcheck {'PASS' if ok else 'FAIL'} ({trials} trials, seed {seed})", file=out)
    return ok


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    return 0 if run_gradcheck(args.trials, args.seed) else 1


def cmd_simulate(args) -> int:
    _check_method(args)
    cfg = load_config(args)
    if cfg.T * cfg.K * cfg.n > SIM_GUARD:
        raise UsageError(f"T*K*n = {cfg.T * cfg.K * cfg.n} exceeds the {SIM_GUARD} element guard")
    X, weights = _problem(cfg, args.seed)
    probs = router_scores(X, weights.Wr, args.normalization).probs
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        plan = _route(args.method, args.round, probs, cfg, args.seed, args.normalization,
                      args.capacity)
    O, cache = forward(X, weights, plan, m_tile=cfg.M_tile, workers=args.threads)
    grads = backward(O, cache, weights, m_tile=cfg.M_tile, workers=args.threads)
    f = plan.frequencies
    stats = tile_stats(f, cfg.M_tile, cfg.n, cfg.d)
    report = RunManifest(cfg, args.seed, "simulate", args.out).as_dict()
    report.update(
        method=args.method,
        round=args.round,
        normalization=args.normalization,
        frequencies=f.tolist(),
        tiles=int(stats.tiles.sum()),
        padded_rows=int(stats.padded_rows.sum()),
        model_flops=18 * cfg.n * cfg.d * int(f.sum()),
        model_flops_token_choice=model_flops(cfg),
        wasted_flops_fwd=stats.wasted_flops_fwd,
        wasted_flops_total=stats.wasted_flops_total,
        activation_bytes=cache.nbytes(cfg.element_bytes),
        activation_bytes_model=activation_bytes(cfg, MINIMAL_POLICY),
        load_balance_loss=load_balance_loss(plan, probs),
        loss=0.5 * float(np.sum(O * O)),
        grad_norms={k: float(np.linalg.norm(v)) for k, v in grads.as_dict().items()},
        warnings=[str(w.message) for w in caught],
    )
    checks = {}
    if plan.num_assignments <= args.oracle_limit:
        ref_O = forward_reference(X, weights, plan)
        scale = max(float(np.max(np.abs(ref_O))), 1e-300)
        checks["forward_matches_reference"] = bool(np.max(np.abs(O - ref_O)) / scale <= 1e-13)
        ref = backward_reference(O, X, weights, plan)
        checks["backward_matches_reference"] = all(
            bool(np.max(np.abs(getattr(grads, k) - getattr(ref, k)), initial=0.0) <= 1e-12)
            for k in grads.FIELDS)
    else:
        checks["forward_matches_reference"] = None
        checks["backward_matches_reference"] = None
    checks["zero_padding_waste"] = stats.wasted_flops_total == 0
    report["checks"] = checks
    _emit(_json(report), args.out)
    return 1 if any(v is False for k, v in checks.items() if k != "zero_padding_waste") else 0


# ---------------------------------------------------------------------------


def _default_seed() -> int:
    raw = os.environ.get("SONIC_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tilemoe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=_default_seed(),
                        help="run seed (default: $SONIC_SEED or 0)")
        sp.add_argument("--out", help="write to this path instead of stdout")
        if config:
            sp.add_argument("--config", help="flat key = value config file")
            for key in CONFIG_KEYS:
                sp.add_argument(f"--{key}", type=int, default=None)

    def routing(sp):
        sp.add_argument("--method", choices=("tc", "ec", "tr"), default="tc")
        sp.add_argument("--round", choices=[r.value for r in Rounding], default=None)
        sp.add_argument("--normalization", choices=("full_softmax", "topk_softmax"),
                        default="full_softmax")
        sp.add_argument("--capacity", type=int, default=None,
                        help="expert-choice capacity (default T*K//E)")

    sp = sub.add_parser("cost", help="analytic cost table as CSV")
    common(sp)
    sp.add_argument("--sweep", default=None,
                    help=f"preset ({', '.join(PRESETS)}) or grid like 'E=32,64;K=2,4'")
    sp.add_argument("--trials", type=int, default=100, help="Monte-Carlo trials for padding waste")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("route", help="routing statistics as JSON")
    common(sp)
    routing(sp)
    sp.set_defaults(func=cmd_route)

    sp = sub.add_parser("gradcheck", help="dual-path and finite-difference gradient checks")
    common(sp, config=False)
    sp.add_argument("--trials", type=int, default=20)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("simulate", help="route, forward and backward one layer; JSON report")
    common(sp)
    routing(sp)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--oracle-limit", type=int, default=20000,
                    help="skip reference checks above this many assignments")
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tilemoe {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
