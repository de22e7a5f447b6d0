"""Command line: decompose, share, run-party, simulate, bench, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import container
from .dealer import account
from .engine import MODES, PROTOCOLS, PlanError, Policy, build_plan, schedule, simulate
from .engine.runtime import RunError, deal, load_bundle, pack_share, run_party, save_bundle, session_id, unpack_share
from .engine.schedule import CostModel, calibrate
from .model import DimensionError, Model, builtin_model, decompose_model, load_model, save_model
from .net import PRESETS, EndpointConfig, NetworkProfile, TransportError, causal_rounds, connect_socket, local_endpoint_configs
from .protocols import FractionStateError
from .ring import FixedPointConfig, decode_fixed
from .sharing import InsecureOperationError, reconstruct

log = logging.getLogger("lrmpc")

EXIT_OK, EXIT_VALIDATION, EXIT_TRANSPORT, EXIT_INSECURE = 0, 2, 3, 4
NETWORKS = ("lan", "man", "wan")


class UsageError(ValueError):
    pass


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2)
    if path is None or str(path) == "-":
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _load_model_arg(args) -> tuple[Model, np.ndarray | None]:
    if getattr(args, "builtin", None):
        model, x = builtin_model(args.builtin)
    elif getattr(args, "model", None):
        model, x = load_model(args.model), None
    else:
        raise UsageError("give --model PATH or --builtin NAME")
    if getattr(args, "input", None):
        x = np.load(args.input)
    return model, x


def _policy(args) -> Policy:
    return Policy.load(args.policy) if getattr(args, "policy", None) else Policy()


def _cfg(args) -> FixedPointConfig:
    return FixedPointConfig(args.l, args.f)


def _profile(name: str) -> NetworkProfile:
    if name in PRESETS:
        return PRESETS[name]
    # a JSON file with name, latency_ms, bandwidth_bps
    with open(name) as fh:
        return NetworkProfile.from_json(json.load(fh))


def _cost(args) -> CostModel:
    if getattr(args, "calibrate", False):
        cost = calibrate()
        log.info("calibrated %.3f ns/MAC", cost.ns_per_mac)
        return cost
    if getattr(args, "ns_per_mac", None) is not None:
        return CostModel(args.ns_per_mac)
    return CostModel()


# ---------------------------------------------------------------------------
# subcommands


def cmd_decompose(args) -> int:
    model = load_model(args.inp)
    if not model.has_weights:
        raise UsageError(f"{args.inp} has no weights to factorize")
    layers = [int(i) for i in args.layers.split(",")] if args.layers else None
    lr, records = decompose_model(model, args.fc_ratio, args.conv_ratio, layers)
    save_model(lr, args.out)
    report = {"fc_ratio": args.fc_ratio, "conv_ratio": args.conv_ratio, "layers": [r.to_json() for r in records]}
    _write_json(args.report or str(args.out) + ".json", report)
    return EXIT_OK


def _shape_only(model: Model) -> Model:
    """Model metadata a party may see: layer kinds and dims, no weights."""
    _, meta = model.to_tensors()
    return Model.from_tensors({}, meta)


def cmd_share(args) -> int:
    model, x = _load_model_arg(args)
    if x is None:
        raise UsageError("no input: give --input X.npy")
    plan = build_plan(model, args.protocol, args.mode, _policy(args), args.n, _cfg(args))
    if any(s.op == "relu" for s in plan.steps) and not args.allow_insecure:
        raise InsecureOperationError("plan contains the debug ReLU, which opens activations; pass --allow-insecure")
    bundles, master = deal(plan, x, args.seed, args.allow_insecure)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, model_meta = _shape_only(plan.model).to_tensors()
    run_meta = {
        "protocol": plan.protocol,
        "n": plan.parties,
        "mode": plan.mode,
        "l": plan.cfg.l,
        "f": plan.cfg.f,
        "session": session_id(master),
        "allow_insecure": bool(args.allow_insecure),
        "input_bound": plan.input_bound,
        "model": model_meta,
    }
    for b in bundles:
        save_bundle(out / f"party{b.party}.lrmt", b, run_meta)
    if not (out / "endpoints.json").exists() or args.fresh_endpoints:
        _write_json(out / "endpoints.json", [c.to_json() for c in local_endpoint_configs(plan.parties)])
    if args.summary:
        _write_json(args.summary, {"parties": plan.parties, "session": run_meta["session"], "dir": str(out)})
    return EXIT_OK


def _plan_from_meta(meta: dict):
    model = Model.from_tensors({}, meta["model"])
    skip = {i: l.skip_trunc for i, l in enumerate(model.layers) if l.kind.startswith("lowrank")}
    policy = Policy(layers=(), skip_trunc=skip, input_bound=meta["input_bound"])
    return build_plan(model, meta["protocol"], meta["mode"], policy, meta["n"], FixedPointConfig(meta["l"], meta["f"]))


def cmd_run_party(args) -> int:
    bundle, meta = load_bundle(args.share)
    plan = _plan_from_meta(meta)
    with open(args.endpoints) as fh:
        configs = {c["party"]: EndpointConfig.from_json(c) for c in json.load(fh)}
    if bundle.party not in configs:
        raise UsageError(f"no endpoint for P{bundle.party} in {args.endpoints}")
    allow = meta["allow_insecure"] and args.allow_insecure
    topology = "trio" if plan.protocol == "trio" else "full"
    ep = connect_socket(configs[bundle.party], plan.parties, topology, args.timeout)
    try:
        share, ctx = run_party(plan, bundle, ep, meta["session"], allow)
    finally:
        ep.close()
    tensors: dict = {}
    layout = pack_share("y", share, tensors) if share is not None else None
    container.save(args.out, tensors, {"type": "output", "party": bundle.party, "layout": layout, "l": plan.cfg.l, "f": plan.cfg.f})
    metrics = {
        "party": ctx.party,
        "rounds": ctx.rounds,
        "messages": ctx.messages,
        "bytes": {f"P{s}->P{d}": v for (s, d), v in sorted(ctx.payload_bytes.items())},
        "insecure_ops": sorted(set(ctx.insecure_ops)),
        "trace": [list(t) for t in ctx.trace],
    }
    _write_json(args.metrics, metrics)
    return EXIT_OK


def cmd_simulate(args) -> int:
    model, _ = _load_model_arg(args)
    plan = build_plan(model, args.protocol, args.mode, _policy(args), args.n, _cfg(args))
    program = schedule(plan)
    cost = _cost(args)
    tl = simulate(program, _profile(args.network), cost)
    out = tl.to_json(gantt=not args.no_gantt)
    out["ns_per_mac"] = cost.ns_per_mac
    out["network"] = args.network
    _write_json(args.out, out)
    return EXIT_OK


def speedup(t_base: float, t_ours: float) -> float:
    """Relative speedup T_base / T_ours - 1 (multiply by 100 for percent)."""
    return t_base / t_ours - 1.0


def _offline_row(plan) -> dict:
    rep = account(plan)
    return {
        "triple_elements": rep.triple_elements,
        "trunc_mask_elements": rep.trunc_mask_elements,
        "trio_prep_elements": rep.trio_prep_elements,
        "offline_elements": rep.triple_elements + rep.trunc_mask_elements + rep.trio_prep_elements,
        "dealer_bytes": sum(rep.dealer_bytes.values()),
    }


def bench_rows(model: Model, n: int = 3, policy: Policy | None = None, cost: CostModel | None = None, networks=NETWORKS, offline_only: bool = False, cfg=None) -> list[dict]:
    """One row per mode x protocol x network; speedup is against FullRank on the same protocol and network."""
    cost = cost or CostModel()
    cfg = cfg or FixedPointConfig()
    rows = []
    for protocol in PROTOCOLS:
        plans = {mode: build_plan(model, protocol, mode, policy, n, cfg) for mode in MODES}
        programs = {} if offline_only else {mode: schedule(p) for mode, p in plans.items()}
        for net in networks:
            times = {} if offline_only else {mode: simulate(pr, _profile(net), cost) for mode, pr in programs.items()}
            for mode in MODES:
                plan = plans[mode]
                row = {"protocol": protocol, "n": plan.parties, "mode": mode, "network": net, **_offline_row(plan)}
                row["insecure"] = any(s.op == "relu" for s in plan.steps)
                if not offline_only:
                    tl = times[mode]
                    row["critical_path_ms"] = tl.critical_path_ms
                    row["rounds"] = tl.rounds
                    row["online_bytes"] = sum(tl.bytes.values())
                    row["speedup"] = speedup(times["FullRank"].critical_path_ms, tl.critical_path_ms)
                rows.append(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def cmd_bench(args) -> int:
    model, _ = _load_model_arg(args)
    cost = _cost(args)
    rows = bench_rows(model, args.n, _policy(args), cost, offline_only=args.offline_only, cfg=_cfg(args))
    flagged = sorted({r["protocol"] for r in rows if r["insecure"]})
    out = {"ns_per_mac": cost.ns_per_mac, "rows": rows, "insecure_plans": flagged}
    _write_json(args.out, out)
    if args.csv:
        Path(args.csv).write_text(rows_to_csv(rows))
    return EXIT_OK


def cmd_report(args) -> int:
    if args.bench:
        with open(args.bench) as fh:
            rows = json.load(fh)["rows"]
        text = rows_to_csv(rows)
        if args.csv:
            Path(args.csv).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    if not args.outputs:
        raise UsageError("give --bench FILE or --outputs FILE...")
    result: dict = {}
    if args.metrics:
        traces, byts = {}, {}
        for path in args.metrics:
            with open(path) as fh:
                m = json.load(fh)
            traces[m["party"]] = [tuple(t) for t in m["trace"]]
            byts.update(m["bytes"])
        result["rounds"] = causal_rounds(traces)
        result["bytes"] = dict(sorted(byts.items()))
    shares, cfg = [], None
    for path in args.outputs:
        tensors, meta = container.load(path)
        if meta.get("type") != "output":
            raise container.ContainerError(f"{path} is not an output share file")
        cfg = FixedPointConfig(meta["l"], meta["f"])
        if meta["layout"] is not None:
            shares.append(unpack_share("y", meta["layout"], tensors))
    if shares and shares[0].scheme == "trio":
        shares = [s for s in shares if s.owner in (2, 3)]
    y = decode_fixed(reconstruct(shares), cfg)
    result.update({"shape": list(y.shape), "output": y.tolist()})
    _write_json(args.out, result)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_model_args(p, require_input=False):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--model", help="LRMT model container")
    g.add_argument("--builtin", choices=("gcn", "fc4"), help="named demo model")
    p.add_argument("--input", help=".npy input matrix" + (" (required unless the builtin has one)" if require_input else ""))
    p.add_argument("--policy", help="JSON layer policy (layers, ratios, skip_trunc, input_bound)")


def _add_plan_args(p):
    p.add_argument("--protocol", choices=PROTOCOLS, default="npc")
    p.add_argument("--n", type=int, default=3, help="party count for npc (trio is always 3)")
    p.add_argument("--mode", choices=MODES, default="LR+TS")
    p.add_argument("--l", type=int, default=64)
    p.add_argument("--f", type=int, default=5)


def _add_cost_args(p):
    p.add_argument("--calibrate", action="store_true", help="measure ns/MAC on this machine first")
    p.add_argument("--ns-per-mac", type=float, help="override the compute cost constant")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lrmpc", description="Low-rank secret-shared inference engine")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="factorize FC/conv weights into rank-r pairs")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fc-ratio", type=float, default=0.25)
    p.add_argument("--conv-ratio", type=float, default=0.5)
    p.add_argument("--layers", help="comma-separated layer indices (default: every FC/conv)")
    p.add_argument("--report", help="JSON error report (default: OUT.json)")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("share", help="secret-share weights and input and deal offline material")
    _add_model_args(p, require_input=True)
    _add_plan_args(p)
    p.add_argument("--seed", type=int, help="master seed (default: LRMPC_SEED, else random)")
    p.add_argument("--out", required=True, help="directory for partyN.lrmt and endpoints.json")
    p.add_argument("--fresh-endpoints", action="store_true", help="rewrite endpoints.json with new local ports")
    p.add_argument("--allow-insecure", action="store_true")
    p.add_argument("--summary", help="write a small JSON summary here")
    p.set_defaults(func=cmd_share)

    p = sub.add_parser("run-party", help="run one party's online phase over TCP")
    p.add_argument("--share", required=True, help="partyN.lrmt written by share")
    p.add_argument("--endpoints", required=True, help="JSON list of endpoint configs")
    p.add_argument("--out", required=True, help="output share file")
    p.add_argument("--metrics", default="-", help="metrics JSON (default stdout)")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--allow-insecure", action="store_true")
    p.set_defaults(func=cmd_run_party)

    p = sub.add_parser("simulate", help="event-graph timeline under a network profile")
    _add_model_args(p)
    _add_plan_args(p)
    _add_cost_args(p)
    p.add_argument("--network", default="wan", help="lan, man, wan, ideal or a profile JSON")
    p.add_argument("--no-gantt", action="store_true")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="modes x protocols x networks table")
    _add_model_args(p)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--l", type=int, default=64)
    p.add_argument("--f", type=int, default=5)
    _add_cost_args(p)
    p.add_argument("--offline-only", action="store_true", help="only the offline material columns")
    p.add_argument("--out", default="-")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="CSV from a bench JSON, or decode output shares")
    p.add_argument("--bench")
    p.add_argument("--csv")
    p.add_argument("--outputs", nargs="+", help="output share files from run-party")
    p.add_argument("--metrics", nargs="+", help="run-party metrics files; adds the causal round count")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_report)
    return ap


def _exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, RunError) else exc
    if isinstance(cause, InsecureOperationError):
        return EXIT_INSECURE
    if isinstance(cause, (TransportError, ConnectionError, TimeoutError)):
        return EXIT_TRANSPORT
    return EXIT_VALIDATION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (RunError, InsecureOperationError, TransportError, PlanError, FractionStateError, DimensionError, container.ContainerError, UsageError, ValueError, KeyError, OSError) as exc:
        print(f"lrmpc {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
