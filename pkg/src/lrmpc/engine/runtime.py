"""Offline material distribution and live party execution over in-process or socket transports."""

from __future__ import annotations

import hashlib
import logging
import os
import threading
from dataclasses import dataclass, field

import numpy as np

from .. import protocols as P
from ..dealer import gen_beaver, gen_beaver_elementwise, gen_trio_prep, gen_trunc_mask
from ..net import (
    PartyContext,
    TransportError,
    causal_rounds,
    connect_inproc,
    connect_socket,
    local_endpoint_configs,
)
from .. import container
from ..ring import decode_fixed, encode_fixed, im2col
from ..sharing import AdditiveShare, SeedSet, TrioShare, reconstruct, share_additive, share_trio
from .plan import ExecutionPlan, PlanError

log = logging.getLogger(__name__)

SEED_ENV = "LRMPC_SEED"


class RunError(RuntimeError):
    """A party aborted; carries the party and the layer it was executing."""

    def __init__(self, party: int, layer: int, cause: BaseException):
        super().__init__(f"P{party} aborted in layer {layer}: {type(cause).__name__}: {cause}")
        self.party = party
        self.layer = layer
        self.cause = cause


def master_seed(seed: int | bytes | None = None) -> bytes:
    """Explicit seed, else LRMPC_SEED, else fresh OS randomness."""
    if seed is None:
        env = os.environ.get(SEED_ENV)
        seed = int(env) if env is not None else os.urandom(32)
    if isinstance(seed, int):
        seed = seed.to_bytes(32, "little")
    return seed


def session_id(master: bytes) -> int:
    return int.from_bytes(hashlib.sha256(master + b"/session").digest()[:4], "little")


def _owner_seed(master: bytes) -> bytes:
    return hashlib.sha256(master + b"/owner").digest()


@dataclass
class PartyBundle:
    """Everything one party holds before the online phase."""

    party: int
    scheme: str
    x: object | None = None
    weights: dict = field(default_factory=dict)
    public: dict = field(default_factory=dict)
    material: dict = field(default_factory=dict)
    seeds: SeedSet | None = None


def pack_share(key: str, obj, tensors: dict) -> dict:
    """Flatten a share, a tuple of shares or a raw ring array into tensors; returns its layout."""
    if isinstance(obj, AdditiveShare):
        tensors[key] = obj.value
        return {"t": "add", "owner": obj.owner, "frac": obj.frac, "l": obj.l}
    if isinstance(obj, TrioShare):
        tensors[key + "/a"], tensors[key + "/b"] = obj.a, obj.b
        return {"t": "trio", "owner": obj.owner, "frac": obj.frac, "l": obj.l}
    if isinstance(obj, tuple):
        return {"t": "tuple", "items": [pack_share(f"{key}/{i}", o, tensors) for i, o in enumerate(obj)]}
    if isinstance(obj, np.ndarray):
        tensors[key] = obj
        return {"t": "array"}
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def unpack_share(key: str, layout: dict, tensors: dict):
    t = layout["t"]
    if t == "add":
        return AdditiveShare(layout["owner"], tensors[key], layout["frac"], layout["l"])
    if t == "trio":
        return TrioShare(layout["owner"], tensors[key + "/a"], tensors[key + "/b"], layout["frac"], layout["l"])
    if t == "tuple":
        return tuple(unpack_share(f"{key}/{i}", item, tensors) for i, item in enumerate(layout["items"]))
    if t == "array":
        return tensors[key]
    raise container.ContainerError(f"unknown layout tag {t!r}")


def save_bundle(path, bundle: PartyBundle, run_meta: dict) -> None:
    """One party's file: input share, weight shares, public weights, offline material, pairwise seeds."""
    tensors: dict = {}
    layout = {"x": pack_share("x", bundle.x, tensors)}
    for group in ("weights", "public", "material"):
        layout[group] = {k: pack_share(f"{group}/{k}", v, tensors) for k, v in getattr(bundle, group).items()}
    seeds = None
    if bundle.seeds is not None:
        seeds = [[a, b, v.hex()] for (a, b), v in sorted(bundle.seeds.pairs.items())]
    meta = {"type": "party", "party": bundle.party, "scheme": bundle.scheme, "layout": layout, "seeds": seeds, "run": run_meta}
    container.save(path, tensors, meta)


def load_bundle(path) -> tuple[PartyBundle, dict]:
    tensors, meta = container.load(path)
    if meta.get("type") != "party":
        raise container.ContainerError(f"{path} is not a party share file")
    layout = meta["layout"]
    groups = {g: {k: unpack_share(f"{g}/{k}", v, tensors) for k, v in layout[g].items()} for g in ("weights", "public", "material")}
    seeds = None
    if meta["seeds"] is not None:
        seeds = SeedSet({(a, b): bytes.fromhex(v) for a, b, v in meta["seeds"]}, b"")
    bundle = PartyBundle(meta["party"], meta["scheme"], unpack_share("x", layout["x"], tensors), seeds=seeds, **groups)
    return bundle, meta["run"]


# ---------------------------------------------------------------------------
# one party's online program


def execute(plan: ExecutionPlan, ctx: PartyContext, bundle: PartyBundle, prep_sink: dict | None = None):
    """Run every step of the plan on this party's share.

    With ``prep_sink`` set (Trio P1 only) the Trio corrections M and N are
    derived from P1's masks as it walks the plan, which is the offline phase.
    """
    cfg = plan.cfg
    xs = bundle.x
    early: dict[str, AdditiveShare] = {}
    additive = bundle.scheme == "additive"
    if additive and plan.concat:
        # Urev = Y - B depends only on static weights and offline material
        for s in plan.steps:
            if s.op == "matmul":
                _, b, _ = bundle.material[s.slot]
                early[s.slot] = P.npc_urev_send(bundle.weights[s.weight], b, ctx, s.layer)

    for s in plan.steps:
        ctx.layer = s.layer
        if s.op == "im2col":
            k, st, pad = s.params["k"], s.params["stride"], s.params["pad"]
            xs = xs.apply(lambda v: im2col(v, k, st, pad))
        elif s.op == "reshape":
            shape = s.out_shape
            xs = xs.apply(lambda v: v.reshape(shape))
        elif s.op == "matmul":
            ys = bundle.weights[s.weight]
            if additive:
                xs = P.npc_matmul(xs, ys, bundle.material[s.slot], ctx, s.slot, early.get(s.slot))
            else:
                if prep_sink is not None:
                    _sink_prep(prep_sink, xs, ys, ctx, s.slot, s.out_shape, "matmul")
                xs = P.trio_matmul(xs, ys, bundle.material.get(s.slot), ctx, s.slot)
        elif s.op == "mul":
            if additive:
                xs = P.npc_product(xs, xs, bundle.material[s.slot], ctx, s.slot, "mul")
            else:
                if prep_sink is not None:
                    _sink_prep(prep_sink, xs, xs, ctx, s.slot, s.out_shape, "mul")
                xs = P.trio_product(xs, xs, bundle.material.get(s.slot), ctx, s.slot, "mul")
        elif s.op == "trunc":
            xs = P.trunc(xs, s.d, bundle.material.get(s.slot), ctx, s.slot)
        elif s.op == "public_left":
            xs = xs.left_matmul(bundle.public[s.weight]).with_frac(xs.frac + cfg.f)
        elif s.op == "relu":
            xs = P.debug_relu(xs, ctx)
        else:
            raise PlanError(f"unknown step {s.op}")
    return xs


def _sink_prep(sink, xs, ys, ctx, slot, shape, op):
    lz2, lz3 = P.trio_output_masks(ctx, slot, shape)
    sink[slot] = gen_trio_prep(xs.a, xs.b, ys.a, ys.b, lz2, lz3, op, ctx.cfg.l)


# ---------------------------------------------------------------------------
# offline phase


def deal(plan: ExecutionPlan, x: np.ndarray, seed=None, allow_insecure: bool = False) -> tuple[list[PartyBundle], bytes]:
    """Encode and share weights and input, and produce each party's offline material."""
    if not plan.executable:
        raise PlanError("plan was built from a shape-only model and cannot be executed")
    cfg = plan.cfg
    f, l = cfg.f, cfg.l
    master = master_seed(seed)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != plan.input_shape:
        raise PlanError(f"input shape {x.shape} does not match plan input {plan.input_shape}")
    if plan.range_checked and np.abs(x).max(initial=0.0) > plan.input_bound:
        raise PlanError(f"input magnitude {np.abs(x).max():.3g} exceeds the plan's input bound {plan.input_bound}")

    shared_keys = {s.weight for s in plan.steps if s.op == "matmul"}
    public_keys = {s.weight for s in plan.steps if s.op == "public_left"}
    public = {k: encode_fixed(plan.weights[k], cfg) for k in public_keys}
    parties = plan.parties

    if plan.protocol == "npc":
        owner = _owner_seed(master)
        dealer = hashlib.sha256(master + b"/dealer").digest()
        bundles = [PartyBundle(i, "additive", public=public) for i in range(1, parties + 1)]
        for i, sh in enumerate(share_additive(encode_fixed(x, cfg), parties, owner, "x", f, l)):
            bundles[i].x = sh
        for key in sorted(shared_keys):
            for i, sh in enumerate(share_additive(encode_fixed(plan.weights[key], cfg), parties, owner, f"w/{key}", f, l)):
                bundles[i].weights[key] = sh
        for s in plan.steps:
            if s.op == "matmul":
                m, n, o = s.dims
                mat = gen_beaver(m, n, o, parties, dealer, s.slot, cfg)
            elif s.op == "mul":
                mat = gen_beaver_elementwise(s.in_shape, parties, dealer, s.slot, cfg)
            elif s.op == "trunc":
                mat = gen_trunc_mask(s.in_shape, s.d, parties, dealer, s.slot, cfg)
            else:
                continue
            for b in bundles:
                b.material[s.slot] = mat.party(b.party)
        return bundles, master

    seeds = SeedSet.derive(master, 3)
    bundles = [PartyBundle(i, "trio", public=public, seeds=seeds.view(i)) for i in (1, 2, 3)]
    for i, sh in enumerate(share_trio(encode_fixed(x, cfg), seeds, "x", f, l)):
        bundles[i].x = sh
    for key in sorted(shared_keys):
        for i, sh in enumerate(share_trio(encode_fixed(plan.weights[key], cfg), seeds, f"w/{key}", f, l)):
            bundles[i].weights[key] = sh
    # P1 walks the plan on its masks alone and ships N to P2, M to P3
    ctx = PartyContext(1, 3, None, cfg, "trio", session_id(master), allow_insecure)
    ctx.seeds = bundles[0].seeds
    sink: dict = {}
    execute(plan, ctx, bundles[0], prep_sink=sink)
    for slot, prep in sink.items():
        bundles[1].material[slot] = prep.n
        bundles[2].material[slot] = prep.m
    return bundles, master


# ---------------------------------------------------------------------------
# metrics and live runs


@dataclass
class Metrics:
    rounds: int  # longest causal chain of receives across all parties
    party_rounds: dict  # communication steps each party took part in
    bytes: dict  # "Pi->Pj" -> payload bytes
    messages: int
    triples_consumed: int
    masks_consumed: int
    insecure_ops: list
    finish_ms: dict | None = None

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes.values())

    @property
    def insecure(self) -> bool:
        return bool(self.insecure_ops)

    def to_json(self) -> dict:
        out = {
            "rounds": self.rounds,
            "party_rounds": {str(k): v for k, v in self.party_rounds.items()},
            "bytes": dict(sorted(self.bytes.items())),
            "total_bytes": self.total_bytes,
            "messages": self.messages,
            "triples_consumed": self.triples_consumed,
            "masks_consumed": self.masks_consumed,
            "insecure": self.insecure,
            "insecure_ops": list(self.insecure_ops),
        }
        if self.finish_ms is not None:
            out["finish_ms"] = {str(k): v for k, v in self.finish_ms.items()}
        return out


def metrics_from_contexts(plan: ExecutionPlan, ctxs) -> Metrics:
    byts: dict[str, int] = {}
    for c in ctxs:
        for (src, dst), v in c.payload_bytes.items():
            byts[f"P{src}->P{dst}"] = byts.get(f"P{src}->P{dst}", 0) + v
    insecure = sorted({op for c in ctxs for op in c.insecure_ops})
    ops = [s.op for s in plan.steps]
    masks = ops.count("trunc") if plan.protocol == "npc" else 0
    return Metrics(
        causal_rounds({c.party: c.trace for c in ctxs}),
        {c.party: c.rounds for c in ctxs},
        byts,
        sum(c.messages for c in ctxs),
        ops.count("matmul") + ops.count("mul"),
        masks,
        insecure,
    )


@dataclass
class RunResult:
    shares: list
    metrics: Metrics
    cfg: object

    @property
    def output_ring(self) -> np.ndarray:
        live = [s for s in self.shares if s is not None]
        if isinstance(live[0], AdditiveShare):
            return reconstruct(live)
        return reconstruct([s for s in live if s.owner in (2, 3)])

    @property
    def output(self) -> np.ndarray:
        return decode_fixed(self.output_ring, self.cfg)


def run_party(plan: ExecutionPlan, bundle: PartyBundle, endpoint, session: int, allow_insecure: bool = False):
    """One party's full online phase on an already-connected endpoint."""
    ctx = PartyContext(bundle.party, plan.parties, endpoint, plan.cfg, bundle.scheme, session, allow_insecure)
    ctx.seeds = bundle.seeds
    try:
        out = execute(plan, ctx, bundle)
    except Exception as exc:
        raise RunError(bundle.party, ctx.layer, exc) from exc
    return out, ctx


def run(
    plan: ExecutionPlan,
    x: np.ndarray,
    transport: str = "inproc",
    seed=None,
    allow_insecure: bool = False,
    jitter_s: float = 0.0,
    timeout: float = 60.0,
) -> RunResult:
    """Deal, then execute all parties concurrently (one thread each)."""
    bundles, master = deal(plan, x, seed, allow_insecure)
    session = session_id(master)
    parties = plan.parties
    topology = "trio" if plan.protocol == "trio" else "full"
    if transport == "inproc":
        endpoints = connect_inproc(parties, topology, jitter_s)
        configs = None
    elif transport == "socket":
        endpoints = [None] * parties
        configs = local_endpoint_configs(parties)
    else:
        raise ValueError(f"unknown transport {transport!r}")

    results: list = [None] * parties
    errors: list = [None] * parties

    def work(i):
        ep = endpoints[i]
        try:
            if ep is None:
                ep = endpoints[i] = connect_socket(configs[i], parties, topology, timeout)
            results[i] = run_party(plan, bundles[i], ep, session, allow_insecure)
        except BaseException as exc:  # surfaced below with party context
            errors[i] = exc

    threads = [threading.Thread(target=work, args=(i,), daemon=True) for i in range(parties)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    for ep in endpoints:
        if ep is not None:
            ep.close()
    failed = [e for e in errors if e is not None]
    if failed:
        # the first party to fail is the root cause; the others usually time out behind it
        root = next((e for e in failed if not isinstance(getattr(e, "cause", None), TransportError)), failed[0])
        raise root
    if any(t.is_alive() for t in threads):
        raise TransportError(f"parties did not finish within {timeout} s")
    shares = [r[0] for r in results]
    return RunResult(shares, metrics_from_contexts(plan, [r[1] for r in results]), plan.cfg)
