"""Execution plans: a model lowered to a flat list of protocol steps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from ..model import LINEAR_KINDS, LayerSpec, Model, decompose_model
from ..ring import DEFAULT_CFG, FixedPointConfig

MODES = ("FullRank", "LR", "LR+TS", "LR+TS+Concat")
PROTOCOLS = ("npc", "trio")


class PlanError(ValueError):
    pass


class RangeBoundError(PlanError):
    pass


@dataclass(frozen=True)
class Step:
    """One protocol-level operation.

    op is one of: matmul (share @ weight), mul (elementwise square), trunc,
    public_left (public A @ share), relu, im2col, reshape.
    """

    op: str
    layer: int
    slot: str
    in_shape: tuple
    out_shape: tuple
    weight: str | None = None
    d: int = 0
    params: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple:
        if self.op == "matmul":
            return (self.in_shape[0], self.in_shape[1], self.out_shape[1])
        return tuple(self.in_shape)

    @property
    def macs(self) -> int:
        if self.op == "matmul":
            m, n, o = self.dims
            return m * n * o
        if self.op == "public_left":
            p, q = self.params["p"], self.params["q"]
            return p * q * int(np.prod(self.in_shape[1:]))
        if self.op == "mul":
            return int(np.prod(self.in_shape))
        return 0


@dataclass(frozen=True)
class Policy:
    """Which layers go low-rank, the rank ratios and per-layer skip overrides."""

    layers: tuple | None = None
    fc_ratio: float = 0.25
    conv_ratio: float = 0.5
    skip_trunc: dict = field(default_factory=dict)
    input_bound: float = 64.0

    @classmethod
    def from_json(cls, obj: dict) -> "Policy":
        layers = obj.get("layers")
        return cls(
            tuple(int(i) for i in layers) if layers is not None else None,
            float(obj.get("fc_ratio", 0.25)),
            float(obj.get("conv_ratio", 0.5)),
            {int(k): bool(v) for k, v in obj.get("skip_trunc", {}).items()},
            float(obj.get("input_bound", 64.0)),
        )

    @classmethod
    def load(cls, path) -> "Policy":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict:
        return {
            "layers": list(self.layers) if self.layers is not None else None,
            "fc_ratio": self.fc_ratio,
            "conv_ratio": self.conv_ratio,
            "skip_trunc": {str(k): v for k, v in self.skip_trunc.items()},
            "input_bound": self.input_bound,
        }


@dataclass(frozen=True)
class ExecutionPlan:
    model: Model
    protocol: str
    n: int
    mode: str
    cfg: FixedPointConfig
    steps: tuple
    weights: dict  # weight key -> float64 matrix (None for shape-only plans)
    input_bound: float
    range_checked: bool

    @property
    def concat(self) -> bool:
        return self.mode == "LR+TS+Concat"

    @property
    def executable(self) -> bool:
        return all(v is not None for v in self.weights.values())

    @property
    def input_shape(self) -> tuple:
        return self.model.input_shape

    @property
    def output_shape(self) -> tuple:
        return self.steps[-1].out_shape if self.steps else self.model.input_shape

    @property
    def parties(self) -> int:
        return 3 if self.protocol == "trio" else self.n

    def material_slots(self):
        for s in self.steps:
            if s.op in ("matmul", "mul", "trunc"):
                yield s.layer, self.model.layers[s.layer].name, s.op, s.dims

    def summary(self) -> dict:
        return {
            "protocol": self.protocol,
            "n": self.parties,
            "mode": self.mode,
            "l": self.cfg.l,
            "f": self.cfg.f,
            "layers": [l.to_meta() for l in self.model.layers],
            "steps": [{"op": s.op, "layer": s.layer, "slot": s.slot, "in": list(s.in_shape), "out": list(s.out_shape), "d": s.d} for s in self.steps],
        }


# ---------------------------------------------------------------------------


def _to_full_rank(layer: LayerSpec) -> LayerSpec:
    d = layer.dims
    if layer.kind == "lowrank_fc":
        if layer.weights:
            return LayerSpec.fc(layer.weights["U"] @ layer.weights["V"], layer.name)
        return LayerSpec("fc", layer.name, {"n": d["n"], "o": d["o"]})
    if layer.kind == "lowrank_conv":
        dims = {k: d[k] for k in ("k", "i", "o", "stride", "pad")}
        if layer.weights:
            k, i, r = d["k"], d["i"], d["r"]
            w = (layer.weights["U"].reshape(k * k * i, r) @ layer.weights["V"].reshape(r, -1)).reshape(k, k, i, -1)
            return LayerSpec("conv", layer.name, dims, {"W": w})
        return LayerSpec("conv", layer.name, dims)
    return layer


def _lower(model: Model, cfg: FixedPointConfig):
    f = cfg.f
    steps: list[Step] = []
    weights: dict = {}
    shapes = model.shapes()
    for idx, layer in enumerate(model.layers):
        x_shape = shapes[idx]
        out_shape = shapes[idx + 1]
        d = layer.dims
        tag = f"L{idx}"
        kind = layer.kind

        def add(op, slot, ins, outs, **kw):
            steps.append(Step(op, idx, f"{tag}/{slot}", tuple(ins), tuple(outs), **kw))

        def mat(key, arr_key, mat_shape):
            w = layer.weights.get(arr_key)
            weights[f"{tag}/{key}"] = None if w is None else np.asarray(w, dtype=np.float64).reshape(mat_shape)
            return f"{tag}/{key}"

        if kind in ("fc", "lowrank_fc", "conv", "lowrank_conv"):
            conv = kind.endswith("conv")
            if conv:
                k, i = d["k"], d["i"]
                rows = int(np.prod(out_shape[:3]))
                cur = (rows, k * k * i)
                add("im2col", "im2col", x_shape, cur, params={"k": k, "stride": d["stride"], "pad": d["pad"]})
            else:
                cur = tuple(x_shape)
            if kind in ("fc", "conv"):
                key = mat("W", "W", (cur[1], d["o"]))
                add("matmul", "w", cur, (cur[0], d["o"]), weight=key)
                add("trunc", "tw", (cur[0], d["o"]), (cur[0], d["o"]), d=f)
            else:
                r = d["r"]
                ku = mat("U", "U", (cur[1], r))
                kv = mat("V", "V", (r, d["o"]))
                add("matmul", "u", cur, (cur[0], r), weight=ku)
                if not layer.skip_trunc:
                    add("trunc", "tu", (cur[0], r), (cur[0], r), d=f)
                add("matmul", "v", (cur[0], r), (cur[0], d["o"]), weight=kv)
                add("trunc", "tv", (cur[0], d["o"]), (cur[0], d["o"]), d=2 * f if layer.skip_trunc else f)
            if conv:
                add("reshape", "reshape", (cur[0], d["o"]), out_shape)
        elif kind == "public_left":
            key = mat("A", "A", (d["p"], d["q"]))
            add("public_left", "a", x_shape, out_shape, weight=key, params={"p": d["p"], "q": d["q"]})
            add("trunc", "ta", out_shape, out_shape, d=f)
        elif kind == "square":
            add("mul", "sq", x_shape, x_shape)
            add("trunc", "tsq", x_shape, x_shape, d=f)
        elif kind == "relu":
            add("relu", "relu", x_shape, x_shape)
        elif kind == "flatten":
            add("reshape", "flatten", x_shape, out_shape)
    return tuple(steps), weights


def validate_fraction_state(steps, cfg: FixedPointConfig) -> None:
    """Statically replay fraction bits: products add f, Trunc^d removes d, layer boundaries carry f."""
    f = cfg.f
    frac = f
    last_layer = None
    for s in steps:
        if s.layer != last_layer:
            if frac != f:
                raise PlanError(f"layer {last_layer} leaves {frac} fraction bits pending, expected {f}")
            last_layer = s.layer
        if s.op in ("matmul", "public_left"):
            if frac not in (f, 2 * f):
                raise PlanError(f"{s.slot}: product on a share carrying {frac} fraction bits")
            frac += f
        elif s.op == "mul":
            if frac != f:
                raise PlanError(f"{s.slot}: square expects {f} fraction bits, got {frac}")
            frac *= 2
        elif s.op == "trunc":
            if frac - s.d != f:
                raise PlanError(f"{s.slot}: Trunc^{s.d} on {frac} fraction bits")
            frac -= s.d
        elif s.op == "relu" and frac != f:
            raise PlanError(f"{s.slot}: relu expects {f} fraction bits")
    if frac != f:
        raise PlanError(f"output carries {frac} fraction bits, expected {f}")


def _row_gain(w: np.ndarray) -> float:
    """max_j sum_i |w_ij|: bound on |(x @ w)_j| / max|x|."""
    return float(np.abs(w).sum(axis=0).max()) if w.size else 0.0


def check_range(plan_steps, weights, cfg: FixedPointConfig, input_bound: float) -> None:
    """Propagate decoded-magnitude bounds and check every pre-truncation value fits below 2^(l-2)."""
    limit = 2.0 ** (cfg.l - 2)
    bound = float(input_bound)
    frac = cfg.f
    for s in plan_steps:
        if s.op == "matmul":
            bound *= _row_gain(weights[s.weight])
            frac += cfg.f
        elif s.op == "public_left":
            bound *= _row_gain(weights[s.weight].T)
            frac += cfg.f
        elif s.op == "mul":
            bound *= bound
            frac += cfg.f
        elif s.op == "trunc":
            frac -= s.d
            continue
        else:
            continue
        if bound * 2.0**frac >= limit:
            which = "truncation skipping" if frac == 3 * cfg.f else "fixed-point product"
            raise RangeBoundError(
                f"{s.slot}: |value| <= {bound:.3g} with {frac} fraction bits exceeds 2^{cfg.l - 2} ({which})"
            )


def build_plan(
    model: Model,
    protocol: str = "npc",
    mode: str = "LR+TS",
    policy: Policy | None = None,
    n: int = 3,
    cfg: FixedPointConfig = DEFAULT_CFG,
) -> ExecutionPlan:
    if protocol not in PROTOCOLS:
        raise PlanError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    if mode not in MODES:
        raise PlanError(f"unknown mode {mode!r}; choose from {MODES}")
    if protocol == "trio":
        n = 3
    if n < 2:
        raise PlanError("need at least two parties")
    policy = policy or Policy()
    count = len(model.layers)
    for i in list(policy.layers or []) + list(policy.skip_trunc):
        if not 0 <= i < count:
            raise PlanError(f"policy layer index {i} outside 0..{count - 1}")

    if mode == "FullRank":
        model = Model(model.input_shape, tuple(replace(_to_full_rank(l), skip_trunc=False) for l in model.layers))
    else:
        targets = policy.layers
        if targets is None:
            targets = [i for i, l in enumerate(model.layers) if l.kind in ("fc", "conv")]
        else:
            bad = [i for i in targets if model.layers[i].kind not in LINEAR_KINDS]
            if bad:
                raise PlanError(f"policy selects non-linear layers {bad}")
            targets = [i for i in targets if model.layers[i].kind in ("fc", "conv")]
        model, _ = decompose_model(model, policy.fc_ratio, policy.conv_ratio, targets)
        skip_default = mode != "LR"
        layers = []
        for i, layer in enumerate(model.layers):
            if layer.kind.startswith("lowrank"):
                layers.append(replace(layer, skip_trunc=policy.skip_trunc.get(i, skip_default)))
            else:
                if policy.skip_trunc.get(i):
                    raise PlanError(f"skip_trunc requested on layer {i} ({layer.kind}), which is not low-rank")
                layers.append(layer)
        model = Model(model.input_shape, tuple(layers))

    if any(l.skip_trunc for l in model.layers) and 3 * cfg.f + 2 > cfg.l:
        raise RangeBoundError(f"truncation skipping needs 3f+2 <= l (f={cfg.f}, l={cfg.l})")
    steps, weights = _lower(model, cfg)
    validate_fraction_state(steps, cfg)
    slots = [s.slot for s in steps]
    if len(set(slots)) != len(slots):
        raise PlanError("duplicate material slot in plan")
    checked = all(w is not None for w in weights.values())
    if checked:
        check_range(steps, weights, cfg, policy.input_bound)
    return ExecutionPlan(model, protocol, n, mode, cfg, steps, weights, policy.input_bound, checked)
