"""Plaintext model description, LRMT (de)serialization, decomposition and the float64 oracle."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import container
from .lowrank import choose_rank, conv_factorize, frobenius_error, svd_factorize
from .ring import im2col

LINEAR_KINDS = ("fc", "lowrank_fc", "conv", "lowrank_conv")
KINDS = LINEAR_KINDS + ("square", "relu", "public_left", "flatten")


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``dims`` is authoritative for shape; ``weights`` may be empty for shape-only models.

    dims per kind::

        fc            n, o            weights W (n, o)
        lowrank_fc    n, r, o         weights U (n, r), V (r, o)
        conv          k, i, o, stride, pad            W (k, k, i, o)
        lowrank_conv  k, i, r, o, stride, pad         U (k, k, i, r), V (1, 1, r, o)
        public_left   p, q            A (p, q), applied as A @ X
    """

    kind: str
    name: str = ""
    dims: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    skip_trunc: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.skip_trunc and not self.kind.startswith("lowrank"):
            raise ValueError(f"skip_trunc is only meaningful on low-rank layers, not {self.kind}")
        expected = {
            "fc": {"W": ("n", "o")},
            "lowrank_fc": {"U": ("n", "r"), "V": ("r", "o")},
            "public_left": {"A": ("p", "q")},
        }.get(self.kind, {})
        for key, names in expected.items():
            if key in self.weights:
                shape = tuple(self.dims[k] for k in names)
                if self.weights[key].shape != shape:
                    raise DimensionError(f"{self.name}: {key} has shape {self.weights[key].shape}, dims say {shape}")

    @property
    def has_weights(self) -> bool:
        return self.kind not in ("fc", "lowrank_fc", "conv", "lowrank_conv", "public_left") or bool(self.weights)

    # constructors -----------------------------------------------------

    @classmethod
    def fc(cls, w, name="fc"):
        w = np.asarray(w, dtype=np.float64)
        return cls("fc", name, {"n": w.shape[0], "o": w.shape[1]}, {"W": w})

    @classmethod
    def lowrank_fc(cls, u, v, name="lrfc", skip_trunc=False):
        u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
        return cls("lowrank_fc", name, {"n": u.shape[0], "r": u.shape[1], "o": v.shape[1]}, {"U": u, "V": v}, skip_trunc)

    @classmethod
    def conv(cls, w, name="conv", stride=1, pad=1):
        w = np.asarray(w, dtype=np.float64)
        k, _, i, o = w.shape
        return cls("conv", name, {"k": k, "i": i, "o": o, "stride": stride, "pad": pad}, {"W": w})

    @classmethod
    def public_left(cls, a, name="adj"):
        a = np.asarray(a, dtype=np.float64)
        return cls("public_left", name, {"p": a.shape[0], "q": a.shape[1]}, {"A": a})

    # shapes -----------------------------------------------------------

    def out_shape(self, shape: tuple) -> tuple:
        d = self.dims
        k = self.kind
        if k in ("fc", "lowrank_fc"):
            if len(shape) != 2 or shape[1] != d["n"]:
                raise DimensionError(f"{self.name}: expects (m, {d['n']}) input, got {shape}")
            return (shape[0], d["o"])
        if k in ("conv", "lowrank_conv"):
            if len(shape) != 4 or shape[3] != d["i"]:
                raise DimensionError(f"{self.name}: expects NHWC input with {d['i']} channels, got {shape}")
            b, h, w, _ = shape
            ho = (h + 2 * d["pad"] - d["k"]) // d["stride"] + 1
            wo = (w + 2 * d["pad"] - d["k"]) // d["stride"] + 1
            if ho < 1 or wo < 1:
                raise DimensionError(f"{self.name}: empty convolution output")
            return (b, ho, wo, d["o"])
        if k == "public_left":
            if len(shape) != 2 or shape[0] != d["q"]:
                raise DimensionError(f"{self.name}: expects ({d['q']}, *) input, got {shape}")
            return (d["p"], shape[1])
        if k == "flatten":
            return (shape[0], int(np.prod(shape[1:])))
        return tuple(shape)

    def to_meta(self) -> dict:
        return {"kind": self.kind, "name": self.name, "dims": dict(self.dims), "skip_trunc": self.skip_trunc}


@dataclass(frozen=True)
class Model:
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates the chain

    def shapes(self) -> list[tuple]:
        """Activation shape before each layer, plus the output shape."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(layer.out_shape(out[-1]))
        return out

    @property
    def has_weights(self) -> bool:
        return all(l.has_weights for l in self.layers)

    def to_tensors(self):
        tensors = {}
        for i, layer in enumerate(self.layers):
            for key, arr in layer.weights.items():
                tensors[f"L{i}/{key}"] = np.asarray(arr, dtype=np.float64)
        meta = {"type": "model", "input_shape": list(self.input_shape), "layers": [l.to_meta() for l in self.layers]}
        return tensors, meta

    @classmethod
    def from_tensors(cls, tensors: dict, meta: dict) -> "Model":
        if meta.get("type") != "model":
            raise container.ContainerError("container does not hold a model")
        layers = []
        for i, lm in enumerate(meta["layers"]):
            weights = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith(f"L{i}/")}
            layers.append(LayerSpec(lm["kind"], lm.get("name", ""), dict(lm.get("dims", {})), weights, bool(lm.get("skip_trunc", False))))
        return cls(tuple(meta["input_shape"]), tuple(layers))


def save_model(model: Model, path) -> None:
    tensors, meta = model.to_tensors()
    container.save(path, tensors, meta)


def load_model(path) -> Model:
    tensors, meta = container.load(path)
    return Model.from_tensors(tensors, meta)


# ---------------------------------------------------------------------------
# plaintext oracle


def _conv_float(x, w, stride, pad):
    k, _, i, o = w.shape
    cols = im2col(x, k, stride, pad)
    b, h, wd, _ = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    return (cols @ w.reshape(k * k * i, o)).reshape(b, ho, wo, o)


def layer_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    w = layer.weights
    d = layer.dims
    if layer.kind == "fc":
        return x @ w["W"]
    if layer.kind == "lowrank_fc":
        return x @ w["U"] @ w["V"]
    if layer.kind == "conv":
        return _conv_float(x, w["W"], d["stride"], d["pad"])
    if layer.kind == "lowrank_conv":
        z = _conv_float(x, w["U"], d["stride"], d["pad"])
        return _conv_float(z, w["V"], 1, 0)
    if layer.kind == "public_left":
        return w["A"] @ x
    if layer.kind == "square":
        return x * x
    if layer.kind == "relu":
        return np.maximum(x, 0.0)
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    raise ValueError(layer.kind)


def plaintext_forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Double-precision reference evaluation."""
    if not model.has_weights:
        raise ValueError("shape-only model has no weights to evaluate")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise DimensionError(f"input shape {x.shape} does not match model {model.input_shape}")
    for layer in model.layers:
        x = layer_forward(layer, x)
    return x


# ---------------------------------------------------------------------------
# decomposition


@dataclass(frozen=True)
class DecompositionRecord:
    layer: int
    name: str
    kind: str
    rank: int
    ratio: float
    frobenius_error: float
    optimum: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def decompose_model(model: Model, fc_ratio: float = 0.25, conv_ratio: float = 0.5, layers=None) -> tuple[Model, list[DecompositionRecord]]:
    """Replace selected full-rank FC/conv layers with their rank-r factorizations.

    ``layers`` lists layer indices; None means every FC and conv layer.
    """
    if layers is None:
        layers = [i for i, l in enumerate(model.layers) if l.kind in ("fc", "conv")]
    out = list(model.layers)
    records = []
    for i in layers:
        if not 0 <= i < len(out):
            raise IndexError(f"policy layer index {i} outside 0..{len(out) - 1}")
        layer = out[i]
        if layer.kind not in ("fc", "conv"):
            raise ValueError(f"layer {i} ({layer.kind}) cannot be decomposed")
        d = layer.dims
        if layer.kind == "fc":
            r = choose_rank("fc", (d["n"], d["o"]), fc_ratio)
            if layer.weights:
                fac = svd_factorize(layer.weights["W"], r)
                out[i] = LayerSpec.lowrank_fc(fac.u, fac.v, layer.name)
            else:
                out[i] = LayerSpec("lowrank_fc", layer.name, {"n": d["n"], "r": r, "o": d["o"]})
        else:
            r = choose_rank("conv", (d["k"] * d["k"] * d["i"], d["o"]), conv_ratio)
            r = min(r, d["k"] * d["k"] * d["i"])
            dims = {**d, "r": r}
            if layer.weights:
                fac = conv_factorize(layer.weights["W"], r)
                out[i] = LayerSpec("lowrank_conv", layer.name, dims, {"U": fac.u, "V": fac.v})
            else:
                out[i] = LayerSpec("lowrank_conv", layer.name, dims)
        if layer.weights:
            w = layer.weights["W"]
            records.append(DecompositionRecord(i, layer.name, layer.kind, r, fac.ratio, frobenius_error(w, fac), fac.tail_error()))
        else:
            records.append(DecompositionRecord(i, layer.name, layer.kind, r, r / min(d["n"], d["o"]) if layer.kind == "fc" else r / d["o"], float("nan"), float("nan")))
    return Model(model.input_shape, tuple(out)), records


def with_skip_trunc(model: Model, enabled=True, overrides: dict | None = None) -> Model:
    """Set skip_trunc on every low-rank layer, then apply per-index overrides."""
    overrides = overrides or {}
    layers = []
    for i, layer in enumerate(model.layers):
        if layer.kind.startswith("lowrank"):
            layers.append(replace(layer, skip_trunc=bool(overrides.get(i, enabled))))
        else:
            layers.append(replace(layer, skip_trunc=False))
    return Model(model.input_shape, tuple(layers))


# ---------------------------------------------------------------------------
# example models


def gcn_adjacency(edges, nodes: int) -> np.ndarray:
    """Symmetric-normalized adjacency with self loops: D^-1/2 (A + I) D^-1/2."""
    a = np.eye(nodes)
    for s, t in edges:
        a[s, t] = a[t, s] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def gcn_demo() -> tuple[Model, np.ndarray]:
    """Two-layer GCN on a 3-node path graph: A relu(A X W) W'."""
    a = gcn_adjacency([(0, 1), (1, 2)], 3)
    x = np.array([[1.0, -0.5], [0.25, 2.0], [-1.5, 0.75]])
    w1 = np.array([[0.5, -1.0, 0.75, 0.25], [1.0, 0.5, -0.25, -0.75]])
    w2 = np.array([[1.0, -0.5], [0.25, 0.75], [-0.5, 1.0], [0.5, 0.25]])
    model = Model(
        x.shape,
        (
            LayerSpec.public_left(a, "adj0"),
            LayerSpec.fc(w1, "fc0"),
            LayerSpec("relu", "relu0"),
            LayerSpec.public_left(a, "adj1"),
            LayerSpec.fc(w2, "fc1"),
        ),
    )
    return model, x


def fc_chain(m: int, widths, rank: int | None = None, seed: int = 0, shape_only: bool = False) -> Model:
    """Stack of FC layers; with ``rank`` set the layers are low-rank U @ V.

    Weights are scaled so activations keep roughly unit magnitude.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for i, (n, o) in enumerate(zip(widths[:-1], widths[1:])):
        name = f"fc{i}"
        if rank is None:
            if shape_only:
                layers.append(LayerSpec("fc", name, {"n": n, "o": o}))
            else:
                layers.append(LayerSpec.fc(rng.normal(0, 1 / np.sqrt(n), (n, o)), name))
        else:
            if shape_only:
                layers.append(LayerSpec("lowrank_fc", name, {"n": n, "r": rank, "o": o}))
            else:
                u = rng.normal(0, 1 / np.sqrt(n), (n, rank))
                v = np.linalg.qr(rng.normal(size=(o, rank)))[0].T if rank <= o else rng.normal(0, 1 / np.sqrt(rank), (rank, o))
                layers.append(LayerSpec.lowrank_fc(u, v, name))
    return Model((m, widths[0]), tuple(layers))


# 4-layer FC stack used by the concatenation and network-trend benchmarks
FC4_BATCH = 192
FC4_WIDTHS = (1024, 256, 1024, 256, 1024)


def fc4(shape_only: bool = True, seed: int = 0) -> Model:
    return fc_chain(FC4_BATCH, FC4_WIDTHS, seed=seed, shape_only=shape_only)


def builtin_model(name: str) -> tuple[Model, np.ndarray | None]:
    """Named desk-scale models: "gcn" (with its input) and "fc4" (shape only)."""
    if name == "gcn":
        return gcn_demo()
    if name == "fc4":
        return fc4(), None
    raise ValueError(f"unknown builtin model {name!r}; choose gcn or fc4")
