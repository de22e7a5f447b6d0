"""Trusted-dealer offline phase: Beaver triples, truncation masks, Trio corrections, cost accounting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ring import DEFAULT_CFG, FixedPointConfig, ring_matmul, ring_mul, wrap
from .sharing import AdditiveShare, prf, prf_bits, share_additive


@dataclass(frozen=True)
class BeaverTriple:
    """Per-party additive shares of A, B and C = A (op) B, op being matmul or elementwise."""

    a: list[AdditiveShare]
    b: list[AdditiveShare]
    c: list[AdditiveShare]
    op: str = "matmul"

    def party(self, i: int) -> tuple[AdditiveShare, AdditiveShare, AdditiveShare]:
        return self.a[i - 1], self.b[i - 1], self.c[i - 1]

    @property
    def elements(self) -> int:
        return self.a[0].value.size + self.b[0].value.size + self.c[0].value.size


@dataclass(frozen=True)
class TruncMask:
    """Shares of R (l-1-d bits), R' (d bits) and a single wrap bit B."""

    r_hi: list[AdditiveShare]
    r_lo: list[AdditiveShare]
    bit: list[AdditiveShare]
    d: int

    def party(self, i: int):
        return self.r_hi[i - 1], self.r_lo[i - 1], self.bit[i - 1]

    @property
    def shared_bits_per_element(self) -> int:
        l = self.r_hi[0].l
        return (l - 1 - self.d) + self.d + 1


@dataclass(frozen=True)
class TrioPrep:
    m: np.ndarray  # correction for P3
    n: np.ndarray  # correction for P2


def gen_beaver(m: int, n: int, o: int, parties: int, seed: bytes, label: str = "triple", cfg: FixedPointConfig = DEFAULT_CFG, zero_a: bool = False) -> BeaverTriple:
    if min(m, n, o) < 1:
        raise ValueError("triple dimensions must be positive")
    l = cfg.l
    a = prf(seed, f"{label}/A", (m, n), l)
    if zero_a:
        a = np.zeros_like(a)
    b = prf(seed, f"{label}/B", (n, o), l)
    c = ring_matmul(a, b, l)
    return BeaverTriple(
        share_additive(a, parties, seed, f"{label}/A", l=l),
        share_additive(b, parties, seed, f"{label}/B", l=l),
        share_additive(c, parties, seed, f"{label}/C", l=l),
    )


def gen_beaver_elementwise(shape, parties: int, seed: bytes, label: str = "etriple", cfg: FixedPointConfig = DEFAULT_CFG) -> BeaverTriple:
    l = cfg.l
    a = prf(seed, f"{label}/A", shape, l)
    b = prf(seed, f"{label}/B", shape, l)
    c = ring_mul(a, b, l)
    return BeaverTriple(
        share_additive(a, parties, seed, f"{label}/A", l=l),
        share_additive(b, parties, seed, f"{label}/B", l=l),
        share_additive(c, parties, seed, f"{label}/C", l=l),
        op="mul",
    )


def gen_trunc_mask(shape, d: int, parties: int, seed: bytes, label: str = "trunc", cfg: FixedPointConfig = DEFAULT_CFG) -> TruncMask:
    l = cfg.l
    if not (1 <= d < l - 2):
        raise ValueError(f"cannot truncate {d} bits on a {l}-bit ring")
    r_hi = prf_bits(seed, f"{label}/R", shape, l - 1 - d)
    r_lo = prf_bits(seed, f"{label}/R'", shape, d)
    bit = prf_bits(seed, f"{label}/B", shape, 1)
    return TruncMask(
        share_additive(r_hi, parties, seed, f"{label}/R", l=l),
        share_additive(r_lo, parties, seed, f"{label}/R'", l=l),
        share_additive(bit, parties, seed, f"{label}/B", l=l),
        d,
    )


def gen_trio_prep(lx2, lx3, ly2, ly3, lz2, lz3, op: str = "matmul", l: int = 64) -> TrioPrep:
    """Input-independent corrections completing the Trio product.

    With dX = lx3 - lx2 and dY = ly3 - ly2 (both known to P1)::

        M = -dX*ly3 - lx3*dY + lx3*ly3 + lz3      (P1 -> P3)
        N =  dX*ly2 + lx2*dY + lx2*ly2 + lz2      (P1 -> P2)
    """
    mul = (lambda x, y: ring_matmul(x, y, l)) if op == "matmul" else (lambda x, y: ring_mul(x, y, l))
    dx = wrap(lx3 - lx2, l)
    dy = wrap(ly3 - ly2, l)
    m = wrap(-mul(dx, ly3) - mul(lx3, dy) + mul(lx3, ly3) + lz3, l)
    n = wrap(mul(dx, ly2) + mul(lx2, dy) + mul(lx2, ly2) + lz2, l)
    return TrioPrep(m, n)


# ---------------------------------------------------------------------------
# accounting


@dataclass
class LayerCost:
    layer: int
    name: str
    triple_elements: int = 0
    trunc_mask_elements: int = 0
    trunc_mask_bits: int = 0
    trio_prep_elements: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class OfflineCostReport:
    layers: list[LayerCost] = field(default_factory=list)
    dealer_bytes: dict[str, int] = field(default_factory=dict)

    @property
    def triple_elements(self) -> int:
        return sum(c.triple_elements for c in self.layers)

    @property
    def trunc_mask_elements(self) -> int:
        return sum(c.trunc_mask_elements for c in self.layers)

    @property
    def trio_prep_elements(self) -> int:
        return sum(c.trio_prep_elements for c in self.layers)

    def to_json(self) -> dict:
        return {
            "layers": [c.to_json() for c in self.layers],
            "total": {
                "triple_elements": self.triple_elements,
                "trunc_mask_elements": self.trunc_mask_elements,
                "trio_prep_elements": self.trio_prep_elements,
            },
            "dealer_bytes": dict(self.dealer_bytes),
        }


def triple_elements(m: int, n: int, o: int) -> int:
    return m * n + n * o + m * o


def account(plan) -> OfflineCostReport:
    """Closed-form offline cost of a plan, without executing anything.

    ``plan.material_slots()`` yields ``(layer_index, layer_name, kind, dims)``
    with kind in {"matmul", "mul", "trunc"}.
    """
    cfg = plan.cfg
    rows: dict[int, LayerCost] = {}
    trio = plan.protocol == "trio"
    for idx, name, kind, dims in plan.material_slots():
        row = rows.setdefault(idx, LayerCost(idx, name))
        if kind == "matmul":
            m, n, o = dims
            if trio:
                row.trio_prep_elements += 2 * m * o
            else:
                row.triple_elements += triple_elements(m, n, o)
        elif kind == "mul":
            size = int(np.prod(dims))
            if trio:
                row.trio_prep_elements += 2 * size
            else:
                row.triple_elements += 3 * size
        elif kind == "trunc" and not trio:
            # Trio truncation draws its output mask from pairwise seeds: no dealer traffic
            size = int(np.prod(dims))
            row.trunc_mask_elements += 3 * size
            row.trunc_mask_bits += cfg.l * size
    report = OfflineCostReport([rows[k] for k in sorted(rows)])
    eb = cfg.element_bytes
    if plan.protocol == "trio":
        # P1 ships M to P3 and N to P2, one tensor of the output size each
        half = report.trio_prep_elements // 2
        report.dealer_bytes = {"P1->P2": half * eb, "P1->P3": half * eb}
    else:
        per_party = (report.triple_elements + report.trunc_mask_elements) * eb
        report.dealer_bytes = {f"D->P{i}": per_party for i in range(1, plan.n + 1)}
    return report
