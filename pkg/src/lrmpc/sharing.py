"""Additive n-party sharing and Trio masked sharing.

Trio share layout (``a``, ``b`` fields)::

    P1: (lam2, lam3)    P2: (m3, lam2)    P3: (m2, lam3)

with ``m2 = x + lam2`` and ``m3 = x + lam3``. ``lam2`` is known to P1 and P2,
``lam3`` to P1 and P3.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace

import numpy as np

from .net import MsgKind, PartyContext
from .ring import U64, const, ring_matmul, wrap

# kinds that only ever carry values masked by fresh dealer randomness
MASKED_KINDS = {MsgKind.E, MsgKind.UREV, MsgKind.S_OPEN, MsgKind.VMSG, MsgKind.WMSG}


class SchemeMismatchError(TypeError):
    pass


class InsecureOperationError(PermissionError):
    pass


# ---------------------------------------------------------------------------
# shared randomness


def prf(seed: bytes, label: str, shape, l: int = 64) -> np.ndarray:
    """Keyed stream addressed by label: SHAKE-256(seed || 0x00 || label)."""
    shape = tuple(shape)
    count = int(np.prod(shape, dtype=np.int64))
    raw = hashlib.shake_256(seed + b"\x00" + label.encode()).digest(8 * count) if count else b""
    return wrap(np.frombuffer(raw, dtype="<u8").astype(U64).reshape(shape), l)


def prf_bits(seed: bytes, label: str, shape, bits: int) -> np.ndarray:
    """Uniform values in [0, 2^bits)."""
    words = prf(seed, label, shape)
    if bits >= 64:
        return words
    return words >> U64(64 - bits) if bits > 0 else np.zeros_like(words)


def _derive(master: bytes, tag: str) -> bytes:
    return hashlib.sha256(master + b"/" + tag.encode()).digest()


@dataclass(frozen=True)
class SeedSet:
    """256-bit pairwise seeds plus the dealer seed."""

    pairs: dict
    dealer: bytes

    @classmethod
    def derive(cls, master, n: int = 3) -> "SeedSet":
        if isinstance(master, int):
            master = master.to_bytes(32, "little", signed=False)
        pairs = {(a, b): _derive(master, f"pair{a}-{b}") for a in range(1, n + 1) for b in range(a + 1, n + 1)}
        return cls(pairs, _derive(master, "dealer"))

    @classmethod
    def fresh(cls, n: int = 3) -> "SeedSet":
        return cls.derive(os.urandom(32), n)

    def pair(self, a: int, b: int) -> bytes:
        return self.pairs[(min(a, b), max(a, b))]

    def view(self, party: int) -> "SeedSet":
        """Only the seeds a party legitimately holds."""
        return SeedSet({k: v for k, v in self.pairs.items() if party in k}, b"")


# ---------------------------------------------------------------------------
# share types


@dataclass(frozen=True)
class AdditiveShare:
    owner: int
    value: np.ndarray
    frac: int = 0
    l: int = 64

    scheme = "additive"

    @property
    def shape(self):
        return self.value.shape

    def _same(self, other):
        if not isinstance(other, AdditiveShare):
            raise SchemeMismatchError(f"cannot combine additive share with {type(other).__name__}")
        if other.owner != self.owner:
            raise ValueError("shares belong to different parties")

    def __add__(self, other):
        self._same(other)
        return replace(self, value=wrap(self.value + other.value, self.l))

    def __sub__(self, other):
        self._same(other)
        return replace(self, value=wrap(self.value - other.value, self.l))

    def __neg__(self):
        return replace(self, value=wrap(-self.value, self.l))

    def scale(self, c):
        """Multiply by a public ring scalar or elementwise public array."""
        return replace(self, value=wrap(self.value * _ring(c, self.l), self.l))

    def add_public(self, c):
        if self.owner != 1:
            return self
        return replace(self, value=wrap(self.value + _ring(c, self.l), self.l))

    def left_matmul(self, p):
        return replace(self, value=ring_matmul(p, self.value, self.l))

    def right_matmul(self, p):
        return replace(self, value=ring_matmul(self.value, p, self.l))

    def apply(self, fn):
        """Apply a linear layout map (reshape, im2col, transpose) to the share."""
        return replace(self, value=np.ascontiguousarray(fn(self.value)))

    def with_frac(self, frac):
        return replace(self, frac=frac)


@dataclass(frozen=True)
class TrioShare:
    owner: int
    a: np.ndarray
    b: np.ndarray
    frac: int = 0
    l: int = 64

    scheme = "trio"

    @property
    def shape(self):
        return self.a.shape

    # naming helpers, so protocol code reads like the algebra
    @property
    def lam2(self):
        return {1: self.a, 2: self.b}[self.owner]

    @property
    def lam3(self):
        return {1: self.b, 3: self.b}[self.owner]

    @property
    def m2(self):
        assert self.owner == 3
        return self.a

    @property
    def m3(self):
        assert self.owner == 2
        return self.a

    def _same(self, other):
        if not isinstance(other, TrioShare):
            raise SchemeMismatchError(f"cannot combine trio share with {type(other).__name__}")
        if other.owner != self.owner:
            raise ValueError("shares belong to different parties")

    def __add__(self, other):
        self._same(other)
        return replace(self, a=wrap(self.a + other.a, self.l), b=wrap(self.b + other.b, self.l))

    def __sub__(self, other):
        self._same(other)
        return replace(self, a=wrap(self.a - other.a, self.l), b=wrap(self.b - other.b, self.l))

    def __neg__(self):
        return replace(self, a=wrap(-self.a, self.l), b=wrap(-self.b, self.l))

    def scale(self, c):
        c = _ring(c, self.l)
        return replace(self, a=wrap(self.a * c, self.l), b=wrap(self.b * c, self.l))

    def add_public(self, c):
        # both masked values move, masks stay
        if self.owner == 1:
            return self
        return replace(self, a=wrap(self.a + _ring(c, self.l), self.l))

    def left_matmul(self, p):
        return replace(self, a=ring_matmul(p, self.a, self.l), b=ring_matmul(p, self.b, self.l))

    def right_matmul(self, p):
        return replace(self, a=ring_matmul(self.a, p, self.l), b=ring_matmul(self.b, p, self.l))

    def apply(self, fn):
        return replace(self, a=np.ascontiguousarray(fn(self.a)), b=np.ascontiguousarray(fn(self.b)))

    def with_frac(self, frac):
        return replace(self, frac=frac)


def _ring(c, l):
    if isinstance(c, (int, np.integer)):
        return const(int(c), l)
    return np.asarray(c, dtype=U64)


def public_share(value: np.ndarray, owner: int, scheme: str, frac: int = 0, l: int = 64):
    """A sharing of a public tensor (all randomness zero)."""
    value = wrap(value, l)
    zero = np.zeros_like(value)
    if scheme == "additive":
        return AdditiveShare(owner, value if owner == 1 else zero, frac, l)
    if owner == 1:
        return TrioShare(1, zero, zero, frac, l)
    return TrioShare(owner, value.copy(), zero, frac, l)


# ---------------------------------------------------------------------------
# share / reconstruct


def share_additive(x: np.ndarray, n: int, seed: bytes, label: str = "x", frac: int = 0, l: int = 64):
    if n < 2:
        raise ValueError("additive sharing needs at least 2 parties")
    x = wrap(x, l)
    parts = [prf(seed, f"{label}/share{i}", x.shape, l) for i in range(1, n)]
    last = x.copy()
    for p in parts:
        last = wrap(last - p, l)
    return [AdditiveShare(i + 1, v, frac, l) for i, v in enumerate(parts + [last])]


def reconstruct_additive(shares) -> np.ndarray:
    shares = list(shares)
    if not shares:
        raise ValueError("no shares given")
    owners = sorted(s.owner for s in shares)
    if owners != list(range(1, len(shares) + 1)):
        raise ValueError(f"missing or duplicate shares: owners {owners}")
    l = shares[0].l
    total = np.zeros(shares[0].shape, dtype=U64)
    for s in shares:
        if s.shape != total.shape:
            raise ValueError(f"shape mismatch {s.shape} vs {total.shape}")
        total = total + s.value
    return wrap(total, l)


def trio_masks(seeds: SeedSet, label: str, shape, l: int = 64):
    return prf(seeds.pair(1, 2), f"{label}/lam2", shape, l), prf(seeds.pair(1, 3), f"{label}/lam3", shape, l)


def share_trio(x: np.ndarray, seeds: SeedSet, label: str = "x", frac: int = 0, l: int = 64):
    x = wrap(x, l)
    lam2, lam3 = trio_masks(seeds, label, x.shape, l)
    m2 = wrap(x + lam2, l)
    m3 = wrap(x + lam3, l)
    return [TrioShare(1, lam2, lam3, frac, l), TrioShare(2, m3, lam2, frac, l), TrioShare(3, m2, lam3, frac, l)]


def reconstruct_trio(s: TrioShare, t: TrioShare) -> np.ndarray:
    if s.owner == t.owner:
        raise ValueError(f"need two distinct roles, got P{s.owner} twice")
    by = {s.owner: s, t.owner: t}
    l = s.l
    if 2 in by and 3 in by:
        return wrap(by[2].a - by[3].b, l)  # m3 - lam3
    if 1 in by and 2 in by:
        return wrap(by[2].a - by[1].b, l)  # m3 - lam3
    return wrap(by[3].a - by[1].a, l)  # m2 - lam2


def reconstruct(shares) -> np.ndarray:
    shares = list(shares)
    if isinstance(shares[0], TrioShare):
        return reconstruct_trio(shares[0], shares[1])
    return reconstruct_additive(shares)


def linear_combine(shares, coefficients, constant=None):
    """Share of sum(c_k * x_k) + constant, computed locally."""
    shares = list(shares)
    if len(shares) != len(coefficients) or not shares:
        raise ValueError("need one coefficient per share")
    kind = type(shares[0])
    if any(type(s) is not kind for s in shares):
        raise SchemeMismatchError("cannot mix sharing schemes")
    acc = shares[0].scale(coefficients[0])
    for s, c in zip(shares[1:], coefficients[1:]):
        acc = acc + s.scale(c)
    if constant is not None:
        acc = acc.add_public(constant)
    return acc


# ---------------------------------------------------------------------------
# opening


def broadcast_send(ctx: PartyContext, kind: MsgKind, value: np.ndarray, layer: int | None = None) -> None:
    for p in ctx.peers:
        ctx.send(p, kind, value, layer)


def broadcast_collect(ctx: PartyContext, kind: MsgKind, own: np.ndarray, layer: int | None = None) -> np.ndarray:
    total = own.copy()
    for p in ctx.peers:
        total = total + ctx.recv(p, kind, own.shape, layer)
    return wrap(total, ctx.cfg.l)


def open_share(share, ctx: PartyContext, kind: MsgKind = MsgKind.S_OPEN) -> np.ndarray | None:
    """Reveal a shared tensor in one round.

    Only dealer-masked tensors may be opened; anything else needs
    ``ctx.allow_insecure``. Under Trio P2 and P3 swap their masked values and
    P1 learns nothing (returns None).
    """
    if kind not in MASKED_KINDS:
        if not ctx.allow_insecure:
            raise InsecureOperationError(f"opening an unmasked value ({MsgKind(kind).name}) is refused")
        ctx.insecure_ops.append(f"open:{MsgKind(kind).name}:layer{ctx.layer}")
    if isinstance(share, AdditiveShare):
        broadcast_send(ctx, kind, share.value)
        out = broadcast_collect(ctx, kind, share.value)
        ctx.new_round()
        return out
    if ctx.party == 1:
        return None
    other = 3 if ctx.party == 2 else 2
    ctx.send(other, kind, share.a)
    theirs = ctx.recv(other, kind, share.shape)
    ctx.new_round()
    # P2 receives m2 and removes lam2; P3 receives m3 and removes lam3
    return wrap(theirs - share.b, ctx.cfg.l)
