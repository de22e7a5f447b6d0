"""Online protocols: Beaver and Trio products, probabilistic truncation, low-rank composite, activations.

Every function is executed by one party on its own share, inside that party's
runtime; cross-party data only moves through ``ctx``.
"""

from __future__ import annotations

import logging

import numpy as np

from .net import MsgKind, PartyContext
from .ring import U64, const, ring_matmul, ring_mul, to_signed, from_signed, wrap
from .sharing import AdditiveShare, TrioShare, broadcast_collect, broadcast_send, open_share, prf, public_share

log = logging.getLogger(__name__)


class FractionStateError(ValueError):
    pass


def _product(op: str, l: int):
    if op == "matmul":
        return lambda x, y: ring_matmul(x, y, l)
    if op == "mul":
        return lambda x, y: ring_mul(x, y, l)
    raise ValueError(f"unknown product {op!r}")


def _check_product_fracs(xs, ys, f):
    if xs.frac not in (f, 2 * f) or ys.frac != f:
        raise FractionStateError(f"product operands carry {xs.frac}/{ys.frac} fraction bits; expected {f} or {2 * f} / {f}")


# ---------------------------------------------------------------------------
# n-party Beaver product


def npc_urev_send(ys: AdditiveShare, b: AdditiveShare, ctx: PartyContext, layer: int) -> AdditiveShare:
    """Broadcast this party's share of Y - B (static weights: no dependence on the input)."""
    d = ys - b
    broadcast_send(ctx, MsgKind.UREV, d.value, layer)
    return d


def npc_urev_collect(own: AdditiveShare, ctx: PartyContext, layer: int) -> np.ndarray:
    return broadcast_collect(ctx, MsgKind.UREV, own.value, layer)


def npc_product(xs: AdditiveShare, ys: AdditiveShare, triple, ctx: PartyContext, slot: str, op: str = "matmul", urev=None) -> AdditiveShare:
    """Beaver product, one round.

    ``[Z]_i = E (.) [B]_i + [A]_i (.) Urev + [C]_i``, plus ``E (.) Urev`` on
    party 1. If Urev was broadcast ahead of time only E is exchanged, and the
    input-independent part is computed before waiting on it. ``urev`` is then
    either the opened tensor or this party's own early share, in which case
    the peers' shares are collected after E is on the wire.
    """
    ctx.consume(slot)
    a, b, c = triple
    l = ctx.cfg.l
    mul = _product(op, l)
    if op == "matmul" and (xs.shape != a.shape or ys.shape != b.shape):
        raise ValueError(f"triple {a.shape}x{b.shape} does not fit operands {xs.shape}x{ys.shape}")
    if op == "mul" and not (xs.shape == ys.shape == a.shape):
        raise ValueError("elementwise triple shape mismatch")

    e_own = xs - a
    if urev is None:
        u_own = ys - b
        broadcast_send(ctx, MsgKind.E, e_own.value)
        broadcast_send(ctx, MsgKind.UREV, u_own.value)
        e = broadcast_collect(ctx, MsgKind.E, e_own.value)
        urev = broadcast_collect(ctx, MsgKind.UREV, u_own.value)
        z = wrap(mul(a.value, urev) + c.value, l)
    else:
        broadcast_send(ctx, MsgKind.E, e_own.value)
        if isinstance(urev, AdditiveShare):
            urev = npc_urev_collect(urev, ctx, ctx.layer)
        z = wrap(mul(a.value, urev) + c.value, l)
        e = broadcast_collect(ctx, MsgKind.E, e_own.value)
    ctx.new_round()

    z = wrap(z + mul(e, b.value), l)
    if ctx.party == 1:
        z = wrap(z + mul(e, urev), l)
    return AdditiveShare(ctx.party, z, xs.frac + ys.frac, l)


def npc_matmul(xs, ys, triple, ctx, slot="mm", urev=None):
    _check_product_fracs(xs, ys, ctx.cfg.f)
    return npc_product(xs, ys, triple, ctx, slot, "matmul", urev)


# ---------------------------------------------------------------------------
# Trio product


def trio_output_masks(ctx: PartyContext, slot: str, shape):
    """Fresh output masks: lam2 from the P1-P2 seed, lam3 from the P1-P3 seed."""
    l = ctx.cfg.l
    lam2 = prf(ctx.seeds.pair(1, 2), f"{slot}/lz2", shape, l) if ctx.party in (1, 2) else None
    lam3 = prf(ctx.seeds.pair(1, 3), f"{slot}/lz3", shape, l) if ctx.party in (1, 3) else None
    return lam2, lam3


def trio_product(xs: TrioShare, ys: TrioShare, correction, ctx: PartyContext, slot: str, op: str = "matmul") -> TrioShare:
    """Trio product with one parallel P2<->P3 exchange; P1 stays silent.

    P2: Vmsg = -mX3 (.) lY2 - lX2 (.) mY3 + N  -> P3;  mZ3 = mX3 (.) mY3 + Wmsg
    P3: Wmsg = -mX2 (.) lY3 - lX3 (.) mY2 + M  -> P2;  mZ2 = mX2 (.) mY2 + Vmsg
    """
    ctx.consume(slot)
    l = ctx.cfg.l
    mul = _product(op, l)
    frac = xs.frac + ys.frac
    shape = mul(np.zeros(xs.shape, U64), np.zeros(ys.shape, U64)).shape
    lam2, lam3 = trio_output_masks(ctx, slot, shape)
    if ctx.party == 1:
        return TrioShare(1, lam2, lam3, frac, l)
    if correction is None or correction.shape != shape:
        raise ValueError(f"P{ctx.party}: missing or mis-shaped Trio correction for {slot}")
    if ctx.party == 2:
        mx, lx, my, ly = xs.a, xs.b, ys.a, ys.b  # mX3, lX2, mY3, lY2
        out_kind, in_kind, peer, own_lam = MsgKind.VMSG, MsgKind.WMSG, 3, lam2
    else:
        mx, lx, my, ly = xs.a, xs.b, ys.a, ys.b  # mX2, lX3, mY2, lY3
        out_kind, in_kind, peer, own_lam = MsgKind.WMSG, MsgKind.VMSG, 2, lam3
    # input-independent half first (masks and static weights only)
    pre = wrap(correction - mul(lx, my), l)
    msg = wrap(pre - mul(mx, ly), l)
    ctx.send(peer, out_kind, msg)
    theirs = ctx.recv(peer, in_kind, shape)
    ctx.new_round()
    m = wrap(mul(mx, my) + theirs, l)
    return TrioShare(ctx.party, m, own_lam, frac, l)


def trio_matmul(xs, ys, correction, ctx, slot="mm"):
    _check_product_fracs(xs, ys, ctx.cfg.f)
    return trio_product(xs, ys, correction, ctx, slot, "matmul")


# ---------------------------------------------------------------------------
# truncation


def _check_trunc(zs, d, f):
    if zs.frac - d != f:
        raise FractionStateError(f"truncating {d} bits from a value with {zs.frac} fraction bits would not leave {f}")


def npc_trunc(zs: AdditiveShare, d: int, mask, ctx: PartyContext, slot: str = "trunc") -> AdditiveShare:
    """Probabilistic truncation by d bits, one round (open of S).

    Bias x^ = z + 2^(l-2) into [0, 2^(l-1)); mask r = B*2^(l-1) + R*2^d + R';
    open S = x^ + r. With s = msb(S) and S' = S mod 2^(l-1), the wrap of the
    low l-1 bits is w = s xor B and
    y = floor(S'/2^d) - R + w*2^(l-1-d) - 2^(l-2-d) = floor(z/2^d) + e, e in {0,1}.
    """
    _check_trunc(zs, d, ctx.cfg.f)
    ctx.consume(slot)
    l = ctx.cfg.l
    r_hi, r_lo, bit = mask
    r = r_hi.scale(1 << d) + r_lo + bit.scale(1 << (l - 1))
    masked = zs.add_public(1 << (l - 2)) + r
    s_pub = open_share(masked, ctx, MsgKind.S_OPEN)
    msb = s_pub >> U64(l - 1)
    low = s_pub & U64((1 << (l - 1)) - 1)
    w = bit.scale(wrap(U64(1) - U64(2) * msb, l)).add_public(msb)
    y = (w.scale(1 << (l - 1 - d)) - r_hi).add_public(wrap((low >> U64(d)) - const(1 << (l - 2 - d), l), l))
    return y.with_frac(zs.frac - d)


def trio_trunc(zs: TrioShare, d: int, ctx: PartyContext, slot: str = "trunc") -> TrioShare:
    """Truncation on the (P2: m3, P3: -lam3) pair, then one P2 -> P3 message.

    y = (m3 >> d) - (lam3 >> d) = floor(z/2^d) + e, e in {0,1}, except with
    probability about |z|/2^l. The output masks are lam3_y = lam3 >> d and a
    fresh lam2_y, both known before the input, which keeps P1's offline
    corrections valid.
    """
    _check_trunc(zs, d, ctx.cfg.f)
    ctx.consume(slot)
    l = ctx.cfg.l
    frac = zs.frac - d
    sh = U64(d)
    lam2 = prf(ctx.seeds.pair(1, 2), f"{slot}/ly2", zs.shape, l) if ctx.party in (1, 2) else None
    if ctx.party == 1:
        return TrioShare(1, lam2, zs.b >> sh, frac, l)
    if ctx.party == 2:
        a_t = zs.a >> sh
        ctx.send(3, MsgKind.S_OPEN, wrap(a_t + lam2, l))
        ctx.new_round()
        return TrioShare(2, a_t, lam2, frac, l)
    lam3_y = zs.b >> sh
    q = ctx.recv(2, MsgKind.S_OPEN, zs.shape)
    ctx.new_round()
    return TrioShare(3, wrap(q - lam3_y, l), lam3_y, frac, l)


# ---------------------------------------------------------------------------
# protocol-agnostic front ends


def matmul(xs, ys, material, ctx, slot, urev=None):
    if isinstance(xs, AdditiveShare):
        return npc_matmul(xs, ys, material, ctx, slot, urev)
    return trio_matmul(xs, ys, material, ctx, slot)


def trunc(zs, d, material, ctx, slot):
    if isinstance(zs, AdditiveShare):
        return npc_trunc(zs, d, material, ctx, slot)
    return trio_trunc(zs, d, ctx, slot)


def lowrank_linear(xs, us, vs, materials: dict, ctx: PartyContext, skip_trunc: bool = False, prefix: str = "lr"):
    """X (.) U (.) V with either two f-bit truncations or a single 2f-bit one.

    ``materials`` maps "u", "v", "tu", "tv" to this party's offline material
    (the "tu" entry is unused when skipping).
    """
    f = ctx.cfg.f
    if skip_trunc and 3 * f + 2 > ctx.cfg.l:
        raise FractionStateError("ring too narrow to carry 3f fraction bits")
    z = matmul(xs, us, materials.get("u"), ctx, f"{prefix}/u")
    if not skip_trunc:
        z = trunc(z, f, materials.get("tu"), ctx, f"{prefix}/tu")
    z = matmul(z, vs, materials.get("v"), ctx, f"{prefix}/v")
    return trunc(z, z.frac - f, materials.get("tv"), ctx, f"{prefix}/tv")


def square_activation(xs, material, trunc_material, ctx: PartyContext, slot: str = "sq"):
    """Elementwise x^2: one Beaver/Trio elementwise product, then Trunc^f."""
    f = ctx.cfg.f
    if xs.frac != f:
        raise FractionStateError(f"square expects {f} fraction bits, got {xs.frac}")
    if isinstance(xs, AdditiveShare):
        z = npc_product(xs, xs, material, ctx, f"{slot}/mul", "mul")
    else:
        z = trio_product(xs, xs, material, ctx, f"{slot}/mul", "mul")
    return trunc(z, f, trunc_material, ctx, f"{slot}/trunc")


def debug_relu(xs, ctx: PartyContext):
    """INSECURE: opens x, applies ReLU in the clear and reshares it as a public value."""
    if not ctx.allow_insecure:
        from .sharing import InsecureOperationError

        raise InsecureOperationError("debug_relu reveals its input; set allow_insecure to use it")
    log.warning("P%d: debug_relu opens layer %d in the clear (insecure)", ctx.party, ctx.layer)
    l = ctx.cfg.l
    plain = open_share(xs, ctx, MsgKind.DEBUG)
    scheme = "additive" if isinstance(xs, AdditiveShare) else "trio"
    if plain is None:
        plain = np.zeros(xs.shape, U64)
    relu = from_signed(np.maximum(to_signed(plain, l), 0), l)
    return public_share(relu, ctx.party, scheme, xs.frac, l)
