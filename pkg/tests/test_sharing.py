import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import run_parties
from lrmpc.net import MsgKind
from lrmpc.ring import random_ring, wrap
from lrmpc.sharing import (
    AdditiveShare,
    InsecureOperationError,
    SchemeMismatchError,
    SeedSet,
    linear_combine,
    open_share,
    prf,
    prf_bits,
    public_share,
    reconstruct,
    reconstruct_additive,
    reconstruct_trio,
    share_additive,
    share_trio,
)

# chi2.ppf(0.999, 255): 256 cells at significance 0.001
CHI2_CRIT_255 = 330.52


def chi_square(values, cells):
    counts = np.bincount(values.astype(np.int64), minlength=cells)
    expected = len(values) / cells
    return float(((counts - expected) ** 2 / expected).sum())


def test_prf_is_deterministic_and_label_separated():
    a = prf(b"k" * 32, "x", (4,))
    assert (a == prf(b"k" * 32, "x", (4,))).all()
    assert not (a == prf(b"k" * 32, "y", (4,))).all()
    assert not (a == prf(b"j" * 32, "x", (4,))).all()


def test_prf_uniform_at_l8():
    v = prf(b"s" * 32, "u", (100_000,), l=8)
    assert chi_square(v, 256) < CHI2_CRIT_255


def test_prf_bits_range():
    v = prf_bits(b"s" * 32, "b", (1000,), 5)
    assert v.max() < 32 and v.min() >= 0
    assert (prf_bits(b"s" * 32, "b", (3,), 0) == 0).all()


@pytest.mark.parametrize("n", [2, 3, 5])
def test_additive_share_reconstruct(rng, n):
    for l in (64, 8):
        x = random_ring(rng, (10, 10), l)
        shares = share_additive(x, n, rng.bytes(32), l=l)
        assert len(shares) == n
        assert (reconstruct_additive(shares) == x).all()


def test_additive_zero_and_determinism():
    shares = share_additive(np.zeros(3, np.uint64), 3, b"z" * 32)
    assert (reconstruct(shares) == 0).all()
    again = share_additive(np.zeros(3, np.uint64), 3, b"z" * 32)
    assert all((a.value == b.value).all() for a, b in zip(shares, again))


def test_additive_exhaustive_l8_scalars():
    x = np.arange(256, dtype=np.uint64)
    for n in (2, 3):
        assert (reconstruct(share_additive(x, n, b"e" * 32, l=8)) == x).all()


def test_additive_single_share_uniform_l8():
    # 10^5 sharings of the same secret; any one party's share is uniform
    x = np.full(100_000, 77, dtype=np.uint64)
    shares = share_additive(x, 3, b"u" * 32, l=8)
    for s in shares:
        assert chi_square(s.value, 256) < CHI2_CRIT_255


def test_reconstruct_errors():
    shares = share_additive(np.ones(2, np.uint64), 3, b"q" * 32)
    with pytest.raises(ValueError):
        reconstruct_additive(shares[:2] + shares[:1])
    with pytest.raises(ValueError):
        reconstruct_additive([])
    bad = [shares[0], shares[1], AdditiveShare(3, np.zeros(3, np.uint64))]
    with pytest.raises(ValueError):
        reconstruct_additive(bad)
    with pytest.raises(ValueError):
        share_additive(np.ones(2, np.uint64), 1, b"q" * 32)


@given(st.lists(st.integers(0, 2**64 - 1), min_size=1, max_size=8), st.binary(min_size=32, max_size=32))
@settings(max_examples=50)
def test_trio_any_two_reconstruct(vals, master):
    x = np.array(vals, dtype=np.uint64)
    p1, p2, p3 = share_trio(x, SeedSet.derive(master), "x")
    for a, b in ((p1, p2), (p1, p3), (p2, p3), (p3, p2)):
        assert (reconstruct_trio(a, b) == x).all()


def test_trio_exhaustive_l8():
    x = np.arange(256, dtype=np.uint64)
    p1, p2, p3 = share_trio(x, SeedSet.derive(b"t" * 32), "x", l=8)
    assert (reconstruct_trio(p2, p3) == x).all()
    assert (reconstruct_trio(p1, p3) == x).all()


def test_trio_single_share_uniform_l8():
    x = np.full(100_000, 200, dtype=np.uint64)
    p1, p2, p3 = share_trio(x, SeedSet.derive(b"v" * 32), "x", l=8)
    for arr in (p2.a, p3.a, p1.a, p1.b):
        assert chi_square(arr, 256) < CHI2_CRIT_255


def test_trio_same_role_rejected():
    p1, p2, _ = share_trio(np.ones(1, np.uint64), SeedSet.derive(b"r" * 32))
    with pytest.raises(ValueError):
        reconstruct_trio(p2, p2)


def test_seed_view_hides_foreign_pairs():
    s = SeedSet.derive(b"m" * 32, 3)
    v = s.view(2)
    assert set(v.pairs) == {(1, 2), (2, 3)}
    assert v.dealer == b""
    with pytest.raises(KeyError):
        v.pair(1, 3)


@pytest.mark.parametrize("scheme", ["additive", "trio"])
def test_linear_combine_and_public_constant(rng, scheme):
    x = random_ring(rng, (3, 3))
    y = random_ring(rng, (3, 3))
    c = random_ring(rng, (3, 3))
    if scheme == "additive":
        xs, ys = share_additive(x, 3, b"a" * 32, "x"), share_additive(y, 3, b"a" * 32, "y")
    else:
        seeds = SeedSet.derive(b"b" * 32)
        xs, ys = share_trio(x, seeds, "x"), share_trio(y, seeds, "y")
    out = [linear_combine([a, b], [3, -1], c) for a, b in zip(xs, ys)]
    want = wrap(3 * x - y + c)
    assert (reconstruct(out) == want).all()
    neg = [a + (-a) for a in xs]
    assert (reconstruct(neg) == 0).all()


def test_linear_combine_rejects_mixed_schemes():
    a = share_additive(np.ones(1, np.uint64), 3, b"c" * 32)[0]
    t = share_trio(np.ones(1, np.uint64), SeedSet.derive(b"c" * 32))[0]
    with pytest.raises(SchemeMismatchError):
        linear_combine([a, t], [1, 1])
    with pytest.raises(SchemeMismatchError):
        _ = a + t


@pytest.mark.parametrize("scheme", ["additive", "trio"])
def test_public_share_reconstructs(rng, scheme):
    v = random_ring(rng, (2, 2))
    shares = [public_share(v, i, scheme) for i in (1, 2, 3)]
    assert (reconstruct(shares if scheme == "additive" else shares[1:]) == v).all()


@pytest.mark.parametrize("n", [2, 3, 5])
def test_open_additive_one_round(rng, n):
    x = random_ring(rng, (4, 2))
    shares = share_additive(x, n, rng.bytes(32))
    outs, ctxs = run_parties(n, lambda ctx: open_share(shares[ctx.party - 1], ctx))
    assert all((o == x).all() for o in outs)
    assert [c.rounds for c in ctxs] == [1] * n


def test_open_trio_one_round(rng):
    x = random_ring(rng, (4, 2))
    seeds = SeedSet.derive(rng.bytes(32))
    shares = share_trio(x, seeds, "x")
    outs, ctxs = run_parties(3, lambda ctx: open_share(shares[ctx.party - 1], ctx), scheme="trio", topology="trio")
    assert outs[0] is None
    assert (outs[1] == x).all() and (outs[2] == x).all()
    assert ctxs[1].rounds == ctxs[2].rounds == 1


def test_unmasked_open_refused():
    shares = share_additive(np.ones(2, np.uint64), 2, b"d" * 32)

    def fn(ctx):
        return open_share(shares[ctx.party - 1], ctx, MsgKind.DEBUG)

    with pytest.raises(InsecureOperationError):
        run_parties(2, fn, timeout=2.0)
    outs, ctxs = run_parties(2, fn, allow_insecure=True)
    assert (outs[0] == 1).all()
    assert ctxs[0].insecure_ops
