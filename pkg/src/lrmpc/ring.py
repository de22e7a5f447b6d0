"""Fixed-point arithmetic over Z_{2^l} on numpy uint64 arrays.

Ring elements are stored as ``np.uint64``; numpy integer arithmetic wraps
modulo 2^64, and for l < 64 every operation masks back down to l bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

U64 = np.uint64


class EncodingOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class FixedPointConfig:
    l: int = 64
    f: int = 5

    def __post_init__(self):
        if not (1 <= self.f and 3 * self.f + 2 <= self.l <= 64):
            raise ValueError(f"invalid fixed-point config l={self.l} f={self.f}")

    @property
    def mask(self) -> np.uint64:
        return U64((1 << self.l) - 1)

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.f

    @property
    def element_bytes(self) -> int:
        return (self.l + 7) // 8


DEFAULT_CFG = FixedPointConfig()


def const(c: int, l: int = 64) -> np.uint64:
    """Embed a (possibly negative) python int into the ring as a numpy scalar."""
    return U64(int(c) % (1 << l))


def wrap(a, l: int = 64) -> np.ndarray:
    a = np.asarray(a, dtype=U64)
    if l == 64:
        return a
    return a & U64((1 << l) - 1)


def ring_add(a, b, l: int = 64):
    return wrap(np.add(a, b, dtype=U64), l)


def ring_sub(a, b, l: int = 64):
    return wrap(np.subtract(a, b, dtype=U64), l)


def ring_neg(a, l: int = 64):
    return wrap(np.negative(np.asarray(a, dtype=U64)), l)


def ring_mul(a, b, l: int = 64):
    return wrap(np.multiply(a, b, dtype=U64), l)


def ring_matmul(a, b, l: int = 64) -> np.ndarray:
    a = np.asarray(a, dtype=U64)
    b = np.asarray(b, dtype=U64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return wrap(a @ b, l)


def to_signed(t, l: int = 64) -> np.ndarray:
    """Read ring words as signed l-bit two's complement (int64)."""
    t = wrap(t, l)
    if l == 64:
        return t.view(np.int64)
    s = t.astype(np.int64)
    return np.where(s >= (1 << (l - 1)), s - (1 << l), s)


def from_signed(s, l: int = 64) -> np.ndarray:
    return wrap(np.asarray(s, dtype=np.int64).astype(U64), l)


def encode_fixed(x, cfg: FixedPointConfig = DEFAULT_CFG) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise EncodingOverflowError(f"non-finite value at index {tuple(int(i) for i in bad)}")
    limit = 2.0 ** (cfg.l - 2 - cfg.f)
    over = np.abs(x) >= limit
    if over.any():
        bad = tuple(int(i) for i in np.argwhere(over)[0])
        raise EncodingOverflowError(
            f"value {x[bad]!r} at index {bad} outside sign-safe range |x| < 2^{cfg.l - 2 - cfg.f}"
        )
    # round half away from zero
    scaled = np.sign(x) * np.floor(np.abs(x) * 2.0**cfg.f + 0.5)
    return from_signed(scaled.astype(np.int64), cfg.l)


def decode_fixed(t, cfg: FixedPointConfig = DEFAULT_CFG, frac: int | None = None) -> np.ndarray:
    frac = cfg.f if frac is None else frac
    return to_signed(t, cfg.l).astype(np.float64) / 2.0**frac


def random_ring(rng: np.random.Generator, shape, l: int = 64) -> np.ndarray:
    return wrap(rng.integers(0, 2**64, size=shape, dtype=U64, endpoint=False), l)


# ---------------------------------------------------------------------------
# convolution lowering


@dataclass(frozen=True)
class ConvShape:
    b: int
    h: int
    w: int
    i: int
    o: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError(f"unsupported kernel size {self.kernel}")
        if self.h_out < 1 or self.w_out < 1:
            raise ValueError("convolution produces empty output")

    @property
    def h_out(self) -> int:
        return (self.h + 2 * self.pad - self.kernel) // self.stride + 1

    @property
    def w_out(self) -> int:
        return (self.w + 2 * self.pad - self.kernel) // self.stride + 1

    @property
    def rows(self) -> int:
        return self.b * self.h_out * self.w_out

    @property
    def cols(self) -> int:
        return self.kernel * self.kernel * self.i


def im2col(x: np.ndarray, kernel: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Lower an NHWC tensor to a patch matrix.

    Row ``(n, y, x)`` (C-order over batch, output row, output column) holds the
    receptive field of that output pixel, flattened in ``(ky, kx, c)`` order, so
    a ``(k, k, i, o)`` kernel reshaped C-order to ``(k*k*i, o)`` gives
    ``conv(x, W) == im2col(x) @ W.reshape(-1, o)``. Works for both ring words
    and floats since it only gathers elements.
    """
    if kernel not in (1, 3):
        raise ValueError(f"unsupported kernel size {kernel}")
    if x.ndim != 4:
        raise ValueError(f"expected NHWC input, got shape {x.shape}")
    b, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    cols = np.empty((b, ho, wo, kernel, kernel, c), dtype=x.dtype)
    for ky in range(kernel):
        for kx in range(kernel):
            cols[:, :, :, ky, kx, :] = x[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :]
    return cols.reshape(b * ho * wo, kernel * kernel * c)
