"""Learned per-channel symbol densities and entropy-coded symbol streams.

Each channel owns a monotone cumulative c(x) built from four small matrix
stages: u = softplus(M) @ x + b followed by x <- u + tanh(a) * tanh(u) on all
but the last stage, then a logistic squash. Positive matrices keep c strictly
increasing, so p(q) = c(q + 1/2) - c(q - 1/2) is a proper discrete density.
Integer tables quantize that density to 16-bit frequencies for the range
coder; values past the table bound escape to a raw 16-bit bypass.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Var
from .rangecoder import TOTAL, RangeDecoder, RangeEncoder

_FILTERS = (1, 3, 3, 3, 1)
LIKELIHOOD_FLOOR = 1e-9
_LOG2 = math.log(2.0)


class FactorizedDensity:
    """Independent learned density per latent channel."""

    def __init__(self, name: str, channels: int, init_scale: float = 10.0) -> None:
        self.name = name
        self.channels = channels
        stages = len(_FILTERS) - 1
        scale = init_scale ** (1.0 / stages)
        self.matrices: list[Param] = []
        self.biases: list[Param] = []
        self.factors: list[Param] = []
        for i in range(stages):
            f_in, f_out = _FILTERS[i], _FILTERS[i + 1]
            init = math.log(math.expm1(1.0 / (scale * f_out)))
            self.matrices.append(Param(f"{name}.matrix{i}",
                                       np.full((channels, f_out, f_in), init)))
            self.biases.append(Param(f"{name}.bias{i}", np.zeros((channels, f_out, 1))))
            if i < stages - 1:
                self.factors.append(Param(f"{name}.factor{i}",
                                          np.zeros((channels, f_out, 1))))

    def params(self) -> list[Param]:
        return list(self.matrices) + list(self.biases) + list(self.factors)

    def cumulative(self, x, tape=None) -> Var:
        """c(x) for an (N, C) batch of per-channel values."""
        is_var = isinstance(x, Var)
        v = x if is_var else Var(np.asarray(x, dtype=np.float64))
        if v.data.ndim != 2 or v.data.shape[1] != self.channels:
            raise ValueError(f"expected (N, {self.channels}) input, got {v.data.shape}")
        n = v.data.shape[0]
        h = ad.reshape(ad.transpose(v, (1, 0)), (self.channels, 1, n))

        def leaf(p):
            return tape.leaf(p) if tape is not None else Var(p.data)

        for i, mat in enumerate(self.matrices):
            u = ad.bmm(ad.softplus(leaf(mat)), h) + leaf(self.biases[i])
            if i < len(self.matrices) - 1:
                h = u + ad.mul(ad.tanh(leaf(self.factors[i])), ad.tanh(u))
            else:
                h = u
        c = ad.sigmoid(ad.transpose(ad.reshape(h, (self.channels, n)), (1, 0)))
        return c

    def likelihood(self, x, tape=None) -> Var:
        """p(x) = c(x + 1/2) - c(x - 1/2), floored at 1e-9."""
        is_var = isinstance(x, Var)
        v = x if is_var else Var(np.asarray(x, dtype=np.float64))
        p = ad.sub(self.cumulative(v + 0.5, tape), self.cumulative(v + (-0.5), tape))
        return ad.clamp_min(p, LIKELIHOOD_FLOOR)

    def channel_bounds(self, tail_mass: float = 1e-4, cap: int = 1024) -> np.ndarray:
        """Smallest B per channel with mass outside [-B, B] below tail_mass."""
        cand = np.arange(cap + 1, dtype=np.float64)
        hi = self.cumulative(np.repeat((cand + 0.5)[:, None], self.channels, axis=1)).data
        lo = self.cumulative(np.repeat((-cand - 0.5)[:, None], self.channels, axis=1)).data
        outside = lo + (1.0 - hi)  # (cap+1, C)
        ok = outside < tail_mass
        bounds = np.where(ok.any(axis=0), np.argmax(ok, axis=0), cap)
        return bounds.astype(np.int64)

    def pmf(self, channel: int, bound: int) -> np.ndarray:
        """p(q) for q in [-B, B] plus the escape tail mass as the last entry."""
        edges = np.arange(-bound, bound + 2, dtype=np.float64) - 0.5
        x = np.zeros((len(edges), self.channels))
        x[:, channel] = edges
        c = self.cumulative(x).data[:, channel]
        core = np.maximum(np.diff(c), LIKELIHOOD_FLOOR)
        tail = max(c[0] + (1.0 - c[-1]), LIKELIHOOD_FLOOR)
        return np.concatenate([core, [tail]])


def quantize(x, mode: str, rng: Optional[np.random.Generator] = None):
    """'noise': add uniform(-1/2, 1/2) (differentiable proxy); 'round': ties to even."""
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantization needs an rng")
        v = x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))
        return v + rng.uniform(-0.5, 0.5, size=v.data.shape)
    if mode == "round":
        data = x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)
        return np.rint(data)
    raise ValueError(f"unknown quantization mode {mode!r}")


def estimate_rate_bpp(likelihoods, n_in: int):
    """Total information content in bits, -sum(log2 p), normalized by n_in."""
    if n_in <= 0:
        raise ValueError("n_in must be positive")
    if isinstance(likelihoods, Var):
        return ad.mul(ad.vsum(ad.log(likelihoods)), -1.0 / (_LOG2 * n_in))
    arr = np.asarray(likelihoods, dtype=np.float64)
    return float(-np.log2(arr).sum() / n_in)


class CdfTable:
    """16-bit integer CDF over symbols [-B..B] plus a final escape slot."""

    __slots__ = ("bound", "cum")

    def __init__(self, bound: int, cum: np.ndarray) -> None:
        self.bound = int(bound)
        self.cum = np.asarray(cum, dtype=np.int64)
        n = 2 * self.bound + 2
        if len(self.cum) != n + 1 or self.cum[0] != 0 or self.cum[-1] != TOTAL:
            raise ValueError("cumulative table must span [0, 65536]")
        if not (np.diff(self.cum) > 0).all():
            raise ValueError("cumulative table must be strictly increasing")

    @property
    def escape_index(self) -> int:
        return 2 * self.bound + 1

    def freq(self, sym: int) -> int:
        return int(self.cum[sym + 1] - self.cum[sym])

    def symbol_of(self, value: int) -> int:
        if -self.bound <= value <= self.bound:
            return value + self.bound
        return self.escape_index

    def find(self, target: int) -> int:
        return int(np.searchsorted(self.cum, target, side="right")) - 1

    def bits_for(self, value: int) -> float:
        sym = self.symbol_of(value)
        bits = -math.log2(self.freq(sym) / TOTAL)
        if sym == self.escape_index:
            bits += 16.0
        return bits


def build_cdf(pmf: np.ndarray, bound: int) -> CdfTable:
    """Largest-remainder quantization of a pmf to frequencies summing to 65536.

    Every symbol keeps frequency >= 1 so the coder can represent it.
    """
    p = np.asarray(pmf, dtype=np.float64)
    n = len(p)
    if n != 2 * bound + 2:
        raise ValueError(f"pmf length {n} does not match bound {bound}")
    if (p < 0).any() or p.sum() <= 0:
        raise ValueError("pmf must be nonnegative with positive mass")
    budget = TOTAL - n
    scaled = p / p.sum() * budget
    base = np.floor(scaled).astype(np.int64)
    short = budget - int(base.sum())
    if short:
        order = np.argsort(-(scaled - base), kind="stable")
        base[order[:short]] += 1
    freqs = base + 1
    cum = np.concatenate([[0], np.cumsum(freqs)])
    return CdfTable(bound, cum)


def _tables_for(values, tables) -> Sequence[CdfTable]:
    if isinstance(tables, CdfTable):
        return [tables] * len(values)
    tables = list(tables)
    if len(tables) != len(values):
        raise ValueError("need one table per value")
    return tables


def range_encode(values, tables) -> bytes:
    """Entropy-code integer values, each under its own table."""
    values = np.asarray(values, dtype=np.int64).ravel()
    tabs = _tables_for(values, tables)
    enc = RangeEncoder()
    for v, t in zip(values, tabs):
        sym = t.symbol_of(int(v))
        enc.encode(int(t.cum[sym]), t.freq(sym))
        if sym == t.escape_index:
            if not -32768 <= v <= 32767:
                raise ValueError(f"value {v} exceeds the 16-bit escape range")
            u = int(v) + 32768
            enc.encode_bypass_byte(u >> 8)
            enc.encode_bypass_byte(u & 0xFF)
    return enc.finish()


def range_decode(data: bytes, tables, count: Optional[int] = None) -> np.ndarray:
    """Invert range_encode; `count` defaults to len(tables) when it is a list."""
    if isinstance(tables, CdfTable):
        if count is None:
            raise ValueError("count is required with a single shared table")
        tabs = [tables] * count
    else:
        tabs = list(tables)
        if count is not None and count != len(tabs):
            raise ValueError("count disagrees with table list length")
    dec = RangeDecoder(data)
    out = np.empty(len(tabs), dtype=np.int64)
    for i, t in enumerate(tabs):
        sym = t.find(dec.decode_target())
        dec.consume(int(t.cum[sym]), t.freq(sym))
        if sym == t.escape_index:
            u = (dec.decode_bypass_byte() << 8) | dec.decode_bypass_byte()
            out[i] = u - 32768
        else:
            out[i] = sym - t.bound
    return out


def stream_bits_estimate(values, tables) -> float:
    """Ideal code length under the integer tables, including escape payloads."""
    values = np.asarray(values, dtype=np.int64).ravel()
    return float(sum(t.bits_for(int(v)) for v, t in zip(values, _tables_for(values, tables))))
