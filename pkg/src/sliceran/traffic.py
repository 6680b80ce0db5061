"""Per-subscriber packet arrival processes and per-BS demand vectors.

Each subscriber owns an independent Philox stream keyed by (run seed,
subscriber id), so traffic is reproducible regardless of evaluation
order. Arrival processes are renewal processes that run continuously
across scheduling periods: the residual inter-arrival at a period
boundary carries over.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import (ChoiceSize, ConfigurationError, ConstantSize,
                     ExponentialDist, TruncParetoSize, TruncParetoTimeDist,
                     UniformDist)


def truncated_pareto_lower(exponent, mean, maximum):
    """Solve the Pareto scale L so the [L, max]-truncated mean hits `mean`.

    The table-style parameterisation gives (exponent, mean, max) but not
    the scale; the truncated mean is monotone in L, so bisection works on
    (0, max).
    """
    a, h = float(exponent), float(maximum)
    if not 0 < mean < h:
        raise ConfigurationError(
            f"truncated Pareto mean {mean} must lie in (0, max={h})")

    def trunc_mean(lo):
        # E[X | L=lo] = a lo^a (h^{1-a} - lo^{1-a}) / ((1-a) (1-(lo/h)^a))
        num = a * lo ** a * (h ** (1 - a) - lo ** (1 - a))
        den = (1 - a) * (1 - (lo / h) ** a)
        return num / den

    lo, hi = 1e-12 * h, h * (1 - 1e-12)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if trunc_mean(mid) < mean:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def truncated_pareto_ppf(u, exponent, lower, maximum):
    """Inverse CDF of the truncated Pareto on [lower, maximum]."""
    a = exponent
    tail = 1.0 - (lower / maximum) ** a
    return lower * (1.0 - u * tail) ** (-1.0 / a)


@dataclass
class SliceSampler:
    """Inverse-CDF samplers (uniform -> value) for one slice's traffic."""

    interarrival_s: callable
    size_bits: callable
    mean_interarrival_s: float


def _interarrival_sampler(spec):
    if isinstance(spec, UniformDist):
        lo, hi = spec.low_ms * 1e-3, spec.high_ms * 1e-3
        return (lambda u: lo + u * (hi - lo)), 0.5 * (lo + hi)
    if isinstance(spec, ExponentialDist):
        mean = spec.mean_ms * 1e-3
        return (lambda u: -mean * np.log1p(-u)), mean
    if isinstance(spec, TruncParetoTimeDist):
        mean = spec.mean_ms * 1e-3
        lower = truncated_pareto_lower(spec.exponent, mean, spec.max_ms * 1e-3)
        a, h = spec.exponent, spec.max_ms * 1e-3
        return (lambda u: truncated_pareto_ppf(u, a, lower, h)), mean
    raise ConfigurationError(f"unsupported inter-arrival spec {spec!r}")


def _size_sampler(spec):
    if isinstance(spec, ConstantSize):
        bits = spec.bytes * 8.0
        return lambda u: np.full(np.shape(u), bits)
    if isinstance(spec, TruncParetoSize):
        lower = truncated_pareto_lower(spec.exponent, spec.mean_bytes,
                                       spec.max_bytes)
        a, h = spec.exponent, spec.max_bytes
        return lambda u: truncated_pareto_ppf(u, a, lower, h) * 8.0
    if isinstance(spec, ChoiceSize):
        bits = np.asarray(spec.megabytes, dtype=np.float64) * 8e6
        k = bits.size
        return lambda u: bits[np.minimum((np.asarray(u) * k).astype(np.int64), k - 1)]
    raise ConfigurationError(f"unsupported packet size spec {spec!r}")


def build_samplers(traffic_cfg):
    out = []
    for sl in traffic_cfg.slices():
        ia, mean = _interarrival_sampler(sl.interarrival)
        out.append(SliceSampler(interarrival_s=ia,
                                size_bits=_size_sampler(sl.size),
                                mean_interarrival_s=mean))
    return out


def sample_interarrival(sampler, rng, n=None):
    """Draw inter-arrival seconds (scalar, or vector of n)."""
    u = rng.random() if n is None else rng.random(n)
    return sampler.interarrival_s(u)


def sample_packet_size(sampler, rng, n=None):
    """Draw packet sizes in bits (scalar, or vector of n)."""
    u = rng.random() if n is None else rng.random(n)
    return sampler.size_bits(u)


@dataclass
class PacketBatch:
    """Flat arrays of packets generated for one period (sorted by time)."""

    time: np.ndarray      # absolute arrival seconds
    bits: np.ndarray
    owner: np.ndarray     # subscriber index into the population
    slice_id: np.ndarray

    @classmethod
    def empty(cls):
        z = np.empty(0)
        return cls(z, z.copy(), np.empty(0, np.int64), np.empty(0, np.int64))


class TrafficSource:
    """Continuous arrival processes for a whole subscriber population.

    Each subscriber's renewal process is materialised ahead of time in
    blocks of roughly eight periods (gap uniforms then size uniforms per
    block, from the subscriber's own stream), so generate() mostly just
    slices windows out of the per-subscriber buffers.
    """

    def __init__(self, samplers, slice_ids, seed):
        self.samplers = samplers
        self.slice_ids = np.asarray(slice_ids, dtype=np.int64)
        n = self.slice_ids.size
        self._gens = [np.random.Generator(np.random.Philox(
            key=np.array([seed & 0xFFFFFFFFFFFFFFFF, sid], dtype=np.uint64)))
            for sid in range(n)]
        self._buf_time = [np.empty(0)] * n
        self._buf_bits = [np.empty(0)] * n
        self._pos = np.zeros(n, np.int64)
        self._last_time = np.zeros(n)
        self._block = np.empty(n, np.int64)
        for i in range(n):
            s = samplers[self.slice_ids[i]]
            self._block[i] = max(64, int(8.0 / s.mean_interarrival_s))
            self._refill(i)

    def _refill(self, i):
        gen = self._gens[i]
        s = self.samplers[self.slice_ids[i]]
        gaps = s.interarrival_s(gen.random(self._block[i]))
        times = self._last_time[i] + np.cumsum(gaps)
        bits = s.size_bits(gen.random(self._block[i]))
        keep = self._buf_time[i][self._pos[i]:]
        keep_b = self._buf_bits[i][self._pos[i]:]
        self._buf_time[i] = np.concatenate((keep, times))
        self._buf_bits[i] = np.concatenate((keep_b, bits))
        self._pos[i] = 0
        self._last_time[i] = times[-1]

    @property
    def next_arrival(self):
        """Absolute time of each subscriber's next (ungenerated) packet."""
        return np.array([self._buf_time[i][self._pos[i]]
                         for i in range(len(self._gens))])

    def state_snapshot(self):
        return {"time": [b.copy() for b in self._buf_time],
                "bits": [b.copy() for b in self._buf_bits],
                "pos": self._pos.copy(), "last": self._last_time.copy(),
                "gen": [g.bit_generator.state for g in self._gens]}

    def state_restore(self, snap):
        self._buf_time = [b.copy() for b in snap["time"]]
        self._buf_bits = [b.copy() for b in snap["bits"]]
        self._pos = snap["pos"].copy()
        self._last_time = snap["last"].copy()
        for g, st in zip(self._gens, snap["gen"]):
            g.bit_generator.state = st

    def generate(self, t0, t1):
        """All packets with arrival time in [t0, t1), advancing the state."""
        times, bits, owners, counts = [], [], [], []
        for i in range(len(self._gens)):
            while self._buf_time[i][-1] < t1:
                self._refill(i)
            buf = self._buf_time[i]
            lo = self._pos[i]
            hi = int(np.searchsorted(buf, t1, side="left"))
            if hi == lo:
                continue
            times.append(buf[lo:hi])
            bits.append(self._buf_bits[i][lo:hi])
            owners.append(i)
            counts.append(hi - lo)
            self._pos[i] = hi
        if not times:
            return PacketBatch.empty()
        time = np.concatenate(times)
        owner = np.repeat(np.array(owners, np.int64), np.array(counts))
        order = np.argsort(time, kind="stable")
        owner = owner[order]
        return PacketBatch(time=time[order],
                           bits=np.concatenate(bits)[order],
                           owner=owner,
                           slice_id=self.slice_ids[owner])


def demand_matrix(batch, association, n_bs, normalizers):
    """d[m, n] = bits arrived this period for slice n at BS m / normalizer_n."""
    norm = np.asarray(normalizers, dtype=np.float64)
    if (norm <= 0).any():
        raise ConfigurationError("demand normalizers must be positive")
    d = np.zeros((n_bs, norm.size))
    if batch.time.size:
        bs = association[batch.owner]
        np.add.at(d, (bs, batch.slice_id), batch.bits)
    return d / norm
