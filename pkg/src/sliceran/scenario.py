"""Multi-BS hexagonal layout, subscriber mobility and BS association.

Subscribers move in straight lines and bounce specularly off the arena
walls. Positions/velocities are kept as struct-of-arrays so a whole
population advances in a handful of vectorised operations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ConfigurationError


@dataclass(frozen=True)
class BaseStation:
    id: int
    x: float
    y: float

    @property
    def position(self):
        return (self.x, self.y)


@dataclass
class NeighborGraph:
    """Per-BS neighbor sets (self always included) plus a dense mask."""

    neighbors: list[np.ndarray]
    mask: np.ndarray  # (M, M) bool; mask[m, j] == (j in D_m)


@dataclass
class Subscribers:
    """Struct-of-arrays subscriber population."""

    sub_id: np.ndarray     # (n,) int64, globally unique
    slice_id: np.ndarray   # (n,) int64 in [0, N)
    pos: np.ndarray        # (n, 2) meters
    direction: np.ndarray  # (n, 2) unit vectors
    speed: np.ndarray      # (n,) m/s

    def __len__(self):
        return self.sub_id.size

    def copy(self):
        return Subscribers(self.sub_id.copy(), self.slice_id.copy(),
                           self.pos.copy(), self.direction.copy(),
                           self.speed.copy())


def build_hex_layout(rings, inter_site_distance, arena):
    """Hexagonal lattice of 1 + 3*rings*(rings+1) BSs centered in the arena.

    Axial coordinates (q, r) with hex distance <= rings; x = d*(q + r/2),
    y = d*sqrt(3)/2*r. Raises if any site would fall outside the arena.
    """
    if rings < 0:
        raise ConfigurationError("rings must be >= 0")
    w, h = float(arena[0]), float(arena[1])
    d = float(inter_site_distance)
    cx, cy = w / 2.0, h / 2.0
    sites = []
    for r in range(-rings, rings + 1):
        for q in range(-rings, rings + 1):
            if max(abs(q), abs(r), abs(q + r)) > rings:
                continue
            sites.append((cx + d * (q + r / 2.0), cy + d * (math.sqrt(3) / 2.0) * r))
    # stable id order: bottom-to-top rows, left-to-right within a row
    sites.sort(key=lambda p: (round(p[1], 9), round(p[0], 9)))
    for x, y in sites:
        if not (0.0 <= x <= w and 0.0 <= y <= h):
            raise ConfigurationError(
                f"hex layout with {rings} rings at spacing {d} m does not fit "
                f"a {w} x {h} m arena")
    return [BaseStation(i, x, y) for i, (x, y) in enumerate(sites)]


def bs_positions(bss):
    return np.array([[b.x, b.y] for b in bss], dtype=np.float64)


def build_neighbor_graph(bss, radius):
    """D_m = all BSs within `radius` of BS m (Euclidean), self included."""
    if radius <= 0:
        raise ConfigurationError("neighbor radius must be positive")
    p = bs_positions(bss)
    d2 = ((p[:, None, :] - p[None, :, :]) ** 2).sum(-1)
    mask = d2 <= radius * radius  # diagonal is 0 <= r^2, so self included
    neighbors = [np.flatnonzero(mask[m]) for m in range(len(bss))]
    return NeighborGraph(neighbors=neighbors, mask=mask)


def spawn_subscribers(counts, speed_ranges, arena, rng, corner_fraction=0.25):
    """Place per-slice populations in the four arena corners.

    Each slice's subscribers are dealt round-robin onto the corners and
    drawn uniformly inside a corner square of side corner_fraction *
    min(arena); directions are uniform on the circle, speeds uniform in
    the slice's [min, max].
    """
    w, h = float(arena[0]), float(arena[1])
    side = corner_fraction * min(w, h)
    anchors = np.array([[0.0, 0.0], [w - side, 0.0], [0.0, h - side],
                        [w - side, h - side]])
    total = int(sum(counts))
    pos = np.empty((total, 2))
    direction = np.empty((total, 2))
    speed = np.empty(total)
    slice_id = np.empty(total, dtype=np.int64)
    i = 0
    for n, (count, (lo, hi)) in enumerate(zip(counts, speed_ranges)):
        count = int(count)
        if count == 0:
            continue
        corner = anchors[np.arange(count) % 4]
        pos[i:i + count] = corner + rng.random((count, 2)) * side
        theta = rng.random(count) * 2.0 * np.pi
        direction[i:i + count, 0] = np.cos(theta)
        direction[i:i + count, 1] = np.sin(theta)
        speed[i:i + count] = rng.uniform(lo, hi, size=count)
        slice_id[i:i + count] = n
        i += count
    return Subscribers(sub_id=np.arange(total, dtype=np.int64),
                       slice_id=slice_id, pos=pos, direction=direction,
                       speed=speed)


def advance_mobility(subs, dt, arena):
    """Advance positions by speed*dt with specular reflection at the walls.

    Implemented by unfolding: the raw displaced coordinate is folded into
    [0, L] with period 2L (triangle map), which handles any number of
    bounces, including corners, in one vectorised step. Speed and |dir|
    are exactly preserved; only direction signs flip.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    raw = subs.pos + subs.direction * (subs.speed * dt)[:, None]
    size = np.array(arena, dtype=np.float64)
    z = np.mod(raw, 2.0 * size)
    over = z > size
    subs.pos = np.where(over, 2.0 * size - z, z)
    subs.direction = np.where(over, -subs.direction, subs.direction)
    return subs


def associate(subs, bss):
    """Nearest-BS association; equidistant ties go to the lowest BS id."""
    p = bs_positions(bss)
    d2 = ((subs.pos[:, None, :] - p[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1)  # argmin returns the first (lowest id) tie
