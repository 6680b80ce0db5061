"""The multi-agent environment: one allocation agent per base station.

Observations are demand pairs o_m = (d_m previous period, d_m current
period). An action is an integer composition (c_1..c_N) of the U
bandwidth units, each slice getting at least one unit; the allocation
chosen at period t serves the traffic that arrives during period t+1,
so agents act on observed demand history, not on the arrivals they are
about to serve.

step() advances mobility, re-associates subscribers (counting inbound
handovers), generates the next period's packets, schedules all base
stations and returns per-BS rewards with the chained observations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import radio, scenario, traffic
from .config import ConfigurationError, N_SLICES, RunConfig


# -- action codec --------------------------------------------------------

def action_count(units, n_slices=N_SLICES):
    """Number of compositions of `units` into n_slices parts, each >= 1."""
    if n_slices < 1 or units < n_slices:
        raise ConfigurationError(
            f"{units} units cannot give every one of {n_slices} slices a unit")
    return math.comb(units - 1, n_slices - 1)


def decode_action(index, units, n_slices=N_SLICES):
    """index -> composition, lexicographic order; 0 -> (1, 1, .., U-N+1)."""
    total = action_count(units, n_slices)
    if not 0 <= index < total:
        raise ValueError(f"action index {index} outside [0, {total})")
    out = []
    u = units
    idx = int(index)
    for parts_left in range(n_slices, 1, -1):
        c = 1
        while True:
            block = math.comb(u - c - 1, parts_left - 2)
            if idx < block:
                break
            idx -= block
            c += 1
        out.append(c)
        u -= c
    out.append(u)
    return tuple(out)


def encode_action(comp, units, n_slices=N_SLICES):
    comp = tuple(int(c) for c in comp)
    if len(comp) != n_slices or any(c < 1 for c in comp) or sum(comp) != units:
        raise ValueError(f"{comp} is not a valid composition of {units}")
    idx = 0
    u = units
    for i in range(n_slices - 1):
        for c in range(1, comp[i]):
            idx += math.comb(u - c - 1, n_slices - i - 2)
        u -= comp[i]
    return idx


def all_actions(units, n_slices=N_SLICES):
    """(A, N) array of every composition, in index order."""
    return np.array([decode_action(i, units, n_slices)
                     for i in range(action_count(units, n_slices))],
                    dtype=np.int64)


def hard_slicing_action(units, n_slices=N_SLICES):
    """Static equal split; leftover units go to the lowest slice indices."""
    base, rem = divmod(units, n_slices)
    return tuple(base + (1 if i < rem else 0) for i in range(n_slices))


# -- utility and reward ----------------------------------------------------

def compute_utility(se, ssr, alpha, beta):
    """J = alpha * SE + sum_n beta_n * SSR_n (vectorised over BSs)."""
    return alpha * np.asarray(se) + np.asarray(ssr) @ np.asarray(beta)


def reward_value(utility, mean_ssr, c1, c2, c3):
    """Two-branch reward, clipped into [0, 1]; returns (reward, clipped?)."""
    r = utility / c1 if mean_ssr >= c3 else mean_ssr / c2
    clipped = r < 0.0 or r > 1.0
    return min(max(r, 0.0), 1.0), clipped


@dataclass
class StepResult:
    obs: np.ndarray        # (M, 2, N) — rows (d previous, d current)
    rewards: np.ndarray    # (M,)
    utilities: np.ndarray  # (M,)
    metrics: radio.PeriodMetrics
    handovers: np.ndarray  # (M,) inbound association changes
    units: np.ndarray      # (M, N) the allocation that was applied


class SliceEnv:
    """Scenario + traffic + radio wired into a joint-action step loop."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        self.n_bs = cfg.n_bs()
        self.units = cfg.units()
        self.n_actions = action_count(self.units)
        self.bss = scenario.build_hex_layout(cfg.scenario.rings,
                                             cfg.scenario.inter_site_distance,
                                             cfg.scenario.arena)
        self.bs_pos = scenario.bs_positions(self.bss)
        radius = cfg.scenario.neighbor_radius_factor * cfg.scenario.inter_site_distance
        self.graph = scenario.build_neighbor_graph(self.bss, radius)
        self.samplers = traffic.build_samplers(cfg.traffic)
        self.normalizers = np.asarray(cfg.demand_normalizers())
        self.period_s = cfg.traffic.period
        self.hard_action = hard_slicing_action(self.units)
        self.clip_count = 0
        self.period = -1
        self._subs = None

    # -- lifecycle -------------------------------------------------------
    def reset(self, seed=None):
        """Fresh scenario and RNG streams; returns (M, 2, N) observations.

        The pre-history demand d^{-1} is all zeros. Period 0 runs under
        hard slicing purely to bootstrap d^0 and the queues; its metrics
        are not reported.
        """
        cfg = self.cfg
        if seed is not None:
            cfg.run.seed = int(seed)
        root = np.random.SeedSequence(cfg.run.seed)
        s_spawn, s_radio = root.spawn(2)
        rng = np.random.default_rng(s_spawn)
        self._subs = scenario.spawn_subscribers(
            cfg.scenario.counts, cfg.scenario.speeds, cfg.scenario.arena, rng,
            corner_fraction=cfg.scenario.corner_fraction)
        self._traffic = traffic.TrafficSource(self.samplers,
                                              self._subs.slice_id,
                                              cfg.run.seed)
        budget = radio.LinkBudget(
            tx_power_dbm=cfg.radio.tx_power_dbm,
            noise_dbm_hz=cfg.radio.noise_dbm_hz,
            pathloss_intercept_db=cfg.radio.pathloss_intercept_db,
            pathloss_exponent_db=cfg.radio.pathloss_exponent_db,
            min_distance_m=cfg.radio.min_distance_m,
            rayleigh=cfg.radio.rayleigh,
            shadowing_sigma_db=cfg.radio.shadowing_sigma_db)
        self._radio = radio.RadioSimulator(
            budget, cfg.sla_rates(), cfg.sla_latencies(), cfg.radio.slot_s,
            cfg.radio.slots_per_period, cfg.bandwidth_hz(), cfg.delta_hz(),
            self.n_bs, cfg.run.seed)
        self.clip_count = 0
        self.period = 0
        self.assoc = scenario.associate(self._subs, self.bss)
        batch = self._traffic.generate(0.0, self.period_s)
        self.d_cur = traffic.demand_matrix(batch, self.assoc, self.n_bs,
                                           self.normalizers)
        self.d_prev = np.zeros_like(self.d_cur)
        gains = self._radio.user_gains(self._subs.pos, self.assoc, self.bs_pos, 0)
        units = np.tile(self.hard_action, (self.n_bs, 1))
        self._radio.run_period(0, units, batch, self.assoc,
                               self._subs.slice_id, gains, self._subs.sub_id)
        return self.observations()

    def observations(self):
        return np.stack([self.d_prev, self.d_cur], axis=1)

    def _units_matrix(self, joint_action):
        arr = np.asarray(joint_action, dtype=np.int64)
        if arr.shape == (self.n_bs,):  # action indices
            arr = np.array([decode_action(int(a), self.units) for a in arr],
                           dtype=np.int64)
        if arr.shape != (self.n_bs, N_SLICES):
            raise ValueError(f"joint action must be ({self.n_bs},) indices or "
                             f"({self.n_bs}, {N_SLICES}) compositions")
        if (arr < 1).any() or (arr.sum(axis=1) != self.units).any():
            raise ValueError("every BS must allocate all units, >= 1 per slice")
        return arr

    def step(self, joint_action):
        """Apply one allocation per BS to the next period."""
        if self.period < 0:
            raise RuntimeError("call reset() before step()")
        units = self._units_matrix(joint_action)
        self.period += 1
        t0 = self.period * self.period_s
        scenario.advance_mobility(self._subs, self.period_s,
                                  self.cfg.scenario.arena)
        new_assoc = scenario.associate(self._subs, self.bss)
        moved = new_assoc != self.assoc
        handovers = np.bincount(new_assoc[moved], minlength=self.n_bs)
        self.assoc = new_assoc
        batch = self._traffic.generate(t0, t0 + self.period_s)
        d_new = traffic.demand_matrix(batch, self.assoc, self.n_bs,
                                      self.normalizers)
        gains = self._radio.user_gains(self._subs.pos, self.assoc, self.bs_pos,
                                       self.period)
        metrics = self._radio.run_period(self.period, units, batch, self.assoc,
                                         self._subs.slice_id, gains,
                                         self._subs.sub_id)
        env_cfg = self.cfg.env
        utilities = compute_utility(metrics.se, metrics.ssr, env_cfg.alpha,
                                    env_cfg.beta)
        rewards = np.empty(self.n_bs)
        for m in range(self.n_bs):
            rewards[m], clipped = reward_value(utilities[m],
                                               metrics.mean_ssr[m],
                                               env_cfg.c1, env_cfg.c2,
                                               env_cfg.c3)
            self.clip_count += clipped
        self.d_prev = self.d_cur
        self.d_cur = d_new
        return StepResult(obs=self.observations(), rewards=rewards,
                          utilities=np.asarray(utilities), metrics=metrics,
                          handovers=handovers, units=units)

    # -- frozen-period evaluation -----------------------------------------
    def snapshot(self):
        """Deep state capture so alternative actions can replay one period."""
        return {
            "subs": self._subs.copy(),
            "assoc": self.assoc.copy(),
            "d_prev": self.d_prev.copy(),
            "d_cur": self.d_cur.copy(),
            "period": self.period,
            "clip": self.clip_count,
            "traffic": self._traffic.state_snapshot(),
            "radio": self._radio.state_snapshot(),
        }

    def restore(self, snap):
        self._subs = snap["subs"].copy()
        self.assoc = snap["assoc"].copy()
        self.d_prev = snap["d_prev"].copy()
        self.d_cur = snap["d_cur"].copy()
        self.period = snap["period"]
        self.clip_count = snap["clip"]
        self._traffic.state_restore(snap["traffic"])
        self._radio.state_restore(snap["radio"])

    def evaluate_actions(self, bs, action_indices, others="hard"):
        """Exhaustively score candidate actions for one BS on a frozen period.

        Every candidate replays the identical next period (same arrivals,
        same fading, same mobility). Other BSs hold the hard-slicing
        allocation. Returns one StepResult per candidate.
        """
        snap = self.snapshot()
        results = []
        base = np.tile(self.hard_action if others == "hard" else others,
                       (self.n_bs, 1))
        for idx in action_indices:
            self.restore(snap)
            joint = base.copy()
            joint[bs] = decode_action(int(idx), self.units)
            results.append(self.step(joint))
        self.restore(snap)
        return results
