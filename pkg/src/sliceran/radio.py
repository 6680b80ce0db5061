"""Link model and slot-level round-robin scheduling inside each slice.

Per scheduling slot (0.5 ms) each slice grants its whole bandwidth share
to the next subscriber, in cyclic order, that has pending bits. Rates
follow Shannon capacity in bits (log2) from the per-slot SNR; Rayleigh
fading is drawn per (subscriber, absolute slot) from a counter-based
hash, so a frozen period replays identical fading no matter which
allocation is being evaluated.

The slot loop is JIT-compiled; everything it needs arrives as flat
arrays. Queues persist across periods (and follow a subscriber through
handover); a packet is dropped once its age exceeds the slice latency
SLA, and a delivered packet counts as successful only if it met that
latency and its mean serving rate reached the slice rate SLA.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .config import N_SLICES


@dataclass
class LinkBudget:
    """Downlink power/noise/path-loss constants (dB in, linear out)."""

    tx_power_dbm: float = 30.0
    noise_dbm_hz: float = -174.0
    pathloss_intercept_db: float = 74.0
    pathloss_exponent_db: float = 30.0
    min_distance_m: float = 3.0
    rayleigh: bool = True
    shadowing_sigma_db: float = 0.0

    @property
    def tx_mw(self):
        return 10.0 ** (self.tx_power_dbm / 10.0)

    @property
    def noise_mw_hz(self):
        return 10.0 ** (self.noise_dbm_hz / 10.0)

    def path_gain(self, distance_m):
        """Deterministic linear power gain at a distance (clamped below)."""
        d = np.maximum(np.asarray(distance_m, dtype=np.float64),
                       self.min_distance_m)
        pl_db = (self.pathloss_intercept_db
                 + self.pathloss_exponent_db * np.log10(d))
        return 10.0 ** (-pl_db / 10.0)


def channel_gain(budget, distance_m, fading=1.0):
    """Linear gain = path gain x fading factor (E[fading] = 1)."""
    return budget.path_gain(distance_m) * fading


def snr(budget, gain, w_hz):
    if np.any(np.asarray(w_hz) <= 0):
        raise ValueError("slice bandwidth must be positive")
    return gain * budget.tx_mw / (budget.noise_mw_hz * w_hz)


def user_rate(budget, gain, w_hz):
    """Shannon rate in bits/s for a user granted w_hz."""
    return w_hz * np.log2(1.0 + snr(budget, gain, w_hz))


def spectral_efficiency(budget, gains, slice_ids, assoc, units, delta_hz,
                        bandwidth_hz, n_bs):
    """SE_m = sum of associated users' Shannon rates / total bandwidth.

    Uses the period-average gain (fading averaged out); every user is
    rated at its slice's full bandwidth share.
    """
    se = np.zeros(n_bs)
    if gains.size:
        w = units[assoc, slice_ids] * delta_hz
        rates = user_rate(budget, gains, w)
        np.add.at(se, assoc, rates)
    return se / bandwidth_hz


# -- counter-based fading ------------------------------------------------

@njit(cache=True, inline="always")
def _mix64(z):
    z = (z + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _fade_exp1(root, gid, abs_slot):
    # Exponential(1) keyed by (subscriber, absolute slot): schedule-free.
    z = _mix64(root + np.uint64(gid))
    z = _mix64(z + np.uint64(abs_slot))
    u = (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    return -np.log(1.0 - u)


# -- slot scheduler -------------------------------------------------------

@njit(cache=True)
def _schedule_slice(arrival, remaining, served_slots, sum_rate, owner,
                    n_users, user_gid, gain, w_hz, tx_mw, noise_mw_hz,
                    slot_s, n_slots, t0, deadline, rate_sla, rayleigh,
                    fade_root, slot_base, rr_start):
    """Serve one (BS, slice) queue for one period of n_slots slots.

    Packets must be sorted by arrival; all of a user's packets are in
    FIFO order. Returns per-packet status (0 pending, 1 delivered,
    2 dropped), the success flag, per-user served-slot counts and the
    index of the last served user (-1 if the slice idled all period).
    """
    P = arrival.size
    head = np.full(n_users, -1, np.int64)
    tail = np.full(n_users, -1, np.int64)
    nxt = np.full(P, -1, np.int64)
    status = np.zeros(P, np.int8)
    success = np.zeros(P, np.int8)
    served_count = np.zeros(n_users, np.int64)
    ingest = 0
    expire = 0
    rr = rr_start
    last_served = -1
    for s in range(n_slots):
        t = t0 + s * slot_s
        while ingest < P and arrival[ingest] <= t:
            o = owner[ingest]
            if head[o] == -1:
                head[o] = ingest
            else:
                nxt[tail[o]] = ingest
            tail[o] = ingest
            ingest += 1
        # age > deadline => dropped; same per-slice offset keeps FIFO order
        while expire < P and arrival[expire] + deadline < t:
            if status[expire] == 0:
                status[expire] = 2
                head[owner[expire]] = nxt[expire]
            expire += 1
        pick = -1
        for k in range(n_users):
            cand = (rr + k) % n_users
            if head[cand] != -1:
                pick = cand
                break
        if pick == -1:
            continue
        rr = (pick + 1) % n_users
        last_served = pick
        served_count[pick] += 1
        fade = 1.0
        if rayleigh:
            fade = _fade_exp1(fade_root, user_gid[pick], slot_base + s)
        snr_slot = gain[pick] * fade * tx_mw / (noise_mw_hz * w_hz)
        rate = w_hz * np.log2(1.0 + snr_slot)
        budget = rate * slot_s
        h = head[pick]
        while h != -1 and budget > 0.0:
            served_slots[h] += 1
            sum_rate[h] += rate
            take = remaining[h] if remaining[h] < budget else budget
            remaining[h] -= take
            budget -= take
            if remaining[h] <= 1e-9:
                status[h] = 1
                latency = (t + slot_s) - arrival[h]
                mean_rate = sum_rate[h] / served_slots[h]
                ok = latency <= deadline + 1e-12 and mean_rate >= rate_sla
                success[h] = 1 if ok else 0
                h = nxt[h]
                head[pick] = h
            else:
                break
    return status, success, served_count, last_served


@dataclass
class PeriodMetrics:
    """Per-BS results of one scheduling period."""

    se: np.ndarray          # (M,)
    ssr: np.ndarray         # (M, N); slices with no resolved packets -> 1.0
    mean_ssr: np.ndarray    # (M,)
    delivered: np.ndarray   # (M,) int
    dropped: np.ndarray     # (M,) int
    pending: int            # packets still queued at period end (all BSs)
    detail: dict | None = None


class RadioSimulator:
    """Owns the pending queues and round-robin state across periods."""

    def __init__(self, budget, sla_rates, sla_latencies, slot_s, slots_per_period,
                 bandwidth_hz, delta_hz, n_bs, seed):
        self.budget = budget
        self.sla_rates = np.asarray(sla_rates, dtype=np.float64)
        self.sla_latencies = np.asarray(sla_latencies, dtype=np.float64)
        self.slot_s = float(slot_s)
        self.slots_per_period = int(slots_per_period)
        self.bandwidth_hz = float(bandwidth_hz)
        self.delta_hz = float(delta_hz)
        self.n_bs = int(n_bs)
        self.fade_root = np.uint64(np.random.SeedSequence(seed).generate_state(1, np.uint64)[0])
        self._shadow_rng = np.random.default_rng(
            np.random.SeedSequence([seed, 0x5AD0]))
        self.reset_queues()

    def reset_queues(self):
        self.pend_owner = np.empty(0, np.int64)
        self.pend_arrival = np.empty(0)
        self.pend_remaining = np.empty(0)
        self.pend_served = np.empty(0, np.int64)
        self.pend_sum_rate = np.empty(0)
        self.last_gid = np.full((self.n_bs, N_SLICES), -1, np.int64)

    def state_snapshot(self):
        return (self.pend_owner.copy(), self.pend_arrival.copy(),
                self.pend_remaining.copy(), self.pend_served.copy(),
                self.pend_sum_rate.copy(), self.last_gid.copy())

    def state_restore(self, snap):
        (self.pend_owner, self.pend_arrival, self.pend_remaining,
         self.pend_served, self.pend_sum_rate, self.last_gid) = \
            tuple(a.copy() for a in snap)

    def user_gains(self, sub_pos, assoc, bs_pos, period_idx):
        """Per-subscriber period gain to the serving BS (+ optional shadowing)."""
        if sub_pos.shape[0] == 0:
            return np.empty(0)
        delta = sub_pos - bs_pos[assoc]
        dist = np.sqrt((delta * delta).sum(axis=1))
        g = self.budget.path_gain(dist)
        sigma = self.budget.shadowing_sigma_db
        if sigma > 0:
            shadow_db = self._shadow_rng.normal(0.0, sigma, size=g.size)
            g = g * 10.0 ** (shadow_db / 10.0)
        return g

    def run_period(self, period_idx, units, batch, assoc, slice_ids, gains,
                   sub_gids, collect_detail=False):
        """Schedule one period under the per-BS unit allocations.

        `units` is the (M, N) integer allocation; `batch` the period's new
        packets (sorted by arrival). Pending queues are consumed/updated.
        """
        M, N = self.n_bs, N_SLICES
        t0 = period_idx * self.slots_per_period * self.slot_s
        ssr = np.ones((M, N))
        delivered = np.zeros(M, np.int64)
        dropped = np.zeros(M, np.int64)
        detail = {"served": {}, "resolved": {}} if collect_detail else None

        # merge carried-over packets with the new batch, grouped by the
        # owner's current (bs, slice)
        all_owner = np.concatenate((self.pend_owner, batch.owner))
        all_arrival = np.concatenate((self.pend_arrival, batch.time))
        all_remaining = np.concatenate((self.pend_remaining, batch.bits))
        all_served = np.concatenate((self.pend_served,
                                     np.zeros(batch.owner.size, np.int64)))
        all_sum_rate = np.concatenate((self.pend_sum_rate,
                                       np.zeros(batch.owner.size)))
        pkt_bs = assoc[all_owner] if all_owner.size else np.empty(0, np.int64)
        pkt_slice = slice_ids[all_owner] if all_owner.size else np.empty(0, np.int64)

        keep_owner, keep_arrival, keep_remaining = [], [], []
        keep_served, keep_sum = [], []
        slot_base = period_idx * self.slots_per_period

        for m in range(M):
            for n in range(N):
                users = np.flatnonzero((assoc == m) & (slice_ids == n))
                rows = np.flatnonzero((pkt_bs == m) & (pkt_slice == n))
                if users.size == 0:
                    # no associated users: packets cannot be served; they
                    # expire by age like any other queued packet
                    if rows.size:
                        age_out = all_arrival[rows] + self.sla_latencies[n] \
                            < t0 + self.slots_per_period * self.slot_s
                        exp_rows = rows[age_out]
                        stay = rows[~age_out]
                        dropped[m] += exp_rows.size
                        nres = exp_rows.size
                        if nres:
                            ssr[m, n] = 0.0
                        keep_owner.append(all_owner[stay])
                        keep_arrival.append(all_arrival[stay])
                        keep_remaining.append(all_remaining[stay])
                        keep_served.append(all_served[stay])
                        keep_sum.append(all_sum_rate[stay])
                    continue
                if rows.size == 0:
                    continue  # users but nothing queued: slice idles
                order = rows[np.argsort(all_arrival[rows], kind="stable")]
                gids = sub_gids[users]
                local = np.searchsorted(gids, sub_gids[all_owner[order]])
                rr_start = int(np.searchsorted(
                    gids, self.last_gid[m, n], side="right") % users.size)
                arrival = np.ascontiguousarray(all_arrival[order])
                remaining = np.ascontiguousarray(all_remaining[order])
                served = np.ascontiguousarray(all_served[order])
                sum_rate = np.ascontiguousarray(all_sum_rate[order])
                w_hz = units[m, n] * self.delta_hz
                status, success, served_count, last_served = _schedule_slice(
                    arrival, remaining, served, sum_rate,
                    np.ascontiguousarray(local), users.size,
                    np.ascontiguousarray(gids),
                    np.ascontiguousarray(gains[users]),
                    w_hz, self.budget.tx_mw, self.budget.noise_mw_hz,
                    self.slot_s, self.slots_per_period, t0,
                    self.sla_latencies[n], self.sla_rates[n],
                    self.budget.rayleigh, self.fade_root, slot_base, rr_start)
                if last_served >= 0:
                    self.last_gid[m, n] = gids[last_served]
                resolved = status != 0
                nres = int(resolved.sum())
                if nres:
                    ssr[m, n] = float(success[resolved].sum()) / nres
                delivered[m] += int((status == 1).sum())
                dropped[m] += int((status == 2).sum())
                left = ~resolved
                keep_owner.append(all_owner[order[left]])
                keep_arrival.append(arrival[left])
                keep_remaining.append(remaining[left])
                keep_served.append(served[left])
                keep_sum.append(sum_rate[left])
                if collect_detail:
                    detail["served"][(m, n)] = dict(zip(gids.tolist(),
                                                        served_count.tolist()))
                    detail["resolved"][(m, n)] = (status.copy(), success.copy(),
                                                  arrival.copy())

        if keep_owner:
            self.pend_owner = np.concatenate(keep_owner)
            self.pend_arrival = np.concatenate(keep_arrival)
            self.pend_remaining = np.concatenate(keep_remaining)
            self.pend_served = np.concatenate(keep_served)
            self.pend_sum_rate = np.concatenate(keep_sum)
        else:
            self.reset_queues_arrays_only()
        # keep the pool globally sorted so per-group merges stay sorted
        if self.pend_owner.size:
            order = np.argsort(self.pend_arrival, kind="stable")
            self.pend_owner = self.pend_owner[order]
            self.pend_arrival = self.pend_arrival[order]
            self.pend_remaining = self.pend_remaining[order]
            self.pend_served = self.pend_served[order]
            self.pend_sum_rate = self.pend_sum_rate[order]

        se = spectral_efficiency(self.budget, gains, slice_ids, assoc, units,
                                 self.delta_hz, self.bandwidth_hz, M)
        return PeriodMetrics(se=se, ssr=ssr, mean_ssr=ssr.mean(axis=1),
                             delivered=delivered, dropped=dropped,
                             pending=int(self.pend_owner.size), detail=detail)

    def reset_queues_arrays_only(self):
        self.pend_owner = np.empty(0, np.int64)
        self.pend_arrival = np.empty(0)
        self.pend_remaining = np.empty(0)
        self.pend_served = np.empty(0, np.int64)
        self.pend_sum_rate = np.empty(0)
