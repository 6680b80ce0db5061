"""Training loop: warmup, epsilon-greedy interaction, replay, updates.

One shared ring buffer stores joint period snapshots (all agents'
demands, actions and rewards); each agent trains on its own slice of
independently sampled minibatches. The exploration probability is
inverted relative to the usual convention: epsilon is the probability
of following the policy, starting at 0 (pure random) and ramping up.

Training runs as a single continuing task: the first fifth of the
periods is a pure-random warmup with no updates, then one gradient step
per agent per period, with the DQN target copies cloned every
`target_sync` training periods.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import N_SLICES, SLICE_NAMES
from .env import SliceEnv, encode_action, hard_slicing_action
from .nets import AgentBrain

log = logging.getLogger("sliceran")

METRICS_COLUMNS = ["period", "bs_id", "algorithm", "seed", "action_index",
                   "c1_units", "c2_units", "c3_units", "se", "ssr_volte",
                   "ssr_embb", "ssr_urllc", "mean_ssr", "utility", "reward",
                   "epsilon", "handovers"]

SUMMARY_COLUMNS = ["period", "algorithm", "seed", "utility_mean",
                   "utility_med50", "reward_med50", "se_med50",
                   "ssr_volte_med50", "ssr_embb_med50", "ssr_urllc_med50",
                   "mean_ssr_med50", "epsilon"]


class ReplayBuffer:
    """Ring buffer of joint transitions; oldest entries evicted first."""

    def __init__(self, capacity, n_bs, n_slices=N_SLICES):
        self.capacity = int(capacity)
        shape = (self.capacity, n_bs, n_slices)
        self.d_prev = np.zeros(shape)
        self.d_cur = np.zeros(shape)
        self.d_next = np.zeros(shape)
        self.actions = np.zeros((self.capacity, n_bs), np.int64)
        self.rewards = np.zeros((self.capacity, n_bs))
        self.size = 0
        self._head = 0

    def __len__(self):
        return self.size

    def push(self, d_prev, d_cur, d_next, actions, rewards):
        i = self._head
        self.d_prev[i] = d_prev
        self.d_cur[i] = d_cur
        self.d_next[i] = d_next
        self.actions[i] = actions
        self.rewards[i] = rewards
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch, rng):
        return rng.integers(0, self.size, size=batch)

    def batch_for_agent(self, idx, m):
        """(d_prev, own d_cur, action, reward, d_cur, own d_next) slices."""
        return (self.d_prev[idx], self.d_cur[idx, m], self.actions[idx, m],
                self.rewards[idx, m], self.d_cur[idx], self.d_next[idx, m])


@dataclass
class EpsilonSchedule:
    """Probability of acting on-policy; 0 at first, linear ramp, hold."""

    end: float = 0.95
    ramp: int = 1

    def value(self, training_periods_done):
        if training_periods_done <= 0 or self.ramp <= 0:
            return 0.0
        return self.end * min(1.0, training_periods_done / self.ramp)


class Trainer:
    """Runs one algorithm on one environment for cfg.run.periods periods."""

    def __init__(self, cfg, env=None):
        self.cfg = cfg
        self.env = env if env is not None else SliceEnv(cfg)
        self.algorithm = cfg.run.algorithm
        self.mode = None
        self.use_gat = self.algorithm.startswith("gat-")
        if self.algorithm != "hard":
            self.mode = "a2c" if self.algorithm.endswith("a2c") else "dqn"
        M = self.env.n_bs
        lc = cfg.learner
        self.buffer = ReplayBuffer(lc.replay_capacity, M)
        warmup = cfg.warmup_periods()
        ramp = max(1, int((cfg.run.periods - warmup) * lc.epsilon_ramp_fraction))
        self.schedule = EpsilonSchedule(end=lc.epsilon_end, ramp=ramp)
        root = np.random.SeedSequence([cfg.run.seed, 0xA6E27])
        seqs = root.spawn(2 * M)
        self.act_rngs = [np.random.default_rng(s) for s in seqs[:M]]
        self.sample_rngs = [np.random.default_rng(s) for s in seqs[M:]]
        self.brains = []
        if self.mode is not None:
            brain_seqs = np.random.SeedSequence([cfg.run.seed, 0xB8A1]).spawn(M)
            shared = None
            for m in range(M):
                if lc.share_weights and shared is not None:
                    self.brains.append(shared)
                    continue
                brain = AgentBrain(self.mode, np.random.default_rng(brain_seqs[m]),
                                   N_SLICES, self.env.n_actions, lc, self.use_gat)
                self.brains.append(brain)
                shared = brain
        self.mask = self.env.graph.mask
        self.hard_index = encode_action(self.env.hard_action, self.env.units)
        self.skipped_updates = 0

    # -- action selection --------------------------------------------------
    def choose_actions(self, obs_prev_all, obs_cur, epsilon):
        M = self.env.n_bs
        actions = np.empty(M, np.int64)
        if self.algorithm == "hard":
            actions[:] = self.hard_index
            return actions
        for m in range(M):
            rng = self.act_rngs[m]
            p = rng.random()
            if p <= epsilon:
                actions[m] = self.brains[m].act(obs_prev_all, obs_cur[m],
                                                self.mask, m)
            else:
                actions[m] = rng.integers(0, self.env.n_actions)
        return actions

    # -- main loop -----------------------------------------------------------
    def run(self, out_dir=None, resume=None, log_every=None):
        cfg = self.cfg
        T = cfg.run.periods
        warmup = cfg.warmup_periods()
        log_every = log_every or cfg.run.log_interval
        if resume is not None and self.mode is not None:
            values = ad.load_checkpoint(resume)
            for m, brain in enumerate(self.brains):
                brain.load_named(f"agent/{m}", values)
        self.env.reset()
        d_prev = self.env.d_prev.copy()
        d_cur = self.env.d_cur.copy()
        rows = []
        period_stats = []
        started = time.time()
        for t in range(1, T + 1):
            training_done = max(0, t - 1 - warmup)
            epsilon = 0.0 if t <= warmup else self.schedule.value(training_done)
            actions = self.choose_actions(d_prev, d_cur, epsilon)
            res = self.env.step(actions)
            d_next = self.env.d_cur.copy()
            self.buffer.push(d_prev, d_cur, d_next, actions, res.rewards)
            if self.mode is not None and t > warmup:
                self._update_agents(t - warmup)
            rows.extend(self._rows(t, res, epsilon))
            period_stats.append((res.utilities.mean(), res.rewards.mean(),
                                 res.metrics.se.mean(),
                                 *res.metrics.ssr.mean(axis=0),
                                 res.metrics.mean_ssr.mean(), epsilon))
            d_prev, d_cur = d_cur, d_next
            if t % log_every == 0:
                log.info("period %d/%d eps=%.3f mean_utility=%.3f "
                         "mean_reward=%.3f [%.1fs]", t, T, epsilon,
                         period_stats[-1][0], period_stats[-1][1],
                         time.time() - started)
            if (out_dir is not None and cfg.run.checkpoint_interval
                    and t % cfg.run.checkpoint_interval == 0):
                self.save_checkpoint(Path(out_dir) / "checkpoints" / f"period_{t:06d}")
        if out_dir is not None:
            self.save_checkpoint(Path(out_dir) / "checkpoints" / "final")
        return rows, period_stats

    def _update_agents(self, training_period):
        lc = self.cfg.learner
        if len(self.buffer) < lc.batch_size:
            self.skipped_updates += 1
            log.warning("skipping update at training period %d: buffer %d < "
                        "batch %d", training_period, len(self.buffer),
                        lc.batch_size)
            return
        gamma = self.cfg.env.gamma
        updated = set()
        for m, brain in enumerate(self.brains):
            if id(brain) in updated:  # share_weights: one step per period
                continue
            updated.add(id(brain))
            idx = self.buffer.sample_indices(lc.batch_size, self.sample_rngs[m])
            batch = self.buffer.batch_for_agent(idx, m)
            if self.mode == "dqn":
                brain.train_dqn(batch, self.mask, m, gamma)
            else:
                brain.train_a2c(batch, self.mask, m, gamma)
        if self.mode == "dqn" and training_period % lc.target_sync == 0:
            for brain in self.brains:
                brain.sync_target()

    def _rows(self, t, res, epsilon):
        cfg = self.cfg
        out = []
        for m in range(self.env.n_bs):
            comp = res.units[m]
            out.append([t, m, self.algorithm, cfg.run.seed,
                        encode_action(comp, self.env.units), *comp.tolist(),
                        res.metrics.se[m], *res.metrics.ssr[m],
                        res.metrics.mean_ssr[m], res.utilities[m],
                        res.rewards[m], epsilon, int(res.handovers[m])])
        return out

    def save_checkpoint(self, directory):
        if self.mode is None:
            return
        named = {}
        for m, brain in enumerate(self.brains):
            for k, v in brain.named_params(f"agent/{m}").items():
                named[k] = v.data
        ad.save_checkpoint(directory, named)


# -- file emission ----------------------------------------------------------

def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) or isinstance(x, np.floating):
        return format(float(x), ".10g")
    return str(x)


def write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def rolling_median(series, window=50):
    """Trailing-window medians (window shrinks at the start)."""
    out = np.empty(len(series))
    arr = np.asarray(series, dtype=np.float64)
    for i in range(len(arr)):
        out[i] = np.median(arr[max(0, i - window + 1):i + 1])
    return out


def summary_rows(period_stats, algorithm, seed, window=50):
    stats = np.asarray(period_stats)
    meds = [rolling_median(stats[:, j], window) for j in range(7)]
    rows = []
    for i in range(stats.shape[0]):
        rows.append([i + 1, algorithm, seed, stats[i, 0],
                     meds[0][i], meds[1][i], meds[2][i], meds[3][i],
                     meds[4][i], meds[5][i], meds[6][i], stats[i, 7]])
    return rows


def run_experiment(cfg, out_dir, resume=None):
    """One full run: metrics.csv, summary.csv, resolved.config, checkpoints."""
    from .config import dump_config

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "resolved.config")
    norms = ", ".join(f"{n}={v:.6g}" for n, v in
                      zip(SLICE_NAMES, cfg.demand_normalizers()))
    log.info("run start: algorithm=%s seed=%d periods=%d bs=%d units=%d "
             "actions=%d normalizers[bits]: %s", cfg.run.algorithm,
             cfg.run.seed, cfg.run.periods, cfg.n_bs(), cfg.units(),
             __import__("math").comb(cfg.units() - 1, N_SLICES - 1), norms)
    trainer = Trainer(cfg)
    rows, period_stats = trainer.run(out_dir=out, resume=resume)
    write_csv(out / "metrics.csv", METRICS_COLUMNS, rows)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS,
              summary_rows(period_stats, cfg.run.algorithm, cfg.run.seed))
    log.info("run done: clipped rewards=%d skipped updates=%d",
             trainer.env.clip_count, trainer.skipped_updates)
    return {"out_dir": out, "rows": rows, "period_stats": period_stats,
            "clip_count": trainer.env.clip_count}


# -- tabular sanity harness --------------------------------------------------

class ToyMdp:
    """4-state, 3-action MDP with a unique optimal policy (known by VI).

    States carry 2-dimensional demand-like features so the same learner
    stack (GAT disabled, single agent) can train on it unchanged.
    """

    FEATURES = np.array([[0.1, 0.9], [0.8, 0.2], [0.45, 0.55], [0.9, 0.8]])
    NEXT = np.array([[1, 2, 3], [0, 2, 3], [3, 1, 0], [2, 0, 1]])
    REWARD = np.array([[0.10, 0.62, 0.25],
                       [0.05, 0.30, 0.70],
                       [0.45, 0.12, 0.02],
                       [0.88, 0.20, 0.50]])

    n_states = 4
    n_actions = 3

    def value_iteration(self, gamma=0.9, iters=2000):
        v = np.zeros(self.n_states)
        for _ in range(iters):
            q = self.REWARD + gamma * v[self.NEXT]
            v = q.max(axis=1)
        q = self.REWARD + gamma * v[self.NEXT]
        return v, q, q.argmax(axis=1)

    def bellman_residual(self, v, gamma=0.9):
        q = self.REWARD + gamma * v[self.NEXT]
        return float(np.abs(q.max(axis=1) - v).max())

    def obs(self, state):
        f = self.FEATURES[state]
        return f[None, :].copy(), f.copy()  # (d_prev_all (1, 2), d_cur (2,))


def train_toy(mode, seed=0, max_updates=20000, check_every=250, gamma=0.9,
              critic_warmup=3000):
    """Train a single-agent learner on the toy MDP until its greedy policy
    matches value iteration (or the update budget runs out).

    The toy bypasses the joint replay buffer: states are stored as
    integers and featurised per batch, with both observation halves set
    to the state's feature vector. The A2C actor sits out the first
    `critic_warmup` updates so its advantages carry real ranking signal.
    """
    from .config import LearnerSection

    mdp = ToyMdp()
    _, _, optimal = mdp.value_iteration(gamma)
    lc = LearnerSection(embed_dim=16, hidden_dim=32, batch_size=32,
                        target_sync=100, lr_q=2e-3, lr_critic=1e-2,
                        lr_actor=1e-3, entropy_weight=0.1)
    rng = np.random.default_rng(seed)
    brain = AgentBrain(mode, np.random.default_rng(seed + 1), 2,
                       mdp.n_actions, lc, gat=False)
    mask = np.ones((1, 1), bool)
    cap = 10000
    mem_s = np.zeros(cap, np.int64)
    mem_a = np.zeros(cap, np.int64)
    mem_r = np.zeros(cap)
    mem_s2 = np.zeros(cap, np.int64)
    size = head = 0
    state = int(rng.integers(mdp.n_states))
    # fast ramp: the actor must learn from mostly on-policy behaviour, or
    # replayed off-policy advantages funnel mass into a saturated action
    schedule = EpsilonSchedule(end=0.95, ramp=max(500, max_updates // 10))

    def featurise(states):
        f = mdp.FEATURES[states]
        return f[:, None, :], f  # graph view (B, 1, 2) and own view (B, 2)

    def greedy_policy():
        graph, own = featurise(np.arange(mdp.n_states))
        out = brain.policy_batch(graph, own, mask, 0)
        if mode == "dqn":
            return out
        return np.argmax(out, axis=1)

    updates = 0
    while updates < max_updates:
        eps = schedule.value(updates)
        d_prev_all, d_cur = mdp.obs(state)
        if rng.random() <= eps:
            a = brain.act(d_prev_all, d_cur, mask, 0)
        else:
            a = int(rng.integers(mdp.n_actions))
        nxt = int(mdp.NEXT[state, a])
        mem_s[head], mem_a[head], mem_r[head], mem_s2[head] = \
            state, a, mdp.REWARD[state, a], nxt
        head = (head + 1) % cap
        size = min(size + 1, cap)
        state = nxt
        if size >= lc.batch_size:
            idx = rng.integers(0, size, lc.batch_size)
            g1, o1 = featurise(mem_s[idx])
            g2, o2 = featurise(mem_s2[idx])
            batch = (g1, o1, mem_a[idx], mem_r[idx], g2, o2)
            if mode == "dqn":
                brain.train_dqn(batch, mask, 0, gamma)
                if updates % lc.target_sync == 0:
                    brain.sync_target()
            else:
                brain.train_a2c(batch, mask, 0, gamma,
                                update_actor=updates >= critic_warmup)
            updates += 1
            if updates % check_every == 0 and updates > critic_warmup \
                    and np.array_equal(greedy_policy(), optimal):
                break
    return greedy_policy(), updates, optimal
