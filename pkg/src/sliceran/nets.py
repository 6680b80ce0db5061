"""Per-agent networks: demand encoders, masked graph attention, heads.

The representation path for agent m is

    h_cur   = relu(W2 d_m^t + b2)                     (own current demand)
    H_prev  = relu(W1 D^{t-1} + b1)                   (all BSs, last period)
    G1      = GAT(H_prev),  G2 = GAT(G1)              (masked to the BS graph)
    s_m     = concat(h_cur, G1[m], G2[m])

with every weight owned by agent m alone; only the raw demand matrix
D^{t-1} crosses agent boundaries. With the GAT stack disabled the state
is concat(h_prev_own, h_cur) instead. Attention uses per-head bilinear
scores (W_s h_i) . (W_t h_j), a temperature-scaled masked softmax over
each neighborhood, and concatenated heads.

All forwards are batched: demand inputs are (B, M, n) / (B, n), and the
K heads ride along the leading axis of a (B*K, M, *) batched matmul.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def glorot(rng, shape):
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def detach(t):
    return Tensor(t.data)


class Affine:
    """y = x @ W + b with W stored (in, out)."""

    def __init__(self, rng, n_in, n_out):
        self.W = glorot(rng, (n_in, n_out))
        self.b = zeros_param((n_out,))

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.W), self.b)

    def params(self):
        return [self.W, self.b]

    def named(self, prefix):
        return {f"{prefix}/W": self.W, f"{prefix}/b": self.b}


class GatLayer:
    """One multi-head masked attention layer over the BS graph."""

    def __init__(self, rng, n_in, proj_dim, head_dim, heads, temperature):
        self.heads = heads
        self.proj_dim = proj_dim
        self.head_dim = head_dim
        self.temperature = temperature
        self.Ws = glorot(rng, (n_in, heads * proj_dim))
        self.Wt = glorot(rng, (n_in, heads * proj_dim))
        self.Wc = glorot(rng, (n_in, heads * head_dim))

    @property
    def out_dim(self):
        return self.heads * self.head_dim

    def _to_heads(self, x, dim):
        # (B, M, K*dim) -> (B*K, M, dim)
        B, M = x.shape[0], x.shape[1]
        x = ad.reshape(x, (B, M, self.heads, dim))
        x = ad.transpose(x, (0, 2, 1, 3))
        return ad.reshape(x, (B * self.heads, M, dim))

    def __call__(self, h, mask):
        """h: (B, M, n_in); mask: (M, M) bool. Returns (B, M, K*head_dim)."""
        B, M = h.shape[0], h.shape[1]
        s = self._to_heads(ad.matmul(h, self.Ws), self.proj_dim)
        t = self._to_heads(ad.matmul(h, self.Wt), self.proj_dim)
        c = self._to_heads(ad.matmul(h, self.Wc), self.head_dim)
        scores = ad.matmul(s, ad.transpose(t, (0, 2, 1)))  # (B*K, M, M)
        alpha = ad.softmax(scores, tau=self.temperature, mask=mask)
        out = ad.matmul(alpha, c)  # (B*K, M, head_dim)
        out = ad.reshape(out, (B, self.heads, M, self.head_dim))
        out = ad.transpose(out, (0, 2, 1, 3))
        out = ad.reshape(out, (B, M, self.heads * self.head_dim))
        return ad.relu(out)

    def attention(self, h, mask):
        """(B*K, M, M) attention weights, for inspection/tests."""
        s = self._to_heads(ad.matmul(h, self.Ws), self.proj_dim)
        t = self._to_heads(ad.matmul(h, self.Wt), self.proj_dim)
        scores = ad.matmul(s, ad.transpose(t, (0, 2, 1)))
        return ad.softmax(scores, tau=self.temperature, mask=mask)

    def params(self):
        return [self.Ws, self.Wt, self.Wc]

    def named(self, prefix):
        return {f"{prefix}/Ws": self.Ws, f"{prefix}/Wt": self.Wt,
                f"{prefix}/Wc": self.Wc}


class Representation:
    """Encoder MLPs + optional two-layer GAT stack for one agent."""

    def __init__(self, rng, n_demand, embed_dim, gat, proj_dim, head_dim,
                 heads, layers, temperature):
        self.enc_prev = Affine(rng, n_demand, embed_dim)
        self.enc_cur = Affine(rng, n_demand, embed_dim)
        self.gat_layers = []
        self.use_gat = gat
        if gat:
            n_in = embed_dim
            for _ in range(layers):
                layer = GatLayer(rng, n_in, proj_dim, head_dim, heads,
                                 temperature)
                self.gat_layers.append(layer)
                n_in = layer.out_dim
            self.state_dim = embed_dim + sum(l.out_dim for l in self.gat_layers)
        else:
            self.state_dim = 2 * embed_dim

    def state(self, d_prev_all, d_cur_own, mask, node):
        """(B, M, n) demand history + (B, n) own demand -> (B, state_dim)."""
        h_cur = ad.relu(self.enc_cur(d_cur_own))
        if not self.use_gat:
            own_prev = ad.take(d_prev_all, node, axis=1)
            h_prev = ad.relu(self.enc_prev(own_prev))
            return ad.concat([h_prev, h_cur], axis=-1)
        h = ad.relu(self.enc_prev(d_prev_all))
        pieces = [h_cur]
        for layer in self.gat_layers:
            h = layer(h, mask)
            pieces.append(ad.take(h, node, axis=1))
        return ad.concat(pieces, axis=-1)

    def params(self):
        ps = self.enc_prev.params() + self.enc_cur.params()
        for l in self.gat_layers:
            ps += l.params()
        return ps

    def named(self, prefix):
        out = {}
        out.update(self.enc_prev.named(f"{prefix}/enc_prev"))
        out.update(self.enc_cur.named(f"{prefix}/enc_cur"))
        for i, l in enumerate(self.gat_layers):
            out.update(l.named(f"{prefix}/gat{i + 1}"))
        return out


class DuelingQNet:
    """Q(s, .) = V(s) + A(s, .) - mean_a A(s, a), on a shared relu trunk."""

    def __init__(self, rng, state_dim, hidden, n_actions, dueling=True):
        self.dueling = dueling
        self.n_actions = n_actions
        self.trunk = Affine(rng, state_dim, hidden)
        if dueling:
            self.value = Affine(rng, hidden, 1)
            self.adv = Affine(rng, hidden, n_actions)
        else:
            self.out = Affine(rng, hidden, n_actions)

    def __call__(self, s):
        t = ad.relu(self.trunk(s))
        if not self.dueling:
            return self.out(t)
        v = self.value(t)                         # (B, 1)
        a = self.adv(t)                           # (B, A)
        a_mean = ad.sum_(a, axis=1, keepdims=True) * (1.0 / self.n_actions)
        return ad.add(v, ad.sub(a, a_mean))

    def params(self):
        ps = self.trunk.params()
        ps += (self.value.params() + self.adv.params()) if self.dueling \
            else self.out.params()
        return ps

    def named(self, prefix):
        out = self.trunk.named(f"{prefix}/trunk")
        if self.dueling:
            out.update(self.value.named(f"{prefix}/value"))
            out.update(self.adv.named(f"{prefix}/adv"))
        else:
            out.update(self.out.named(f"{prefix}/out"))
        return out


class ActorCriticNet:
    """Softmax policy head and state-value head on separate relu trunks."""

    def __init__(self, rng, state_dim, hidden, n_actions):
        self.actor_trunk = Affine(rng, state_dim, hidden)
        self.actor_out = Affine(rng, hidden, n_actions)
        self.critic_trunk = Affine(rng, state_dim, hidden)
        self.critic_out = Affine(rng, hidden, 1)

    def log_probs(self, s):
        t = ad.relu(self.actor_trunk(s))
        return ad.log_softmax(self.actor_out(t))

    def probs(self, s):
        return ad.exp(self.log_probs(s))

    def value(self, s):
        t = ad.relu(self.critic_trunk(s))
        return ad.reshape(self.critic_out(t), (s.shape[0],))

    def actor_params(self):
        return self.actor_trunk.params() + self.actor_out.params()

    def critic_params(self):
        return self.critic_trunk.params() + self.critic_out.params()

    def named(self, prefix):
        out = self.actor_trunk.named(f"{prefix}/actor_trunk")
        out.update(self.actor_out.named(f"{prefix}/actor_out"))
        out.update(self.critic_trunk.named(f"{prefix}/critic_trunk"))
        out.update(self.critic_out.named(f"{prefix}/critic_out"))
        return out


def greedy_action(q_row):
    """Argmax with lowest-index tie-break (numpy argmax semantics)."""
    return int(np.argmax(q_row))


def sample_action(probs, rng):
    """Categorical draw from a probability row."""
    p = np.asarray(probs, dtype=np.float64)
    p = p / p.sum()
    return int(rng.choice(p.size, p=p))


class AgentBrain:
    """Everything one BS agent owns: nets, target copy, optimizers, RNG."""

    def __init__(self, mode, rng, n_demand, n_actions, learner_cfg, gat):
        self.mode = mode  # "dqn" | "a2c"
        self.rng = rng
        lc = learner_cfg
        self.gamma = None  # set by trainer
        self.repr = Representation(rng, n_demand, lc.embed_dim, gat,
                                   lc.gat_proj_dim, lc.gat_head_dim,
                                   lc.gat_heads, lc.gat_layers,
                                   lc.gat_temperature)
        self.n_actions = n_actions
        if mode == "dqn":
            self.q = DuelingQNet(rng, self.repr.state_dim, lc.hidden_dim,
                                 n_actions, dueling=lc.dueling)
            self.target_repr = Representation(rng, n_demand, lc.embed_dim, gat,
                                              lc.gat_proj_dim, lc.gat_head_dim,
                                              lc.gat_heads, lc.gat_layers,
                                              lc.gat_temperature)
            self.target_q = DuelingQNet(rng, self.repr.state_dim,
                                        lc.hidden_dim, n_actions,
                                        dueling=lc.dueling)
            self.sync_target()
            self.opt = ad.Adam(self.repr.params() + self.q.params(), lr=lc.lr_q)
            self.double = lc.double
        elif mode == "a2c":
            # actor and critic are separate towers down to the raw demands:
            # a critic-shaped trunk collapses equal-value states (starving
            # the policy), and actor gradients into a shared trunk blow up
            # the critic's input scale
            self.actor_repr = Representation(rng, n_demand, lc.embed_dim, gat,
                                             lc.gat_proj_dim, lc.gat_head_dim,
                                             lc.gat_heads, lc.gat_layers,
                                             lc.gat_temperature)
            self.ac = ActorCriticNet(rng, self.repr.state_dim, lc.hidden_dim,
                                     n_actions)
            self.critic_opt = ad.Adam(self.repr.params() + self.ac.critic_params(),
                                      lr=lc.lr_critic)
            self.actor_opt = ad.Adam(self.actor_repr.params() + self.ac.actor_params(),
                                     lr=lc.lr_actor)
            self.entropy_weight = lc.entropy_weight
            self.center_advantage = lc.a2c_center_advantage
        else:
            raise ValueError(f"unknown learner mode {mode!r}")

    # -- acting ---------------------------------------------------------
    def _state(self, d_prev_all, d_cur_own, mask, node, params="online"):
        rep = {"online": self.repr,
               "target": getattr(self, "target_repr", None),
               "actor": getattr(self, "actor_repr", None)}[params]
        return rep.state(Tensor(d_prev_all), Tensor(d_cur_own), mask, node)

    def act(self, d_prev_all, d_cur_own, mask, node):
        """Greedy (DQN) or sampled (A2C) action for a single observation."""
        with ad.no_grad():
            if self.mode == "dqn":
                s = self._state(d_prev_all[None], d_cur_own[None], mask, node)
                return greedy_action(self.q(s).data[0])
            s = self._state(d_prev_all[None], d_cur_own[None], mask, node,
                            params="actor")
            return sample_action(self.ac.probs(s).data[0], self.rng)

    def policy_batch(self, d_prev_all, d_cur_own, mask, node):
        """Greedy actions (DQN) or probs (A2C) for a batch, without grads."""
        with ad.no_grad():
            if self.mode == "dqn":
                s = self._state(d_prev_all, d_cur_own, mask, node)
                return np.argmax(self.q(s).data, axis=1)
            s = self._state(d_prev_all, d_cur_own, mask, node, params="actor")
            return self.ac.probs(s).data

    # -- learning ---------------------------------------------------------
    def q_values(self, d_prev_all, d_cur_own, mask, node, params="online"):
        net = self.q if params == "online" else self.target_q
        s = self._state(d_prev_all, d_cur_own, mask, node, params)
        return net(s)

    def train_dqn(self, batch, mask, node, gamma):
        d_prev, d_cur_own, actions, rewards, d_cur, d_next_own = batch
        with ad.no_grad():
            q_next_t = self.q_values(d_cur, d_next_own, mask, node,
                                     params="target").data
            if self.double:
                q_next_o = self.q_values(d_cur, d_next_own, mask, node).data
                a_star = np.argmax(q_next_o, axis=1)
            else:
                a_star = np.argmax(q_next_t, axis=1)
            y = rewards + gamma * q_next_t[np.arange(len(rewards)), a_star]
        q = self.q_values(d_prev, d_cur_own, mask, node)
        q_sa = ad.gather(q, actions)
        loss = ad.mean(ad.square(ad.sub(q_sa, Tensor(y))))
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return float(loss.data)

    def train_a2c(self, batch, mask, node, gamma, update_actor=True):
        """One TD step on the critic and (optionally) the actor.

        The actor can be held back while the critic warms up: with a cold
        critic every TD error is large and positive, which reinforces
        whatever the policy happens to prefer and collapses it before the
        advantages carry any ranking information. For the same reason the
        TD errors are batch-centered (when enabled) before entering the
        actor term: replayed off-policy samples otherwise carry a net
        advantage bias that funnels probability mass into whichever
        action is currently saturated.
        """
        d_prev, d_cur_own, actions, rewards, d_cur, d_next_own = batch
        s = self._state(d_prev, d_cur_own, mask, node)
        s2 = self._state(d_cur, d_next_own, mask, node)
        v = self.ac.value(s)
        v2 = self.ac.value(s2)
        target = ad.add(Tensor(rewards), v2 * gamma)
        delta = ad.sub(target, v)
        critic_loss = ad.mean(ad.square(delta))
        self.critic_opt.zero_grad()
        self.actor_opt.zero_grad()
        critic_loss.backward()
        if not update_actor:
            self.critic_opt.step()
            return float(critic_loss.data), 0.0
        self.critic_opt.step()
        adv = delta.data
        if self.center_advantage:
            adv = adv - adv.mean()
        # the TD error enters the actor loss as a constant; log-probs come
        # from the fused log-softmax so saturated policies stay finite
        s_a = self._state(d_prev, d_cur_own, mask, node, params="actor")
        ls = self.ac.log_probs(s_a)
        logp = ad.gather(ls, actions)
        ent = -ad.sum_(ad.mul(ad.exp(ls), ls), axis=-1)
        actor_loss = -ad.mean(ad.add(Tensor(adv) * logp,
                                     ent * self.entropy_weight))
        actor_loss.backward()
        self.actor_opt.step()
        return float(critic_loss.data), float(actor_loss.data)

    def sync_target(self):
        if self.mode != "dqn":
            return
        src = self.repr.params() + self.q.params()
        dst = self.target_repr.params() + self.target_q.params()
        for a, b in zip(src, dst):
            np.copyto(b.data, a.data)

    # -- persistence -------------------------------------------------------
    def named_params(self, prefix):
        out = self.repr.named(f"{prefix}/repr")
        if self.mode == "dqn":
            out.update(self.q.named(f"{prefix}/q"))
            out.update(self.target_repr.named(f"{prefix}/target_repr"))
            out.update(self.target_q.named(f"{prefix}/target_q"))
        else:
            out.update(self.actor_repr.named(f"{prefix}/actor_repr"))
            out.update(self.ac.named(f"{prefix}/ac"))
        return out

    def load_named(self, prefix, values):
        for name, tensor in self.named_params(prefix).items():
            np.copyto(tensor.data, values[name])
