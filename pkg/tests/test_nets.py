"""Network-stack behaviour: encoders, masked attention, heads, gradients."""

import numpy as np
import pytest

from sliceran import autodiff as ad
from sliceran import nets
from sliceran.autodiff import Tensor
from sliceran.config import LearnerSection

RNG = np.random.default_rng(0)

PATH_MASK = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], bool)  # 0-1-2 chain
FULL3 = np.ones((3, 3), bool)


def tiny_learner(**kw):
    lc = LearnerSection(embed_dim=4, gat_proj_dim=3, gat_head_dim=2,
                        gat_heads=2, hidden_dim=8)
    for k, v in kw.items():
        setattr(lc, k, v)
    return lc


class TestEncoder:
    def test_zero_input_zero_bias_gives_zero(self):
        enc = nets.Affine(np.random.default_rng(1), 3, 32)
        h = ad.relu(enc(Tensor(np.zeros((5, 3)))))
        assert (h.data == 0).all()

    def test_output_dim_and_nonnegativity(self):
        enc = nets.Affine(np.random.default_rng(2), 3, 32)
        h = ad.relu(enc(Tensor(RNG.standard_normal((7, 3)))))
        assert h.shape == (7, 32)
        assert (h.data >= 0).all()


class TestAttention:
    def test_orthogonal_embeddings_zero_score(self):
        layer = nets.GatLayer(np.random.default_rng(3), 4, 4, 2, 1, 1.0)
        layer.Ws.data[:] = np.eye(4)
        layer.Wt.data[:] = np.eye(4)
        h = Tensor(np.array([[[1.0, 0, 0, 0], [0, 1.0, 0, 0]]]))
        alpha = layer.attention(h, np.ones((2, 2), bool)).data[0]
        # e_mm = 1, e_mj = 0 for orthogonal unit vectors
        expected = np.exp(1.0) / (np.exp(1.0) + np.exp(0.0))
        assert alpha[0, 0] == pytest.approx(expected)
        assert alpha[0, 1] == pytest.approx(1 - expected)

    def test_rows_sum_to_one_and_mask_exact(self):
        layer = nets.GatLayer(np.random.default_rng(4), 4, 3, 2, 8, 1.0)
        h = Tensor(RNG.standard_normal((2, 3, 4)))
        alpha = layer.attention(h, PATH_MASK).data
        assert np.allclose(alpha.sum(axis=-1), 1.0, atol=1e-12)
        assert (alpha[:, ~PATH_MASK] == 0).all()

    def test_equal_scores_uniform_over_neighborhood(self):
        layer = nets.GatLayer(np.random.default_rng(5), 4, 3, 2, 1, 1.0)
        h = Tensor(np.zeros((1, 7, 4)))  # all scores 0
        alpha = layer.attention(h, np.ones((7, 7), bool)).data[0]
        assert np.allclose(alpha, 1.0 / 7.0)

    def test_large_temperature_concentrates(self):
        layer = nets.GatLayer(np.random.default_rng(6), 2, 2, 2, 1, 50.0)
        layer.Ws.data[:] = np.eye(2)
        layer.Wt.data[:] = np.eye(2)
        h = Tensor(np.array([[[1.0, 0.0], [2.0, 0.0], [0.5, 0.0]]]))
        alpha = layer.attention(h, FULL3).data[0]
        assert alpha[0, 1] > 0.999  # the max-score neighbor takes the mass


class TestGatLayer:
    def test_singleton_neighborhood_is_per_node_transform(self):
        layer = nets.GatLayer(np.random.default_rng(7), 4, 3, 2, 2, 1.0)
        h = RNG.standard_normal((1, 3, 4))
        out = layer(Tensor(h), np.eye(3, dtype=bool)).data[0]
        # alpha_mm = 1, so out = relu(Wc h) with heads side by side
        ref = np.maximum(h[0] @ layer.Wc.data, 0.0)
        ref = ref.reshape(3, 2, 2)  # (M, heads, head_dim) after stacking
        assert np.allclose(out, ref.reshape(3, 4))

    def test_concat_output_dim(self):
        layer = nets.GatLayer(np.random.default_rng(8), 32, 32, 8, 8, 1.0)
        out = layer(Tensor(RNG.standard_normal((2, 5, 32))), np.ones((5, 5), bool))
        assert out.shape == (2, 5, 64)

    def test_neighbor_permutation_invariance(self):
        layer = nets.GatLayer(np.random.default_rng(9), 4, 3, 2, 2, 1.0)
        h = RNG.standard_normal((1, 5, 4))
        mask = np.ones((5, 5), bool)
        out = layer(Tensor(h), mask).data[0]
        perm = np.array([3, 0, 4, 2, 1])
        out_p = layer(Tensor(h[:, perm]), mask[perm][:, perm]).data[0]
        assert np.allclose(out_p, out[perm], atol=1e-12)


class TestRepresentation:
    def make(self, gat=True):
        return nets.Representation(np.random.default_rng(10), 3, 4, gat, 3, 2,
                                   2, 2, 1.0)

    def test_state_dim(self):
        rep = self.make()
        assert rep.state_dim == 4 + 2 * (2 * 2)
        rep_plain = self.make(gat=False)
        assert rep_plain.state_dim == 8
        # default dims give the documented 160 / 64 split
        lc = LearnerSection()
        full = nets.Representation(np.random.default_rng(0), 3, lc.embed_dim,
                                   True, lc.gat_proj_dim, lc.gat_head_dim,
                                   lc.gat_heads, lc.gat_layers,
                                   lc.gat_temperature)
        assert full.state_dim == 160

    def test_two_hop_influence_on_path_graph(self):
        rep = self.make()
        d = RNG.random((1, 3, 3))
        d_cur = RNG.random((1, 3))

        def pieces(dp):
            h = ad.relu(rep.enc_prev(Tensor(dp)))
            g1 = rep.gat_layers[0](h, PATH_MASK)
            g2 = rep.gat_layers[1](g1, PATH_MASK)
            return g1.data[0, 0], g2.data[0, 0]
        g1a, g2a = pieces(d)
        d2 = d.copy()
        d2[0, 2] += 1.0  # perturb the 2-hop neighbor of node 0
        g1b, g2b = pieces(d2)
        assert np.allclose(g1a, g1b)
        assert not np.allclose(g2a, g2b)

    def test_full_forward_permutation_invariance(self):
        rep = self.make()
        d_prev = RNG.random((2, 3, 3))
        d_cur = RNG.random((2, 3))
        s0 = rep.state(Tensor(d_prev), Tensor(d_cur), PATH_MASK, 0).data
        perm = np.array([2, 1, 0])  # relabel; node 0 becomes node 2
        mask_p = PATH_MASK[perm][:, perm]
        s0_p = rep.state(Tensor(d_prev[:, perm]), Tensor(d_cur), mask_p, 2).data
        assert np.allclose(s0, s0_p, atol=1e-12)


class TestDuelingHead:
    def test_mean_q_equals_v(self):
        net = nets.DuelingQNet(np.random.default_rng(11), 6, 8, 136)
        s = Tensor(RNG.standard_normal((5, 6)))
        q = net(s).data
        t = ad.relu(net.trunk(s))
        v = net.value(t).data[:, 0]
        assert np.max(np.abs(q.mean(axis=1) - v)) < 1e-9

    def test_advantage_shift_invariance(self):
        net = nets.DuelingQNet(np.random.default_rng(12), 6, 8, 10)
        s = Tensor(RNG.standard_normal((4, 6)))
        q0 = net(s).data.copy()
        net.adv.b.data += 123.456
        q1 = net(s).data
        assert np.allclose(q0, q1, atol=1e-9)

    def test_output_length_coarse_grid(self):
        net = nets.DuelingQNet(np.random.default_rng(13), 160, 128, 136)
        q = net(Tensor(RNG.standard_normal((2, 160))))
        assert q.shape == (2, 136)


class TestActionSelection:
    def test_greedy_tie_breaks_low(self):
        assert nets.greedy_action(np.zeros(7)) == 0
        q = np.zeros(10)
        q[[2, 7]] = 1.0
        assert nets.greedy_action(q) == 2
        one_hot = np.eye(5)[3]
        assert nets.greedy_action(one_hot) == 3

    def test_sample_action_degenerate(self):
        p = np.zeros(6)
        p[4] = 1.0
        rng = np.random.default_rng(14)
        assert all(nets.sample_action(p, rng) == 4 for _ in range(20))

    def test_sample_action_frequencies(self):
        p = np.array([0.5, 0.3, 0.2])
        rng = np.random.default_rng(15)
        draws = np.array([nets.sample_action(p, rng) for _ in range(100_000)])
        freq = np.bincount(draws, minlength=3) / draws.size
        assert np.allclose(freq, p, atol=0.01)


def make_brain(mode, gat=True, n_actions=5, seed=16):
    return nets.AgentBrain(mode, np.random.default_rng(seed), 3, n_actions,
                           tiny_learner(), gat)


def toy_batch(n_actions=5, b=6):
    rng = np.random.default_rng(17)
    return (rng.random((b, 3, 3)), rng.random((b, 3)),
            rng.integers(0, n_actions, b), rng.random(b),
            rng.random((b, 3, 3)), rng.random((b, 3)))


class TestDqnTargets:
    def test_double_equals_vanilla_when_synced(self):
        brain = make_brain("dqn")
        batch = toy_batch()
        d_prev, d_cur_own, actions, rewards, d_cur, d_next_own = batch
        with ad.no_grad():
            qt = brain.q_values(d_cur, d_next_own, PATH_MASK, 1, "target").data
            qo = brain.q_values(d_cur, d_next_own, PATH_MASK, 1).data
        assert np.array_equal(qt, qo)  # freshly synced
        y_vanilla = rewards + 0.9 * qt.max(axis=1)
        a_star = np.argmax(qo, axis=1)
        y_double = rewards + 0.9 * qt[np.arange(len(rewards)), a_star]
        assert np.array_equal(y_vanilla, y_double)

    def test_unit_reward_zero_q_target(self):
        brain = make_brain("dqn")
        for p in brain.target_repr.params() + brain.target_q.params():
            p.data[:] = 0.0
        batch = toy_batch()
        with ad.no_grad():
            qt = brain.q_values(batch[4], batch[5], PATH_MASK, 1, "target").data
        y = 1.0 + 0.9 * qt.max(axis=1)
        assert np.allclose(y, 1.0)

    def test_train_step_reduces_td_error_on_fixed_batch(self):
        brain = make_brain("dqn")
        batch = toy_batch()
        first = brain.train_dqn(batch, PATH_MASK, 1, gamma=0.9)
        for _ in range(60):
            last = brain.train_dqn(batch, PATH_MASK, 1, gamma=0.9)
        assert last < first

    def test_sync_target_bitwise(self):
        brain = make_brain("dqn")
        brain.train_dqn(toy_batch(), PATH_MASK, 1, gamma=0.9)
        src = brain.repr.params() + brain.q.params()
        dst = brain.target_repr.params() + brain.target_q.params()
        assert any(not np.array_equal(a.data, b.data) for a, b in zip(src, dst))
        brain.sync_target()
        assert all(np.array_equal(a.data, b.data) for a, b in zip(src, dst))


class TestA2C:
    def test_td_error_and_critic_loss_values(self):
        # V == 0 and r = 0.5 -> delta = 0.5, loss = 0.25
        brain = make_brain("a2c")
        for p in brain.ac.critic_params():
            p.data[:] = 0.0
        d_prev, d_cur_own, actions, _, d_cur, d_next_own = toy_batch()
        rewards = np.full(6, 0.5)
        s = brain._state(d_prev, d_cur_own, PATH_MASK, 1)
        v = brain.ac.value(s).data
        assert np.allclose(v, 0.0)
        batch = (d_prev, d_cur_own, actions, rewards, d_cur, d_next_own)
        critic_loss, _ = brain.train_a2c(batch, PATH_MASK, 1, gamma=0.9)
        assert critic_loss == pytest.approx(0.25)

    def test_actor_loss_sign_pushes_probability_up(self):
        brain = make_brain("a2c")
        d_prev, d_cur_own, actions, _, d_cur, d_next_own = toy_batch()
        actions = np.zeros(6, np.int64)
        rewards = np.ones(6)  # strongly positive TD error
        with ad.no_grad():
            s = brain._state(d_prev, d_cur_own, PATH_MASK, 1)
            before = brain.ac.probs(s).data[:, 0].mean()
        for _ in range(30):
            brain.train_a2c((d_prev, d_cur_own, actions, rewards, d_cur,
                             d_next_own), PATH_MASK, 1, gamma=0.0)
        with ad.no_grad():
            s = brain._state(d_prev, d_cur_own, PATH_MASK, 1)
            after = brain.ac.probs(s).data[:, 0].mean()
        assert after > before

    def test_uniform_policy_entropy(self):
        h = ad.entropy(Tensor(np.full((1, 136), 1 / 136)))
        assert float(h.data[0]) == pytest.approx(np.log(136.0), abs=1e-12)


class TestEndToEndGradient:
    def test_q_loss_gradient_matches_finite_differences(self):
        brain = make_brain("dqn", seed=18)
        d_prev, d_cur_own, actions, rewards, _, _ = toy_batch()
        y = rewards + 0.3

        def loss_value():
            with ad.no_grad():
                q = brain.q_values(d_prev, d_cur_own, PATH_MASK, 1)
                picked = q.data[np.arange(len(actions)), actions]
                return float(((picked - y) ** 2).mean())

        q = brain.q_values(d_prev, d_cur_own, PATH_MASK, 1)
        loss = ad.mean(ad.square(ad.sub(ad.gather(q, actions), Tensor(y))))
        for p in brain.repr.params() + brain.q.params():
            p.grad = None
        loss.backward()
        rng = np.random.default_rng(19)
        h = 1e-5
        for p in brain.repr.params() + brain.q.params():
            flat = p.data.reshape(-1)
            grad = p.grad.reshape(-1)
            for idx in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                hi = loss_value()
                flat[idx] = orig - h
                lo = loss_value()
                flat[idx] = orig
                ref = (hi - lo) / (2 * h)
                assert grad[idx] == pytest.approx(ref, rel=1e-3, abs=1e-8)


class TestPersistence:
    def test_checkpoint_roundtrip_restores_behaviour(self, tmp_path):
        brain = make_brain("dqn", seed=20)
        brain.train_dqn(toy_batch(), PATH_MASK, 1, gamma=0.9)
        named = {k: v.data for k, v in brain.named_params("agent/0").items()}
        ad.save_checkpoint(tmp_path / "ck", named)
        other = make_brain("dqn", seed=99)
        d_prev, d_cur_own, *_ = toy_batch()
        with ad.no_grad():
            before = other.q_values(d_prev, d_cur_own, PATH_MASK, 1).data
        other.load_named("agent/0", ad.load_checkpoint(tmp_path / "ck"))
        with ad.no_grad():
            after = other.q_values(d_prev, d_cur_own, PATH_MASK, 1).data
            ref = brain.q_values(d_prev, d_cur_own, PATH_MASK, 1).data
        assert not np.array_equal(before, after)
        assert np.array_equal(after, ref)
