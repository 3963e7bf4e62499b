import numpy as np
import pytest

from eegraph.dqn import (
    DuelingConfig,
    DuelingNet,
    Transition,
    TrainerConfig,
    bellman_target,
    build_buffer,
    compute_metrics,
    dueling_aggregate,
    evaluate,
    load_agent_checkpoint,
    precision_sensitivity_f1,
    save_agent_checkpoint,
    train_dqn,
)
from eegraph.env import Episode, RewardConfig, State
from eegraph.tensor import Tensor, finite_diff_check

CFG = RewardConfig()
SMALL = DuelingConfig(input_dim=6, trunk=(8, 8), head_hidden=4)


def make_episode(label=2, horizon=5, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    states = tuple(State(features=rng.standard_normal(dim), label=label,
                         index_in_episode=t) for t in range(horizon))
    return Episode(states=states, horizon=horizon)


class FixedQNet:
    """Hand-built policy: returns preset Q rows, optionally per time step."""

    def __init__(self, rows):
        self.rows = [np.asarray(r, dtype=float) for r in rows]
        self.calls = 0

    def q_values(self, s):
        q = self.rows[min(self.calls, len(self.rows) - 1)]
        self.calls += 1
        return q


class TestDuelingAggregation:
    def test_hand_case(self):
        q = dueling_aggregate(np.array([[1.0]]), np.array([[1.0, 2, 3, 4, 5]]))
        assert np.allclose(q, [[-1.0, 0.0, 1.0, 2.0, 3.0]])

    def test_constant_advantage_collapses_to_value(self):
        q = dueling_aggregate(np.array([[2.5]]), np.full((1, 5), 7.0))
        assert np.allclose(q, 2.5)

    def test_advantage_bias_shift_leaves_q_unchanged(self):
        net = DuelingNet(SMALL, seed=0)
        rng = np.random.default_rng(1)
        s = rng.standard_normal(6)
        q0 = net.q_values(s)
        net.adv_out[1].data += 3.7  # constant shift on every advantage output
        q1 = net.q_values(s)
        assert np.max(np.abs(q1 - q0)) < 1e-9
        assert np.argmax(q1) == np.argmax(q0)

    def test_output_has_five_actions(self):
        net = DuelingNet(DuelingConfig.paper(), seed=0)
        assert net.q_values(np.zeros(512)).shape == (5,)
        assert net.config.trunk == (1024, 2048)


class TestBuffer:
    def test_enumeration_count(self):
        eps = [make_episode(label=(i % 4) + 1, horizon=20, seed=i) for i in range(10)]
        buf = build_buffer(eps, CFG, seed=0)
        assert len(buf) == 10 * 20 * 5

    def test_per_state_action_composition(self):
        ep = make_episode(label=3, horizon=4)
        buf = build_buffer([ep], CFG, seed=0)
        by_state = {}
        for t in buf:
            by_state.setdefault(t.s.tobytes(), []).append(t)
        assert len(by_state) == 4
        for group in by_state.values():
            actions = sorted(t.a for t in group)
            assert actions == [0, 1, 2, 3, 4]
            rights = [t for t in group if t.r == CFG.r_right]
            assert len(rights) == 1 and rights[0].a == 3
            skips = [t for t in group if t.a == 0]
            assert len(skips) == 1 and skips[0].r == CFG.r_skip

    def test_skip_transitions_chain_to_next_state(self):
        ep = make_episode(horizon=3)
        buf = build_buffer([ep], CFG, seed=0)
        for t in buf:
            if t.a == 0:
                if np.array_equal(t.s, ep.states[2].features):
                    assert t.terminal  # last state: skip ends the episode
                else:
                    assert not t.terminal
            else:
                assert t.terminal

    def test_shuffle_deterministic(self):
        eps = [make_episode(seed=i) for i in range(3)]
        a = build_buffer(eps, CFG, seed=5)
        b = build_buffer(eps, CFG, seed=5)
        assert all(np.array_equal(x.s, y.s) and x.a == y.a for x, y in zip(a, b))

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            build_buffer([], CFG)


class TestBellman:
    def test_terminal_is_reward(self):
        t = Transition(s=np.zeros(6), a=2, r=10.0, s_next=None)
        net = DuelingNet(SMALL, seed=0)
        assert bellman_target(t, net, gamma=0.99) == 10.0

    def test_nonterminal_hand_value(self):
        t = Transition(s=np.zeros(3), a=0, r=-0.1, s_next=np.ones(3))
        net = FixedQNet([[10.0, 3.0, 1.0, 0.0, -1.0]])
        assert bellman_target(t, net, gamma=0.99) == -0.1 + 0.99 * 10.0
        assert bellman_target(t, net, gamma=0.99) == pytest.approx(9.8, abs=1e-12)

    def test_gamma_zero_gives_reward(self):
        t = Transition(s=np.zeros(6), a=0, r=-0.1, s_next=np.ones(6))
        net = DuelingNet(SMALL, seed=0)
        assert bellman_target(t, net, gamma=0.0) == -0.1


class TestTraining:
    def test_single_terminal_transition_fixed_point(self):
        t = Transition(s=np.full(6, 0.5), a=2, r=10.0, s_next=None)
        cfg = TrainerConfig(epochs=600, batch_size=1, target_update_every=50,
                            lr=0.01, l2_lambda=0.0, seed=0)
        net = train_dqn([t], cfg, config=SMALL)
        assert net.q_values(t.s)[2] == pytest.approx(10.0, abs=0.01)

    def test_clone_gives_identical_q(self):
        net = DuelingNet(SMALL, seed=3)
        twin = net.clone()
        rng = np.random.default_rng(0)
        for _ in range(5):
            s = rng.standard_normal(6)
            assert np.array_equal(net.q_values(s), twin.q_values(s))

    def test_loss_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        net = DuelingNet(DuelingConfig(input_dim=4, trunk=(5,), head_hidden=3), seed=1)
        batch = [Transition(s=rng.standard_normal(4), a=int(rng.integers(0, 5)),
                            r=float(rng.normal()), s_next=None) for _ in range(4)]
        targets = np.array([t.r for t in batch])
        s = np.stack([t.s for t in batch])
        acts = np.array([t.a for t in batch])

        def f():
            net.zero_grads()
            q, cache = net.forward(s)
            err = q[np.arange(4), acts] - targets
            grad_q = np.zeros_like(q)
            grad_q[np.arange(4), acts] = 2.0 * err / 4
            net.backward(grad_q, cache)
            return float(np.mean(err ** 2))

        assert finite_diff_check(f, net.parameters(), h=1e-5) < 1e-4

    def test_non_taken_action_gradient_only_via_mean_path(self):
        net = DuelingNet(DuelingConfig(input_dim=4, trunk=(5,), head_hidden=3), seed=2)
        rng = np.random.default_rng(5)
        t = Transition(s=rng.standard_normal(4), a=2, r=1.0, s_next=None)
        net.zero_grads()
        q, cache = net.forward(t.s[None])
        grad_q = np.zeros_like(q)
        grad_q[0, t.a] = 2.0 * (q[0, t.a] - t.r)
        net.backward(grad_q, cache)
        w_grad = net.adv_out[0].grad  # (head_hidden, 5)
        ha = cache[5]                 # advantage-stream hidden activations
        non_taken = [a for a in range(5) if a != t.a]
        # all non-taken columns carry only the identical mean-subtraction term,
        # and the taken column differs from them by exactly the direct term
        for a in non_taken[1:]:
            assert np.allclose(w_grad[:, a], w_grad[:, non_taken[0]], atol=1e-12)
        direct = w_grad[:, t.a] - w_grad[:, non_taken[0]]
        assert np.allclose(direct, grad_q[0, t.a] * ha[0], atol=1e-9)

    def test_nan_target_aborts(self):
        t = Transition(s=np.full(6, np.inf), a=1, r=1.0, s_next=None)
        cfg = TrainerConfig(epochs=1, batch_size=1, lr=0.01, seed=0)
        with pytest.raises(Exception):
            train_dqn([t], cfg, config=SMALL)


class TestEvaluate:
    def test_immediate_correct_classification(self):
        ep = make_episode(label=2, horizon=5)
        net = FixedQNet([[0.0, 1.0, 5.0, 1.0, 1.0]])
        res = evaluate(net, ep, CFG)
        assert res.correct and res.predicted == 2
        assert res.classification_time == 1
        assert res.cumulative_reward == CFG.r_right

    def test_always_skip_forced_at_horizon(self):
        ep = make_episode(label=4, horizon=6)
        net = FixedQNet([[9.0, 1.0, 2.0, 3.0, 4.0]])  # skip dominates everywhere
        res = evaluate(net, ep, CFG)
        assert res.classification_time == 6
        assert res.predicted == 4  # restricted argmax picks the best class
        assert res.cumulative_reward == pytest.approx(5 * CFG.r_skip + CFG.r_right)

    def test_skip_twice_then_correct(self):
        ep = make_episode(label=1, horizon=20)
        net = FixedQNet([[5, 0, 0, 0, 0], [5, 0, 0, 0, 0], [0, 9, 0, 0, 0]])
        res = evaluate(net, ep, CFG)
        assert res.classification_time == 3
        assert res.cumulative_reward == pytest.approx(9.8)

    def test_never_exceeds_horizon(self):
        for h in (1, 2, 7):
            ep = make_episode(label=1, horizon=h)
            net = FixedQNet([[1.0, 0.0, 0.0, 0.0, 0.0]])
            res = evaluate(net, ep, CFG)
            assert res.classification_time <= h

    def test_immediate_classification_maximises_scripted_reward(self):
        # with these rewards, any skip strictly lowers the best achievable return
        ep = make_episode(label=3, horizon=10)
        oracle = FixedQNet([[0, 0, 0, 1, 0]])
        best = evaluate(oracle, ep, CFG).cumulative_reward
        for t in range(1, 10):
            assert best > t * CFG.r_skip + CFG.r_right


class TestMetrics:
    def test_all_correct(self):
        results = []
        for label in (1, 2, 3, 4):
            row = np.zeros(5)
            row[label] = 5.0
            results.append(evaluate(FixedQNet([row]), make_episode(label=label), CFG))
        m = compute_metrics(results)
        assert m.accuracy == 1.0
        assert m.macro_f1 == pytest.approx(1.0)
        assert m.macro_precision == pytest.approx(1.0)

    def test_two_class_confusion_hand_values(self):
        stats = precision_sensitivity_f1(np.array([[1, 1], [0, 2]]))
        precision, sensitivity, f1 = stats[0]
        assert precision == 1.0
        assert sensitivity == 0.5
        assert f1 == pytest.approx(2.0 / 3.0)

    def test_absent_class_excluded_with_warning(self):
        results = []
        for label in (1, 2):
            ep = make_episode(label=label, horizon=3)
            row = np.zeros(5)
            row[label] = 5.0
            results.append(evaluate(FixedQNet([row]), ep, CFG))
        with pytest.warns(RuntimeWarning, match="absent"):
            m = compute_metrics(results)
        assert set(m.per_class_f1) == {1, 2}
        assert m.accuracy == 1.0

    def test_empty_results_error(self):
        with pytest.raises(ValueError):
            compute_metrics([])

    def test_mean_time(self):
        eps = [make_episode(label=1, horizon=4, seed=i) for i in range(2)]
        nets = [FixedQNet([[0, 9, 0, 0, 0]]), FixedQNet([[5, 0, 0, 0, 0], [0, 9, 0, 0, 0]])]
        results = [evaluate(net, ep, CFG) for net, ep in zip(nets, eps)]
        with pytest.warns(RuntimeWarning, match="absent"):
            m = compute_metrics(results)
        assert m.mean_classification_time == pytest.approx(1.5)


class TestSkipAdvantage:
    """The skip mechanism pays off on streams with ambiguous time points."""

    def _episodes(self, n_episodes=120, horizon=8, seed=0):
        # features: noisy one-hot of the true class on clear points, a 50/50
        # two-class blend on ambiguous points
        rng = np.random.default_rng(seed)
        episodes = []
        for i in range(n_episodes):
            label = (i % 4) + 1
            states = []
            for t in range(horizon):
                onehot = np.zeros(4)
                if rng.random() < 0.5:
                    onehot[label - 1] = 1.0
                else:
                    other = int((label + rng.integers(1, 4) - 1) % 4)
                    onehot[label - 1] = 0.5
                    onehot[other] = 0.5
                feat = np.concatenate([onehot, [1.0]]) + 0.05 * rng.standard_normal(5)
                states.append(State(features=feat, label=label, index_in_episode=t))
            episodes.append(Episode(states=tuple(states), horizon=horizon))
        return episodes

    def test_agent_beats_forced_first_state_baseline(self):
        episodes = self._episodes()
        train, _, test = episodes[:96], None, episodes[96:]
        buf = build_buffer(train, CFG, seed=0)
        cfg = TrainerConfig(epochs=40, batch_size=63, target_update_every=50,
                            lr=0.003, l2_lambda=0.0, seed=0)
        net = train_dqn(buf, cfg, config=DuelingConfig(input_dim=5, trunk=(32,),
                                                       head_hidden=16))
        agent = compute_metrics([evaluate(net, ep, CFG) for ep in test])
        forced = compute_metrics([
            evaluate(net, Episode(states=(ep.states[0],), horizon=1), CFG)
            for ep in test])
        assert agent.accuracy >= forced.accuracy + 0.10


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        net = DuelingNet(SMALL, seed=9)
        cfg = TrainerConfig(seed=9)
        path = tmp_path / "agent.npz"
        save_agent_checkpoint(path, net, cfg, CFG, extra_meta={"subject": "S1"})
        loaded, meta = load_agent_checkpoint(path)
        s = np.random.default_rng(2).standard_normal(6)
        assert np.array_equal(net.q_values(s), loaded.q_values(s))
        assert meta["reward"]["horizon"] == 20
        assert meta["subject"] == "S1"
