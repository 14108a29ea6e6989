import numpy as np
import pytest

from prhea import persistence
from prhea.env import make_env
from prhea.learner import (
    FIXED_1,
    HALF_L,
    EvalReport,
    Learner,
    LearnConfig,
    ReplayBuffer,
    Sample,
    evaluate,
    train,
    training_cycle,
)
from prhea.nn import GaussianPolicy, ValueNet
from prhea.planner import PlanConfig

GAMMA = 0.99
SMALL_PLAN = PlanConfig(horizon=20, generations=2)


def filled_learner(env, count, learn, seed=0):
    learner = Learner.create(env, learn, seed)
    rng = np.random.default_rng(seed)
    learner.buffer.push(rng.normal(size=(count, env.spec.state_dim)),
                        rng.uniform(-1, 1, size=(count, env.spec.action_dim)),
                        rng.normal(size=count))
    return learner


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(3, 1, 1)
        for i in range(1, 5):
            buf.push_samples([Sample(np.array([i]), np.array([-i]), float(i))])
        s, a, r = buf.contents()
        assert r.tolist() == [2.0, 3.0, 4.0]
        assert s[:, 0].tolist() == [2.0, 3.0, 4.0] and a[:, 0].tolist() == [-2.0, -3.0, -4.0]
        assert len(buf) == 3 and buf.inserted == 4

    def test_batch_order_preserved(self):
        buf = ReplayBuffer(10, 2, 1)
        states = np.arange(8.0).reshape(4, 2)
        buf.push(states, np.zeros((4, 1)), np.arange(4.0))
        assert np.array_equal(buf.contents()[0], states)

    def test_uniform_sampling(self):
        k = 10
        buf = ReplayBuffer(k, 1, 1)
        buf.push(np.arange(12.0)[:, None], np.zeros((12, 1)), np.arange(12.0))  # wraps once
        rng = np.random.default_rng(0)
        draws = np.concatenate([buf.sample(k, rng)[2] for _ in range(10_000)])
        counts = np.array([(draws == v).sum() for v in range(2, 12)])
        assert set(np.unique(draws)) == set(range(2, 12))
        assert np.all(np.abs(counts / draws.size - 1 / k) <= 0.05 / k)

    def test_sample_too_small(self):
        buf = ReplayBuffer(5, 1, 1)
        buf.push(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(2))
        with pytest.raises(ValueError):
            buf.sample(3, np.random.default_rng(0))

    def test_mismatched_push(self):
        with pytest.raises(ValueError):
            ReplayBuffer(5, 1, 1).push(np.zeros((2, 1)), np.zeros((3, 1)), np.zeros(2))


class TestLearnConfig:
    def test_defaults(self):
        c = LearnConfig()
        assert (c.minibatch, c.buffer_capacity, c.replay_start, c.trains_per_cycle) == (32, 20000, 5000, 50)
        assert c.execution_rule == HALF_L

    @pytest.mark.parametrize("length, expected", [(20, 10), (7, 3), (1, 1), (0, 1)])
    def test_half_l(self, length, expected):
        assert LearnConfig().steps_to_execute(length) == expected

    def test_fixed_one(self):
        assert LearnConfig(execution_rule=FIXED_1).steps_to_execute(20) == 1

    @pytest.mark.parametrize("kw", [dict(replay_start=30000), dict(minibatch=6000), dict(execution_rule="x"),
                                    dict(total_steps=-1)])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            LearnConfig(**kw)


class TestTrainingCycle:
    def test_gate_closed_below_start(self):
        env = make_env("pointmass")
        env.reset(0)
        learn = LearnConfig()
        learner = filled_learner(env, 4999, learn)
        before = (learner.policy.flat.copy(), learner.value.flat.copy())
        stats, _ = training_cycle(env, learner, SMALL_PLAN, learn)
        assert not stats.value_bootstrap and stats.bootstrap == 0.0
        assert stats.gradient_steps == 0
        assert np.array_equal(before[0], learner.policy.flat) and np.array_equal(before[1], learner.value.flat)

    def test_gate_open_trains(self):
        env = make_env("pointmass")
        env.reset(0)
        learn = LearnConfig()
        learner = filled_learner(env, 5000, learn)
        stats, _ = training_cycle(env, learner, SMALL_PLAN, learn)
        assert stats.value_bootstrap and stats.bootstrap != 0.0
        assert stats.gradient_steps == 50 and stats.minibatch_sizes == [32] * 50
        assert learner.policy_opt.steps == 50 and learner.value_opt.steps == 50

    def test_half_l_pushes_ten(self):
        env = make_env("pointmass")
        env.reset(0)
        learn = LearnConfig()
        learner = Learner.create(env, learn, 0)
        stats, tail = training_cycle(env, learner, SMALL_PLAN, learn)
        assert stats.plan_length == 20 and stats.steps == 10
        assert len(learner.buffer) == 10 and learner.steps == 10
        assert tail.shape == (10, 2)

    def test_fixed_one_pushes_one(self):
        env = make_env("pointmass")
        env.reset(0)
        learn = LearnConfig(execution_rule=FIXED_1)
        learner = Learner.create(env, learn, 0)
        stats, tail = training_cycle(env, learner, SMALL_PLAN, learn)
        assert stats.steps == 1 and len(learner.buffer) == 1 and len(tail) == 19

    def test_pushed_returns_follow_recursion(self):
        env = make_env("leanwalker")
        env.reset(0)
        learn = LearnConfig()
        learner = Learner.create(env, learn, 0)
        stats, _ = training_cycle(env, learner, SMALL_PLAN, learn)
        states, _, returns = learner.buffer.contents()
        r = stats.rewards
        for t in range(stats.steps - 1):
            assert abs(returns[t] - (r[t] + GAMMA * returns[t + 1])) <= 1e-10
        env.reset(0)
        assert np.array_equal(states[0], env.state)

    def test_short_plan_at_episode_end(self):
        env = make_env("pointmass")
        env.reset(0)
        env.restore(env.snapshot().__class__("pointmass", np.zeros(4), 199, False))
        learn = LearnConfig()
        learner = Learner.create(env, learn, 0)
        stats, tail = training_cycle(env, learner, SMALL_PLAN, learn)
        assert stats.plan_length == 1 and stats.steps == 1 and env.done and len(tail) == 0


class TestTrain:
    def test_zero_budget(self, tmp_path):
        learner = train("pointmass", SMALL_PLAN, LearnConfig(total_steps=0), seed=1, out_dir=tmp_path)
        assert learner.steps == 0 and learner.curve == []
        assert (tmp_path / "curve.csv").read_text() == "steps,episode,return\n"
        assert persistence.load(tmp_path / "checkpoint.ckpt").steps == 0

    def test_budget_checked_between_episodes(self, tmp_path):
        learner = train("pointmass", SMALL_PLAN, LearnConfig(total_steps=250), seed=1, out_dir=tmp_path)
        assert learner.steps == 400 and learner.episodes == 2
        lines = (tmp_path / "curve.csv").read_text().splitlines()
        assert lines[0] == "steps,episode,return"
        assert [int(l.split(",")[0]) for l in lines[1:]] == [200, 400]

    def test_repeatable(self, tmp_path):
        learn = LearnConfig(total_steps=400)
        train("pointmass", SMALL_PLAN, learn, seed=3, out_dir=tmp_path / "a")
        train("pointmass", SMALL_PLAN, learn, seed=3, out_dir=tmp_path / "b")
        for name in ("curve.csv", "checkpoint.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_checkpoint_cadence(self, tmp_path, monkeypatch):
        saved = []
        real_save = persistence.save
        monkeypatch.setattr(persistence, "save", lambda c, p: (saved.append(c.episodes), real_save(c, p)))
        train("pointmass", SMALL_PLAN, LearnConfig(total_steps=1000, checkpoint_every=2), seed=0,
              out_dir=tmp_path)
        assert saved == [2, 4, 5]


class TestEvaluate:
    def test_untrained_networks_complete(self):
        rng = np.random.default_rng(0)
        policy = GaussianPolicy.build(4, 2, rng)
        value = ValueNet.build(4, rng)
        report = evaluate(policy, value, "pointmass", PlanConfig(horizon=10, generations=2), seeds=[0])
        assert len(report.returns) == 1 and report.std == 0.0
        assert np.isfinite(report.mean)

    def test_identical_seeds_zero_spread(self):
        policy = GaussianPolicy.build(4, 1, np.random.default_rng(0))
        report = evaluate(policy, None, "trapswimmer", PlanConfig(horizon=5, generations=2), seeds=[4, 4, 4])
        assert report.std == 0.0

    def test_population_std(self):
        assert EvalReport([1.0, 3.0]).std == 1.0
        assert EvalReport([2.0]).std == 0.0

    def test_dimension_mismatch(self):
        policy = GaussianPolicy.build(4, 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            evaluate(policy, None, "leanwalker", SMALL_PLAN, seeds=[0])
