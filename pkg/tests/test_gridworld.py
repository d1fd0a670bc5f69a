import itertools

import numpy as np
import pytest

import tailcast.autodiff as ad
from tailcast.gridworld import (
    ACTIONS,
    EnvParams,
    GridTask,
    PolicyNet,
    TaskBank,
    generate_bank,
    generate_task,
    optimal_values,
    policy_values,
    policy_values_batch,
    pretrain,
    regret,
    transition_tables,
    uniform_policy_return,
)
from tailcast.rng import stream


def bulk_task(start=0, goal=7, width=8, height=8):
    return GridTask(width, height, start, goal, frozenset(), "bulk")


def enumeration_value(task, env, probs):
    """Start value by explicit enumeration of all action sequences.

    Independent of the backward-induction route: walks every length-H
    action tuple, accumulating discounted reward until absorption and
    weighting by the product of per-step action probabilities.
    """
    next_cell, reward, active = transition_tables(task, env)
    total = 0.0
    for seq in itertools.product(range(4), repeat=env.horizon):
        cell, p, ret, disc, scale = task.start, 1.0, 0.0, 1.0, 1.0
        for t, a in enumerate(seq):
            if not active[cell]:
                # the remaining 4^(H-t) action completions share this prefix
                scale = 4.0 ** -(env.horizon - t)
                break
            p *= probs[t, cell, a]
            ret += disc * reward[cell, a]
            disc *= env.gamma
            cell = next_cell[cell, a]
        total += scale * p * ret
    return total


def test_task_validation():
    with pytest.raises(ValueError):
        GridTask(8, 8, 3, 3, frozenset(), "bulk")
    with pytest.raises(ValueError):
        GridTask(8, 8, 0, 7, frozenset({0}), "rare")


def test_record_roundtrip():
    t = GridTask(8, 8, 5, 60, frozenset({9, 17, 33}), "rare")
    assert GridTask.from_record(t.to_record()) == t


def test_transition_offgrid_noop():
    t = bulk_task()
    next_cell, reward, active = transition_tables(t, EnvParams())
    # cell 0 is the top-left corner: up and left are no-ops
    assert next_cell[0, 0] == 0 and next_cell[0, 2] == 0
    assert next_cell[0, 1] == 8 and next_cell[0, 3] == 1
    np.testing.assert_allclose(reward[0], -0.01)
    assert active[t.start] and not active[t.goal]


def test_entry_rewards():
    t = GridTask(8, 8, 0, 6, frozenset({14}), "rare")
    _, reward, active = transition_tables(t, EnvParams())
    assert reward[5, 3] == pytest.approx(-0.01 + 1.0)    # step right into goal
    assert reward[6, 1] == pytest.approx(-0.01 - 1.0)    # step down into trap
    assert not active[14]


def test_optimal_value_distance_formula():
    # trap-free: V*(start) = goal_reward + dist * step_cost
    env = EnvParams()
    for start, goal, d in ((0, 5, 5), (0, 14, 7), (9, 62, 11)):
        t = bulk_task(start, goal)
        V = optimal_values(t, env)
        if d <= env.horizon:
            assert V[0, start] == pytest.approx(1.0 + d * -0.01)
        else:
            assert V[0, start] == pytest.approx(env.horizon * -0.01)
    # the two reference points: 0.95 at distance 5, -0.10 when out of reach
    assert optimal_values(bulk_task(0, 5), env)[0, 0] == pytest.approx(0.95)
    assert optimal_values(bulk_task(0, 63), env)[0, 0] == pytest.approx(-0.10)


def test_optimal_value_walled_goal():
    # goal fully ringed by traps: best play is to idle on step costs
    goal = 2 * 8 + 6
    ring = frozenset(goal + d for d in (-9, -8, -7, -1, 1, 7, 8, 9))
    t = GridTask(8, 8, 56, goal, ring, "rare")
    env = EnvParams()
    assert optimal_values(t, env)[0, 56] == pytest.approx(env.horizon * -0.01)


def test_policy_values_match_enumeration():
    rng = np.random.default_rng(0)
    for trial in range(25):
        width = int(rng.integers(3, 5))
        height = int(rng.integers(3, 5))
        horizon = int(rng.integers(3, 7))
        gamma = float(rng.choice([1.0, 0.9]))
        env = EnvParams(horizon=horizon, gamma=gamma, min_start_goal_dist=2)
        n = width * height
        start, goal = rng.choice(n, size=2, replace=False)
        traps = frozenset(int(c) for c in range(n)
                          if c not in (start, goal) and rng.uniform() < 0.2)
        task = GridTask(width, height, int(start), int(goal), traps, "rare")
        logits = rng.standard_normal((horizon, n, 4))
        probs = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        got = float(policy_values(task, env, ad.constant(logits)).value[0])
        want = enumeration_value(task, env, probs)
        assert got == pytest.approx(want, abs=1e-10)


def test_regret_nonnegative_random_policies():
    rng = np.random.default_rng(1)
    env = EnvParams()
    tasks = [generate_task(rng, "bulk") for _ in range(64)]
    logits = ad.constant(rng.standard_normal((64, env.horizon, 64, 4)))
    from tailcast.gridworld import regret_batch

    vals = regret_batch(tasks, env, logits).value
    assert np.all(vals >= -1e-12)


def test_regret_zero_for_greedy_logits():
    env = EnvParams()
    t = bulk_task(0, 7)
    # sharp logits pointing right along the top row
    logits = np.zeros((env.horizon, 64, 4))
    logits[:, :, 3] = 50.0
    assert float(regret(t, env, ad.constant(logits)).value) == pytest.approx(0.0, abs=1e-9)


def test_regret_gradient_check():
    rng = np.random.default_rng(2)
    env = EnvParams(horizon=4, min_start_goal_dist=2)
    t = GridTask(4, 4, 0, 10, frozenset({5}), "rare")
    point = rng.standard_normal((4, 16, 4)) * 0.5
    err = ad.gradient_check(lambda x: regret(t, env, x), point, step=1e-6)
    assert err < 1e-5


def test_uniform_policy_below_optimal():
    env = EnvParams()
    t = bulk_task(0, 14)
    assert uniform_policy_return(t, env) < float(optimal_values(t, env)[0, 0])


def test_generate_task_modes():
    rng = stream(0, 0)
    env = EnvParams()
    b = generate_task(rng, "bulk")
    assert b.severity == "bulk" and not b.traps
    r = generate_task(rng, "rare")
    assert r.severity == "rare" and len(r.traps) > 10
    from tailcast.gridworld import _manhattan, _reachable_within

    assert _manhattan(b.start, b.goal, b.width) >= env.min_start_goal_dist
    assert _reachable_within(r, env.horizon)
    with pytest.raises(ValueError):
        generate_task(rng, "bulk", width=3, height=3)
    with pytest.raises(ValueError):
        generate_task(rng, "medium")


def test_generate_task_rejection_budget():
    rng = stream(0, 1)
    with pytest.raises(RuntimeError):
        # all eligible cells trapped: goal at distance >= 5 is never reachable
        generate_task(rng, "rare", trap_density=1.0, max_attempts=50)


def test_generate_bank_composition():
    rng = stream(1, 0)
    bank = generate_bank(rng, 600, eps=5e-3, seed=17)
    assert len(bank.tasks) == 600
    assert bank.rare_count == round(600 * 5e-3)
    keys = {t.key() for t in bank.tasks}
    assert len(keys) == 600  # de-duplicated
    # rare tasks are shuffled into the bank, not grouped at the front
    severities = [t.severity for t in bank.tasks]
    assert "rare" in severities and severities[:3] != ["rare"] * 3


def test_bank_save_load_roundtrip(tmp_path):
    rng = stream(2, 0)
    bank = generate_bank(rng, 50, eps=0.04, seed=9)
    path = tmp_path / "bank.txt"
    bank.save(path)
    loaded = TaskBank.load(path)
    assert loaded.seed == 9 and loaded.eps == pytest.approx(0.04)
    assert [t.key() for t in loaded.tasks] == [t.key() for t in bank.tasks]


def test_policy_net_shapes_and_frozen():
    net = PolicyNet(rng=np.random.default_rng(0))
    tasks = [generate_task(stream(3, 0), "bulk") for _ in range(5)]
    out = net.forward(tasks)
    assert out.value.shape == (5, 10, 64, 4)
    frozen = net.forward(tasks, frozen=True)
    np.testing.assert_allclose(frozen.value, out.value)
    ad.backward(ad.sum_(frozen))
    assert all(p.grad is None for p in net.params)


def test_policy_net_save_load_meta(tmp_path):
    net = PolicyNet(channels=8, embed_dim=16, rng=np.random.default_rng(1))
    path = tmp_path / "net.npz"
    net.save(path, bank_seed=7, stage="pretrain")
    loaded = PolicyNet.load(path)
    for a, b in zip(net.param_values(), loaded.param_values()):
        np.testing.assert_array_equal(a, b)
    meta = PolicyNet.read_meta(path)
    assert int(meta["bank_seed"]) == 7
    assert str(meta["stage"]) == "pretrain"


def test_pretrain_improves_mean_return():
    rng = stream(4, 0)
    tasks = [generate_task(rng, "bulk") for _ in range(16)]
    net = PolicyNet(channels=8, embed_dim=16, rng=np.random.default_rng(2))
    trace = pretrain(net, tasks, steps=40, lr=3e-3, batch=8, rng=stream(4, 1))
    assert len(trace) == 40
    assert np.mean(trace[-5:]) > np.mean(trace[:5])


def test_pretrain_rejects_empty():
    net = PolicyNet(channels=4, embed_dim=8)
    with pytest.raises(ValueError):
        pretrain(net, [], steps=1)
