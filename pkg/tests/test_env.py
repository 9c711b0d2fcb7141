import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from care_lab import env as E


@pytest.fixture(scope="module")
def mt5():
    return E.make_preset("mt5")


def test_family_indices_and_preset(mt5):
    assert [t.index for t in mt5.train] == [0, 1, 2, 3, 4]
    assert [t.name for t in mt5.train] == ["reach-puck", "push-puck", "open-drawer", "close-drawer",
                                           "open-window"]
    assert [t.name for t in mt5.held_out] == ["close-window"]
    assert mt5.held_out[0].index == 5


def test_metadata_mentions_skill_and_object(mt5):
    for t in mt5.all_tasks:
        assert t.skill.name in t.metadata and t.obj.name in t.metadata


def test_mt3_example_split():
    fam = E.make_preset("mt3")
    assert {t.name for t in fam.train} == {"open-drawer", "close-window", "close-drawer"}
    assert [t.name for t in fam.held_out] == ["open-window"]


def test_family_validation():
    with pytest.raises(E.FamilyError, match="duplicate"):
        E.make_family([("open", "drawer"), ("open", "drawer")])
    with pytest.raises(E.FamilyError, match="composition"):
        E.make_family([("open", "drawer")], [("close", "drawer")])
    with pytest.raises(E.FamilyError, match="composition"):
        E.make_family([("open", "drawer")], [("open", "window")])
    with pytest.raises(E.FamilyError, match="unknown skill"):
        E.make_family([("lift", "drawer")])
    with pytest.raises(E.FamilyError, match="unknown preset"):
        E.make_preset("mt99")


def test_reset_deterministic_and_at_rest(mt5):
    for t in mt5.all_tasks:
        s1, o1 = E.reset(t, 123)
        s2, o2 = E.reset(t, 123)
        assert o1.tobytes() == o2.tobytes()
        assert o1.shape == (E.OBS_DIM,)
        assert s1.joint == t.obj.rest and s1.step == 0


def test_zero_action_keeps_joint_at_rest(mt5):
    t = mt5.by_name("open-drawer")
    s, _ = E.reset(t, 0)
    s, *_ = E.step(t, s, np.zeros(3))
    assert s.joint == t.obj.rest


def test_far_agent_only_relaxes_joint(mt5):
    t = mt5.by_name("open-drawer")
    s, _ = E.reset(t, 0)
    far = E.EnvState((1.0, 1.0), (0.0, 0.0), 0.8, s.goal, (-0.5, -0.6))
    nxt, *_ = E.step(t, far, np.array([0.0, 0.0, 1.0]))
    assert nxt.joint == pytest.approx(0.8 - t.obj.stiffness * (0.8 - t.obj.rest), abs=1e-15)


def test_step_after_done_raises(mt5):
    t = mt5.train[0]
    s, _ = E.reset(t, 0)
    s = E.EnvState(s.pos, s.vel, s.joint, s.goal, s.anchor, s.step, done=True)
    with pytest.raises(E.EpisodeDone):
        E.step(t, s, np.zeros(3))


def test_scripted_oracle_opens_drawer_within_60(mt5):
    t = mt5.by_name("open-drawer")
    for seed in range(20):
        assert E.rollout(t, seed, lambda s, o: E.scripted_action(t, s))


def test_scripted_oracle_solves_every_task(mt5):
    for t in mt5.all_tasks:
        assert all(E.rollout(t, seed, lambda s, o, t=t: E.scripted_action(t, s)) for seed in range(10)), t.name


def test_shared_object_dynamics(mt5):
    a, b = mt5.by_name("open-drawer"), mt5.by_name("close-drawer")
    rng = np.random.default_rng(0)
    for _ in range(50):
        anchor = (float(rng.uniform(-0.6, 0.6)), -0.6)
        st_ = E.EnvState(tuple(rng.uniform(-1, 1, 2)), tuple(rng.uniform(-0.1, 0.1, 2)),
                         float(rng.uniform()), (0.0, 0.0), anchor)
        act = rng.uniform(-1, 1, 3)
        assert E.step(a, st_, act)[0].joint == E.step(b, st_, act)[0].joint


@given(st.integers(0, 2 ** 32), st.integers(0, 5), st.lists(
    st.tuples(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=80))
@settings(max_examples=60, deadline=None)
def test_rollout_invariants(seed, task_i, actions):
    fam = E.make_preset("mt5")
    t = fam.all_tasks[task_i]
    lo, hi = E.reward_bounds(t)
    assert lo == pytest.approx(-(2 * math.sqrt(2) + t.skill.weight))
    s, obs = E.reset(t, seed)
    for k, a in enumerate(actions):
        s, obs, r, done, success = E.step(t, s, np.array(a))
        assert obs.shape == (E.OBS_DIM,)
        assert lo <= r <= hi
        assert -1.0 <= s.pos[0] <= 1.0 and -1.0 <= s.pos[1] <= 1.0
        assert 0.0 <= s.joint <= 1.0
        assert s.step == k + 1 <= t.horizon
        if done:
            assert success or s.step == t.horizon
            break


def test_episode_ends_at_horizon(mt5):
    t = E.with_horizon(mt5.by_name("open-window"), 7)
    s, _ = E.reset(t, 0)
    for _ in range(7):
        s, _, _, done, _ = E.step(t, s, np.zeros(3))
    assert done and s.step == 7
