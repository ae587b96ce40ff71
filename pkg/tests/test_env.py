import dataclasses
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cachexplore.cache import Latency, build_cache
from cachexplore.env import (
    NO_ACCESS,
    Action,
    ActionKind,
    AttackEnv,
    EnvError,
    EpochStats,
    RewardConfig,
    classify_useless,
    compute_reward,
    legal_actions,
)
from cachexplore.presets import preset_env

A = lambda x: Action(ActionKind.ACCESS, x)  # noqa: E731
F = lambda x: Action(ActionKind.FLUSH, x)  # noqa: E731
G = lambda x: Action(ActionKind.GUESS, x)  # noqa: E731
V = Action(ActionKind.TRIGGER)


def test_reset_returns_zero_observation():
    env = AttackEnv(preset_env("no1"))
    obs = env.reset_episode()
    assert obs.shape == (env.cfg.obs_dim,)
    assert not obs.any()


@pytest.mark.parametrize("preset,domain", [("no1", (0, 1, 2, 3)), ("no5", (NO_ACCESS, 0))])
def test_secret_draws_uniform(preset, domain):
    env = AttackEnv(preset_env(preset, seed=11))
    assert env.cfg.secret_domain == domain
    draws = []
    for _ in range(10_000):
        env.reset_episode()
        draws.append(env.secret)
    counts = np.array([draws.count(s) for s in domain])
    freqs = counts / len(draws)
    tol = 0.02
    assert np.all(np.abs(freqs - 1 / len(domain)) <= tol)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_access_on_cold_cache():
    env = AttackEnv(preset_env("no1"))
    env.reset_episode(0)
    res = env.step(A(4))
    assert res.info["latency"] is Latency.MISS
    assert res.info["useless"] is False
    assert res.reward == pytest.approx(-0.01)


def test_repeat_access_is_useless_and_penalized():
    env = AttackEnv(preset_env("no1", snapshot_scope="lines_only", useless_penalty_enabled=True))
    env.reset_episode(0)
    env.step(A(4))
    res = env.step(A(4))
    assert res.info["useless"] is True
    assert res.reward == pytest.approx(-0.02)


def test_correct_guess_ends_episode():
    env = AttackEnv(preset_env("no1"))
    env.reset_episode(2)
    res = env.step(G(2))
    assert res.done and res.reward == 1.0 and res.info["guess_correct"] is True
    env.reset_episode(2)
    res = env.step(G(1))
    assert res.done and res.reward == RewardConfig().r_wrong and res.info["guess_correct"] is False


def test_victim_trigger_binary_no_access_is_noop():
    env = AttackEnv(preset_env("no5"))
    env.reset_episode(NO_ACCESS)
    before = env.cache.snapshot()
    env.step(V)
    assert env.cache.snapshot() == before
    env.reset_episode(0)
    env.step(V)
    assert env.cache.contains(0)


def test_two_level_victim_runs_on_core_one():
    env = AttackEnv(preset_env("no16"))
    env.reset_episode(1)
    env.step(V)
    h = env.cache
    assert h.contains(1, level=0, core=1) and not h.contains(1, level=0, core=0)
    res = env.step(A(5))
    assert res.info["latency"] is Latency.MISS


def test_illegal_actions_raise():
    env = AttackEnv(preset_env("no1"))
    env.reset_episode()
    with pytest.raises(EnvError):
        env.step(F(4))
    with pytest.raises(EnvError):
        env.step(A(0))
    with pytest.raises(EnvError):
        env.step(G(9))
    with pytest.raises(EnvError):
        env.step(99)


def test_step_after_done_raises():
    env = AttackEnv(preset_env("no1"))
    env.reset_episode(0)
    env.step(G(0))
    with pytest.raises(EnvError):
        env.step(A(4))


def test_truncation_counts_incorrect():
    cfg = preset_env("no1", max_episode_len=3)
    env = AttackEnv(cfg)
    env.reset_episode(0)
    env.step(A(4))
    env.step(A(5))
    res = env.step(A(6))
    assert res.done and res.info["truncated"]
    assert res.reward == pytest.approx(-0.01 + RewardConfig().r_wrong)
    st_ = env.epoch_stats()
    assert st_.episodes_completed == 1 and st_.episodes_correct == 0


# -- classify / reward -------------------------------------------------------


def test_classify_flush_absent_line():
    env = AttackEnv(preset_env("no3"))
    env.reset_episode(0)
    assert env.step(F(2)).info["useless"] is True


def test_victim_trigger_hit_is_exempt():
    cfg = preset_env("no3", snapshot_scope="lines_only")
    env = AttackEnv(cfg)
    env.reset_episode(1)
    env.step(A(1))
    pre = env.cache.snapshot("lines_only")
    res = env.step(V)  # victim hits line 1: no change
    assert env.cache.snapshot("lines_only") == pre
    assert res.info["useless"] is False
    assert classify_useless(ActionKind.TRIGGER, pre, pre) is False


def test_classify_hit_on_non_mru_depends_on_scope():
    h = build_cache(preset_env("no5").hierarchy)
    h.access(0, 4)
    h.access(0, 5)
    snaps = {s: h.snapshot(s) for s in ("full", "lines_only")}
    h.access(0, 4)
    assert classify_useless(ActionKind.ACCESS, snaps["full"], h.snapshot("full")) is False
    assert classify_useless(ActionKind.ACCESS, snaps["lines_only"], h.snapshot("lines_only")) is True


def test_classify_scope_mismatch_is_contract_violation():
    h = build_cache(preset_env("no1").hierarchy)
    with pytest.raises(ValueError):
        classify_useless(ActionKind.ACCESS, h.snapshot("full"), h.snapshot("lines_only"))


def test_compute_reward_table():
    r = RewardConfig()
    assert compute_reward(r, ActionKind.ACCESS, True, None, True) == pytest.approx(-0.02)
    assert compute_reward(r, ActionKind.ACCESS, True, None, False) == pytest.approx(-0.01)
    assert compute_reward(r, ActionKind.FLUSH, False, None, True) == pytest.approx(-0.01)
    assert compute_reward(r, ActionKind.GUESS, False, True, True) == 1.0
    assert compute_reward(r, ActionKind.GUESS, False, False, True) == r.r_wrong
    # exempt kinds never pick up the penalty, even if mislabeled
    assert compute_reward(r, ActionKind.TRIGGER, False, None, True) == pytest.approx(-0.01)


def test_compute_reward_precondition():
    with pytest.raises(ValueError):
        compute_reward(RewardConfig(), ActionKind.GUESS, False, None, True)
    with pytest.raises(ValueError):
        compute_reward(RewardConfig(), ActionKind.ACCESS, False, True, True)


@pytest.mark.parametrize(
    "kwargs", [dict(r_step=0.1), dict(r_useless=0.5), dict(r_correct=-1), dict(r_wrong=0.0)]
)
def test_reward_config_invariants(kwargs):
    with pytest.raises(EnvError):
        RewardConfig(**kwargs)


# -- legal actions -----------------------------------------------------------


@pytest.mark.parametrize("preset,count", [("no1", 9), ("no3", 13), ("no12", 19), ("no10", 8 + 8 + 1 + 8)])
def test_action_counts(preset, count):
    assert len(legal_actions(preset_env(preset))) == count


def test_action_order():
    acts = legal_actions(preset_env("no3"))
    assert acts[:4] == [A(0), A(1), A(2), A(3)]
    assert acts[4:8] == [F(0), F(1), F(2), F(3)]
    assert acts[8] == V
    assert acts[9:] == [G(0), G(1), G(2), G(3)]


def test_binary_guess_operands():
    acts = legal_actions(preset_env("no12"))
    assert [a.operand for a in acts if a.kind is ActionKind.GUESS] == [NO_ACCESS, 0]


# -- epochs ------------------------------------------------------------------


def test_epoch_accounting_with_carry_over():
    cfg = preset_env("no1", epoch_actions=10)
    env = AttackEnv(cfg)
    env.reset_episode(0)
    rng = np.random.default_rng(0)
    epochs = []
    for _ in range(95):
        res = env.step(int(rng.integers(env.n_actions)))
        if env.epoch_complete:
            epochs.append(env.epoch_stats())
        if res.done:
            env.reset_episode()
    assert len(epochs) == 9
    assert all(e.total_actions == 10 for e in epochs)
    for e in epochs:
        assert 0 <= e.episodes_correct <= e.episodes_completed
        assert 0.0 <= e.correct_rate <= 1.0
        assert e.useless_actions <= e.total_actions


def test_epoch_all_correct():
    s = EpochStats(100, 100, 3000, 0, 1.0)
    assert s.correct_rate == 1.0


def test_epoch_without_episodes_reports_zero():
    s = EpochStats(0, 0, 3000, 0, 1.0)
    assert s.correct_rate == 0.0 and not s.correct_rate_defined


def test_default_epoch_is_3000_actions():
    assert preset_env("no1").epoch_actions == 3000


# -- observation -------------------------------------------------------------


def test_observation_encoding():
    cfg = preset_env("no1")
    env = AttackEnv(cfg)
    env.reset_episode(0)
    obs = env.step(A(5)).observation.reshape(cfg.max_episode_len, -1)
    assert obs[0].tolist() == pytest.approx([2 / 9, 0, 0, 0, 1, 0, 1 / 12])
    obs = env.step(V).observation.reshape(cfg.max_episode_len, -1)
    # newest step first
    assert obs[0].tolist() == pytest.approx([5 / 9, 1, 0, 0, 0, 1, 2 / 12])
    assert obs[1].tolist() == pytest.approx([2 / 9, 0, 0, 0, 1, 0, 1 / 12])
    assert not obs[2:].any()


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["no1", "no3", "no5", "no13", "no16"]), st.lists(st.integers(0, 1000), max_size=40))
def test_observation_bounded_fixed_length(preset, choices):
    cfg = preset_env(preset)
    env = AttackEnv(cfg)
    obs = env.reset_episode()
    for c in choices:
        assert obs.shape == (cfg.obs_dim,)
        assert obs.min() >= 0.0 and obs.max() <= 1.0
        res = env.step(c % env.n_actions)
        obs = env.reset_episode() if res.done else res.observation


def test_default_episode_length():
    assert preset_env("no1").max_episode_len == 12
    assert preset_env("no17").max_episode_len == 36


# -- penalty toggle ----------------------------------------------------------


def test_penalty_toggle_changes_only_useless_steps():
    rng = np.random.default_rng(4)
    base = AttackEnv(preset_env("no3", seed=2))
    prop = AttackEnv(preset_env("no3", seed=2, useless_penalty_enabled=True))
    base.reset_episode()
    prop.reset_episode()
    for _ in range(3000):
        a = int(rng.integers(base.n_actions))
        rb, rp = base.step(a), prop.step(a)
        assert rb.info["useless"] == rp.info["useless"]
        if rb.info["useless"]:
            assert rp.reward - rb.reward == pytest.approx(-0.01)
        else:
            assert rp.reward == rb.reward
        if rb.done:
            base.reset_episode()
            prop.reset_episode()
            assert base.secret == prop.secret


def test_trace_csv_logging():
    buf = io.StringIO()
    env = AttackEnv(preset_env("no1"), trace=buf)
    env.reset_episode(0)
    env.step(A(4))
    env.step(A(4))
    env.step(G(0))
    rows = buf.getvalue().strip().splitlines()
    assert rows[0] == "step,episode,action_kind,operand,latency_class,useless,reward"
    assert rows[1].startswith("0,0,attacker_access,4,miss,0,")
    assert rows[2].startswith("1,0,attacker_access,4,hit,1,")
    assert rows[3] == "2,0,guess,0,none,0,1.0"


def test_config_validation():
    cfg = preset_env("no1")
    with pytest.raises(EnvError):
        dataclasses.replace(cfg, victim_addrs=())
    with pytest.raises(EnvError):
        dataclasses.replace(cfg, snapshot_scope="partial")
    with pytest.raises(EnvError):
        dataclasses.replace(cfg, attacker_addrs=(4, 4))
