"""Episodic cache-guessing environment with useless-action detection.

The attacker runs on core 0 and the victim on the last core. Every step the
environment snapshots the cache before and after an attacker access or
flush; when the two snapshots are equal the action is flagged useless and,
with the penalty enabled, charged ``r_useless`` on top of the step cost.
Victim triggers and guesses are never flagged.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Optional, Union

import numpy as np

from .cache import SCOPES, CacheSnapshot, HierarchyConfig, Latency, build_cache

NO_ACCESS = -1

# one-hot slot per latency class; hit and l1_hit share a slot
LATENCY_SLOT = {
    Latency.NONE: 0,
    Latency.HIT: 1,
    Latency.L1_HIT: 1,
    Latency.L2_HIT: 2,
    Latency.MISS: 3,
}
STEP_FEATURES = 7


class EnvError(ValueError):
    """Illegal action or misuse of the environment."""


class ActionKind(str, Enum):
    ACCESS = "attacker_access"
    FLUSH = "attacker_flush"
    TRIGGER = "victim_trigger"
    GUESS = "guess"


DETECTED_KINDS = frozenset({ActionKind.ACCESS, ActionKind.FLUSH})


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    operand: Optional[int] = None

    def __str__(self) -> str:
        if self.kind is ActionKind.TRIGGER:
            return "victim_trigger"
        return f"{self.kind.value}({self.operand})"


@dataclass(frozen=True)
class RewardConfig:
    r_step: float = -0.01
    r_useless: float = -0.01
    r_correct: float = 1.0
    r_wrong: float = -5.0

    def __post_init__(self):
        if self.r_step > 0:
            raise EnvError(f"r_step must be <= 0, got {self.r_step}")
        if self.r_useless > 0:
            raise EnvError(f"r_useless must be <= 0, got {self.r_useless}")
        if self.r_correct <= 0:
            raise EnvError(f"r_correct must be positive, got {self.r_correct}")
        if self.r_wrong >= 0:
            raise EnvError(f"r_wrong must be negative, got {self.r_wrong}")


@dataclass(frozen=True)
class EnvConfig:
    hierarchy: HierarchyConfig
    victim_addrs: tuple[int, ...]
    attacker_addrs: tuple[int, ...]
    flush_enabled: bool = False
    rewards: RewardConfig = field(default_factory=RewardConfig)
    useless_penalty_enabled: bool = False
    snapshot_scope: str = "full"
    max_episode_len: Optional[int] = None
    epoch_actions: int = 3000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "victim_addrs", tuple(self.victim_addrs))
        object.__setattr__(self, "attacker_addrs", tuple(self.attacker_addrs))
        if not self.victim_addrs:
            raise EnvError("victim_addrs must not be empty")
        for name in ("victim_addrs", "attacker_addrs"):
            addrs = getattr(self, name)
            if any(a < 0 for a in addrs) or len(set(addrs)) != len(addrs):
                raise EnvError(f"{name} must be distinct non-negative addresses")
        if self.snapshot_scope not in SCOPES:
            raise EnvError(f"snapshot_scope must be one of {SCOPES}")
        if self.max_episode_len is None:
            object.__setattr__(
                self, "max_episode_len", 2 * (len(self.attacker_addrs) + 2)
            )
        if self.max_episode_len < 1:
            raise EnvError("max_episode_len must be positive")
        if self.epoch_actions < 1:
            raise EnvError("epoch_actions must be positive")

    @property
    def binary_secret(self) -> bool:
        return len(self.victim_addrs) == 1

    @property
    def secret_domain(self) -> tuple[int, ...]:
        if self.binary_secret:
            return tuple(sorted((NO_ACCESS, self.victim_addrs[0])))
        return tuple(sorted(self.victim_addrs))

    @property
    def victim_core(self) -> int:
        return self.hierarchy.n_cores - 1

    @property
    def obs_dim(self) -> int:
        return self.max_episode_len * STEP_FEATURES


def legal_actions(cfg: EnvConfig) -> list[Action]:
    """All actions in policy-output order: access, flush, trigger, guess."""
    addrs = sorted(cfg.attacker_addrs)
    actions = [Action(ActionKind.ACCESS, a) for a in addrs]
    if cfg.flush_enabled:
        actions += [Action(ActionKind.FLUSH, a) for a in addrs]
    actions.append(Action(ActionKind.TRIGGER))
    actions += [Action(ActionKind.GUESS, s) for s in cfg.secret_domain]
    return actions


def classify_useless(
    kind: ActionKind, pre: Optional[CacheSnapshot], post: Optional[CacheSnapshot]
) -> bool:
    if kind not in DETECTED_KINDS:
        return False
    if pre.scope != post.scope:
        raise ValueError(f"snapshot scopes differ: {pre.scope} vs {post.scope}")
    return pre == post


def compute_reward(
    cfg: RewardConfig,
    kind: ActionKind,
    useless: bool,
    guess_correct: Optional[bool],
    penalty_enabled: bool,
) -> float:
    if kind is ActionKind.GUESS:
        if guess_correct is None:
            raise ValueError("guess rewards need guess_correct")
        return cfg.r_correct if guess_correct else cfg.r_wrong
    if guess_correct is not None:
        raise ValueError("guess_correct given for a non-guess action")
    reward = cfg.r_step
    if penalty_enabled and useless:
        reward += cfg.r_useless
    return reward


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


@dataclass(frozen=True)
class EpochStats:
    episodes_completed: int
    episodes_correct: int
    total_actions: int
    useless_actions: int
    wall_time: float

    @property
    def correct_rate_defined(self) -> bool:
        return self.episodes_completed > 0

    @property
    def correct_rate(self) -> float:
        # zero-episode epochs report 0 so they can never count as converged
        if not self.episodes_completed:
            return 0.0
        return self.episodes_correct / self.episodes_completed


TRACE_COLUMNS = ("step", "episode", "action_kind", "operand", "latency_class", "useless", "reward")


class AttackEnv:
    def __init__(self, cfg: EnvConfig, trace: Optional[IO[str]] = None):
        self.cfg = cfg
        self.cache = build_cache(cfg.hierarchy, cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.actions = legal_actions(cfg)
        self.n_actions = len(self.actions)
        self._index = {a: i for i, a in enumerate(self.actions)}
        self._domain = cfg.secret_domain
        self._obs = np.zeros((cfg.max_episode_len, STEP_FEATURES))
        self._trace = None
        if trace is not None:
            self._trace = csv.writer(trace)
            self._trace.writerow(TRACE_COLUMNS)
        self.secret: Optional[int] = None
        self.t = 0
        self.done = True
        self.victim_triggered = False
        self.episode = -1
        self.global_step = 0
        self._start_epoch()

    def _start_epoch(self):
        self._ep_actions = 0
        self._ep_useless = 0
        self._ep_completed = 0
        self._ep_correct = 0
        self._ep_t0 = time.perf_counter()

    def legal_actions(self) -> list[Action]:
        return list(self.actions)

    def action_mask(self) -> np.ndarray:
        return np.ones(self.n_actions, dtype=bool)

    def action_index(self, action: Action) -> int:
        try:
            return self._index[action]
        except KeyError:
            raise EnvError(f"illegal action {action} for this configuration") from None

    def reset_episode(self, secret: Optional[int] = None) -> np.ndarray:
        """Clear the cache and history; draw a secret unless one is forced."""
        if secret is None:
            secret = self._domain[int(self.rng.integers(len(self._domain)))]
        elif secret not in self._domain:
            raise EnvError(f"secret {secret} not in domain {self._domain}")
        self.cache.reset()
        self.secret = secret
        self.t = 0
        self.done = False
        self.victim_triggered = False
        self.episode += 1
        self._obs[:] = 0.0
        return self.observation()

    def observation(self) -> np.ndarray:
        return self._obs.ravel().copy()

    def step(self, action: Union[Action, int]) -> StepResult:
        if self.done:
            raise EnvError("episode is over; call reset_episode()")
        if isinstance(action, Action):
            idx = self.action_index(action)
        else:
            idx = int(action)
            if not 0 <= idx < self.n_actions:
                raise EnvError(f"action index {idx} out of range")
            action = self.actions[idx]
        cfg = self.cfg
        kind = action.kind
        latency = Latency.NONE
        guess_correct = None
        pre = post = None
        # snapshots only matter for detected kinds; the others are exempt
        detect = kind in DETECTED_KINDS
        if detect:
            pre = self.cache.snapshot(cfg.snapshot_scope)
        if kind is ActionKind.ACCESS:
            latency = self.cache.access(0, action.operand).latency_class
        elif kind is ActionKind.FLUSH:
            self.cache.flush(action.operand)
        elif kind is ActionKind.TRIGGER:
            if self.secret != NO_ACCESS:
                self.cache.access(cfg.victim_core, self.secret)
            self.victim_triggered = True
        else:
            guess_correct = action.operand == self.secret
        if detect:
            post = self.cache.snapshot(cfg.snapshot_scope)
        useless = classify_useless(kind, pre, post)
        reward = compute_reward(
            cfg.rewards, kind, useless, guess_correct, cfg.useless_penalty_enabled
        )

        # newest step in slot 0, older steps shift back
        self._obs[1:] = self._obs[:-1]
        slot = self._obs[0]
        slot[:] = 0.0
        slot[0] = (idx + 1) / self.n_actions
        slot[1 + LATENCY_SLOT[latency]] = 1.0
        slot[5] = float(self.victim_triggered)
        slot[6] = (self.t + 1) / cfg.max_episode_len
        self.t += 1

        truncated = kind is not ActionKind.GUESS and self.t >= cfg.max_episode_len
        if truncated:
            reward += cfg.rewards.r_wrong
        done = kind is ActionKind.GUESS or truncated
        self.done = done

        self._ep_actions += 1
        self._ep_useless += useless
        if done:
            self._ep_completed += 1
            self._ep_correct += bool(guess_correct)
        if self._trace is not None:
            self._trace.writerow(
                (self.global_step, self.episode, kind.value,
                 "" if action.operand is None else action.operand,
                 latency.value, int(useless), repr(reward))
            )
        self.global_step += 1
        info = {
            "useless": useless,
            "guess_correct": guess_correct,
            "truncated": truncated,
            "latency": latency,
            "action": action,
        }
        return StepResult(self.observation(), reward, done, info)

    @property
    def epoch_complete(self) -> bool:
        return self._ep_actions >= self.cfg.epoch_actions

    def epoch_stats(self) -> EpochStats:
        """Close the current epoch; an in-progress episode carries over."""
        stats = EpochStats(
            episodes_completed=self._ep_completed,
            episodes_correct=self._ep_correct,
            total_actions=self._ep_actions,
            useless_actions=self._ep_useless,
            wall_time=time.perf_counter() - self._ep_t0,
        )
        self._start_epoch()
        return stats
