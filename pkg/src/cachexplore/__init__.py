"""Cache side-channel exploration: cache simulator, RL attack environment,
a numpy PPO trainer and an exhaustive-search oracle."""

from .cache import CacheConfig, CacheHierarchy, HierarchyConfig, Latency, build_cache
from .env import Action, ActionKind, AttackEnv, EnvConfig, RewardConfig
from .oracle import AttackPlan, label_trace, replay, search
from .ppo import PolicySpec, TrainHyper, train
from .presets import PRESETS, preset_env

__all__ = [
    "Action", "ActionKind", "AttackEnv", "AttackPlan", "CacheConfig", "CacheHierarchy",
    "EnvConfig", "HierarchyConfig", "Latency", "PRESETS", "PolicySpec", "RewardConfig",
    "TrainHyper", "build_cache", "label_trace", "preset_env", "replay", "search", "train",
]
