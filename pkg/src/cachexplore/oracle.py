"""Exhaustive search for fixed attack plans, plan replay, and reference labels.

A plan is a fixed sequence of non-guess actions plus a table mapping the
observed latency trace to a guess. It succeeds when the traces produced by
the different secrets are pairwise distinct.

The search is breadth-first by length and tries actions in policy-output
order, so the first success is the shortest plan and, among those, the
lexicographically smallest. Prefixes that leave every secret's cache in the
same state as an earlier prefix, with the same grouping of secrets by trace,
cannot lead anywhere new and are dropped.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .cache import CacheHierarchy, CacheSnapshot, Latency, build_cache
from .env import NO_ACCESS, Action, ActionKind, AttackEnv, EnvConfig, legal_actions

# |secret domain| * (non-guess actions)^max_len must stay below this
DEFAULT_BUDGET = 10**11
# distinct search states kept before giving up
DEFAULT_MAX_STATES = 200_000

_CODES = {"A": ActionKind.ACCESS, "F": ActionKind.FLUSH, "V": ActionKind.TRIGGER}
_LETTERS = {v: k for k, v in _CODES.items()}


class SearchBudgetExceeded(RuntimeError):
    pass


Trace = tuple[str, ...]


@dataclass(frozen=True)
class AttackPlan:
    prefix: tuple[Action, ...]
    decode: dict  # Trace -> secret

    def guess(self, trace: Trace) -> Optional[int]:
        return self.decode.get(tuple(trace))

    def to_text(self) -> str:
        lines = []
        for a in self.prefix:
            letter = _LETTERS[a.kind]
            lines.append(letter if a.kind is ActionKind.TRIGGER else f"{letter} {a.operand}")
        for trace, secret in sorted(self.decode.items(), key=lambda kv: (kv[1], kv[0])):
            lines.append(f"DECODE {','.join(trace)}->{secret}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AttackPlan":
        prefix, decode = [], {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("DECODE "):
                body = line[len("DECODE "):]
                trace, sep, secret = body.rpartition("->")
                if not sep:
                    raise ValueError(f"line {n}: expected 'DECODE trace->secret'")
                key = tuple(trace.split(",")) if trace else ()
                for lat in key:
                    Latency(lat)
                decode[key] = int(secret)
                continue
            if decode:
                raise ValueError(f"line {n}: action after DECODE lines")
            parts = line.split()
            kind = _CODES.get(parts[0])
            if kind is None:
                raise ValueError(f"line {n}: unknown action {parts[0]!r}")
            if kind is ActionKind.TRIGGER:
                if len(parts) != 1:
                    raise ValueError(f"line {n}: 'V' takes no operand")
                prefix.append(Action(kind))
            else:
                if len(parts) != 2:
                    raise ValueError(f"line {n}: '{parts[0]}' needs one address")
                prefix.append(Action(kind, int(parts[1])))
        return cls(tuple(prefix), decode)


def _apply(cache: CacheHierarchy, cfg: EnvConfig, action: Action, secret: int) -> Optional[str]:
    if action.kind is ActionKind.ACCESS:
        return cache.access(0, action.operand).latency_class.value
    if action.kind is ActionKind.FLUSH:
        cache.flush(action.operand)
    elif action.kind is ActionKind.TRIGGER:
        if secret != NO_ACCESS:
            cache.access(cfg.victim_core, secret)
    return None


def simulate(env_cfg: EnvConfig, prefix: Sequence[Action], secret: int) -> Trace:
    """Latency classes of the access steps in ``prefix`` under ``secret``."""
    cache = build_cache(env_cfg.hierarchy, env_cfg.seed)
    trace = []
    for a in prefix:
        lat = _apply(cache, env_cfg, a, secret)
        if lat is not None:
            trace.append(lat)
    return tuple(trace)


def _partition(traces: Sequence[Trace]) -> tuple[int, ...]:
    labels: dict[Trace, int] = {}
    return tuple(labels.setdefault(t, len(labels)) for t in traces)


def search_actions(env_cfg: EnvConfig) -> list[Action]:
    return [a for a in legal_actions(env_cfg) if a.kind is not ActionKind.GUESS]


def search_cost(env_cfg: EnvConfig, max_len: int) -> int:
    return len(env_cfg.secret_domain) * len(search_actions(env_cfg)) ** max_len


def search(
    env_cfg: EnvConfig,
    max_len: int,
    budget: int = DEFAULT_BUDGET,
    max_states: int = DEFAULT_MAX_STATES,
) -> Optional[AttackPlan]:
    """Shortest-then-lexicographic plan of at most ``max_len`` actions, or None."""
    cost = search_cost(env_cfg, max_len)
    if cost > budget:
        raise SearchBudgetExceeded(
            f"search space {len(env_cfg.secret_domain)} secrets x "
            f"{len(search_actions(env_cfg))}^{max_len} prefixes = {cost:.3g} "
            f"exceeds budget {budget:.3g}; lower --max-len"
        )
    secrets = env_cfg.secret_domain
    actions = search_actions(env_cfg)
    root = [build_cache(env_cfg.hierarchy, env_cfg.seed) for _ in secrets]
    empty = [() for _ in secrets]
    if len(set(empty)) == len(secrets):
        return _plan((), secrets, empty)

    def key(caches, traces):
        return (tuple(c.state_key() for c in caches), _partition(traces))

    seen = {key(root, empty)}
    frontier = [((), root, empty)]
    for _ in range(max_len):
        nxt = []
        for prefix, caches, traces in frontier:
            for a in actions:
                new_caches = [c.clone() for c in caches]
                new_traces = list(traces)
                for i, s in enumerate(secrets):
                    lat = _apply(new_caches[i], env_cfg, a, s)
                    if lat is not None:
                        new_traces[i] = new_traces[i] + (lat,)
                new_prefix = prefix + (a,)
                if len(set(new_traces)) == len(secrets):
                    return _plan(new_prefix, secrets, new_traces)
                k = key(new_caches, new_traces)
                if k in seen:
                    continue
                seen.add(k)
                if len(seen) > max_states:
                    raise SearchBudgetExceeded(
                        f"more than {max_states} distinct search states at length "
                        f"{len(new_prefix)}"
                    )
                nxt.append((new_prefix, new_caches, new_traces))
        if not nxt:
            break
        frontier = nxt
    return None


def _plan(prefix, secrets, traces) -> AttackPlan:
    return AttackPlan(tuple(prefix), {t: s for s, t in zip(secrets, traces)})


def _replay_cfg(env_cfg: EnvConfig, n_steps: int) -> EnvConfig:
    # the plan is judged on its own merits, not cut short by episode truncation
    if env_cfg.max_episode_len >= n_steps:
        return env_cfg
    return dataclasses.replace(env_cfg, max_episode_len=n_steps)


def _run_plan(env: AttackEnv, plan: AttackPlan, secret: int) -> bool:
    env.reset_episode(secret)
    trace = []
    for a in plan.prefix:
        res = env.step(a)
        if a.kind is ActionKind.ACCESS:
            trace.append(res.info["latency"].value)
    guess = plan.guess(tuple(trace))
    if guess is None:
        return False
    return bool(env.step(Action(ActionKind.GUESS, guess)).info["guess_correct"])


def replay(plan: AttackPlan, env_cfg: EnvConfig) -> float:
    """Fraction of secrets the plan guesses correctly, run through the environment."""
    env = AttackEnv(_replay_cfg(env_cfg, len(plan.prefix) + 1))
    secrets = env_cfg.secret_domain
    return sum(_run_plan(env, plan, s) for s in secrets) / len(secrets)


def replay_per_secret(plans: dict[int, AttackPlan], env_cfg: EnvConfig) -> float:
    """Accuracy of a set of per-secret plans, each run only under its own secret.

    This is how adaptive (policy-derived) sequences are checked: the plan
    for secret ``s`` is what the policy did when the secret was ``s``.
    """
    secrets = env_cfg.secret_domain
    hits = 0
    for s in secrets:
        plan = plans.get(s)
        if plan is None:
            continue
        env = AttackEnv(_replay_cfg(env_cfg, len(plan.prefix) + 1))
        hits += _run_plan(env, plan, s)
    return hits / len(secrets)


def merge_plans(plans: dict[int, AttackPlan]) -> Optional[AttackPlan]:
    """Combine per-secret plans sharing one prefix into a single fixed plan."""
    prefixes = {p.prefix for p in plans.values()}
    if len(prefixes) != 1:
        return None
    decode = {}
    for p in plans.values():
        decode.update(p.decode)
    return AttackPlan(prefixes.pop(), decode)


def _same_fields(a: CacheSnapshot, b: CacheSnapshot) -> bool:
    def walk(x, y):
        if isinstance(x, tuple) and isinstance(y, tuple):
            return len(x) == len(y) and all(walk(i, j) for i, j in zip(x, y))
        if isinstance(x, tuple) or isinstance(y, tuple):
            return False
        return x == y

    return a.scope == b.scope and walk(a.level_states, b.level_states)


def label_trace(
    env_cfg: EnvConfig,
    actions: Iterable[Action],
    secret: int,
    scope: Optional[str] = None,
) -> list[bool]:
    """Reference useless flags for one episode's actions on a fresh cache."""
    scope = scope or env_cfg.snapshot_scope
    cache = build_cache(env_cfg.hierarchy, env_cfg.seed)
    flags = []
    for a in actions:
        if a.kind is ActionKind.GUESS:
            flags.append(False)
            continue
        before = cache.snapshot(scope)
        _apply(cache, env_cfg, a, secret)
        after = cache.snapshot(scope)
        detected = a.kind in (ActionKind.ACCESS, ActionKind.FLUSH)
        flags.append(detected and _same_fields(before, after))
    return flags
