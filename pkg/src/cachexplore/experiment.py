"""Experiment configs, training runs, sweeps and their CSV artifacts.

A config file is YAML with four optional sections plus a few top-level keys::

    name: no1
    repeats: 10
    output_dir: runs
    env:
      preset: no1            # expands to the benchmark row; keys below override
      snapshot_scope: full
    rewards: {r_wrong: -2.0}
    policy: {hidden_units: 256}
    hyper: {max_epochs: 999}

Without ``preset`` the env section must describe the cache explicitly
(``cache: {levels: [{n_sets: 4, n_ways: 1}]}``) together with
``victim_addrs`` and ``attacker_addrs``. Address ranges may be lists or
``"lo-hi"`` strings.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import mean
from typing import Any, Optional, Sequence

import yaml

from .cache import CacheConfig, ConfigError, HierarchyConfig
from .env import ActionKind, EnvConfig, EnvError, RewardConfig
from .oracle import AttackPlan, merge_plans, replay, replay_per_secret, search
from .ppo import PolicySpec, TrainHyper, TrainReport, save_checkpoint, train
from .presets import get_preset

MODES = ("baseline", "proposal")
EPOCH_COLUMNS = ("epoch", "episodes", "correct_rate", "useless_actions", "total_actions", "wall_time_s")
SUMMARY_COLUMNS = (
    "config", "mode", "converged", "epochs", "total_actions", "useless_ratio_pct", "wall_time_s",
    "seed", "plan_accuracy",
)
RUN_COLUMNS = SUMMARY_COLUMNS + ("error",)
SWEEP_COLUMNS = (
    "config", "approach", "runs", "converged_runs", "total_actions", "useless_ratio_pct",
    "wall_time_s", "failed_runs",
)
DERIVED_COLUMNS = ("config", "delta_pts", "time_ratio", "convergent_both")


class ConfigFileError(ValueError):
    """A config file that does not parse or violates a field invariant."""


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig
    policy: PolicySpec
    hyper: TrainHyper = field(default_factory=TrainHyper)
    repeats: int = 10
    output_dir: str = "runs"
    name: str = "experiment"

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigFileError(f"repeats: must be >= 1, got {self.repeats}")


# -- config parsing ------------------------------------------------------------

_TOP_KEYS = {"name", "repeats", "output_dir", "env", "rewards", "policy", "hyper"}
_ENV_KEYS = {
    "preset", "replacement_policy", "cache", "victim_addrs", "attacker_addrs", "flush_enabled",
    "useless_penalty_enabled", "snapshot_scope", "max_episode_len", "epoch_actions", "seed",
}
_CACHE_KEYS = {"levels", "n_cores", "inclusive"}
_LEVEL_KEYS = {f.name for f in dataclasses.fields(CacheConfig)}
_REWARD_KEYS = {f.name for f in dataclasses.fields(RewardConfig)}
_POLICY_KEYS = {"hidden_units", "activation", "shared_trunk", "action_embedding"}
_HYPER_KEYS = {f.name for f in dataclasses.fields(TrainHyper)}


def _check_keys(section: str, data: Any, allowed: set) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigFileError(f"{section}: expected a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - allowed)
    if unknown:
        where = f"{section}.{unknown[0]}" if section else unknown[0]
        raise ConfigFileError(f"{where}: unknown key")
    return dict(data)


def _addr_range(where: str, value: Any) -> tuple[int, ...]:
    if isinstance(value, str):
        lo, sep, hi = value.partition("-")
        try:
            if not sep:
                return (int(lo),)
            return tuple(range(int(lo), int(hi) + 1))
        except ValueError:
            raise ConfigFileError(f"{where}: expected 'lo-hi', got {value!r}") from None
    if isinstance(value, list) and all(isinstance(v, int) for v in value):
        return tuple(value)
    raise ConfigFileError(f"{where}: expected a list of integers or 'lo-hi'")


def _build(where: str, ctor, **kwargs):
    try:
        return ctor(**kwargs)
    except (ConfigError, EnvError, ValueError, TypeError) as exc:
        raise ConfigFileError(f"{where}: {exc}") from None


def _hierarchy(data: dict) -> HierarchyConfig:
    cache = _check_keys("env.cache", data, _CACHE_KEYS)
    levels_raw = cache.get("levels")
    if not isinstance(levels_raw, list) or not levels_raw:
        raise ConfigFileError("env.cache.levels: expected a non-empty list")
    levels = []
    for i, lv in enumerate(levels_raw):
        where = f"env.cache.levels[{i}]"
        levels.append(_build(where, CacheConfig, **_check_keys(where, lv, _LEVEL_KEYS)))
    n = len(levels)
    return _build(
        "env.cache", HierarchyConfig, levels=tuple(levels),
        n_cores=cache.get("n_cores", n), inclusive=cache.get("inclusive", n == 2),
    )


def _env(data: dict, rewards: RewardConfig) -> EnvConfig:
    env = _check_keys("env", data, _ENV_KEYS)
    kwargs: dict[str, Any] = {}
    preset_name = env.pop("preset", None)
    replacement = env.pop("replacement_policy", "lru")
    if preset_name is not None:
        try:
            p = get_preset(str(preset_name))
        except KeyError as exc:
            raise ConfigFileError(f"env.preset: {exc.args[0]}") from None
        kwargs.update(
            hierarchy=_build("env.replacement_policy", p.hierarchy, policy=replacement),
            victim_addrs=p.victim_addrs,
            attacker_addrs=p.attacker_addrs,
            flush_enabled=p.flush,
        )
    if "cache" in env:
        kwargs["hierarchy"] = _hierarchy(env.pop("cache"))
    for key in ("victim_addrs", "attacker_addrs"):
        if key in env:
            kwargs[key] = _addr_range(f"env.{key}", env.pop(key))
    for key in ("hierarchy", "victim_addrs"):
        if key not in kwargs:
            name = "cache" if key == "hierarchy" else key
            raise ConfigFileError(f"env.{name}: required when no preset is given")
    kwargs.setdefault("attacker_addrs", ())
    kwargs.update(env)
    return _build("env", EnvConfig, rewards=rewards, **kwargs)


def parse_config(data: Any, default_name: str = "experiment") -> ExperimentConfig:
    top = _check_keys("", data, _TOP_KEYS)
    rewards = _build("rewards", RewardConfig, **_check_keys("rewards", top.get("rewards"), _REWARD_KEYS))
    env = _env(top.get("env") or {}, rewards)
    hyper = _build("hyper", TrainHyper, **_check_keys("hyper", top.get("hyper"), _HYPER_KEYS))
    pol = _check_keys("policy", top.get("policy"), _POLICY_KEYS)
    policy = _build("policy", PolicySpec.for_env, cfg=env, **pol)
    repeats = top.get("repeats", 10)
    if not isinstance(repeats, int) or isinstance(repeats, bool):
        raise ConfigFileError(f"repeats: expected an integer, got {repeats!r}")
    name = top.get("name")
    if name is None:
        name = (top.get("env") or {}).get("preset", default_name)
    return ExperimentConfig(
        env=env,
        policy=policy,
        hyper=hyper,
        repeats=repeats,
        output_dir=str(top.get("output_dir", "runs")),
        name=str(name),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigFileError(f"{path}: not valid YAML ({exc})") from None
    return parse_config(data, default_name=path.stem)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Explicit (preset-free) form that ``parse_config`` maps back to ``cfg``."""
    h = cfg.env.hierarchy
    env = {
        "cache": {
            "levels": [asdict(lv) for lv in h.levels],
            "n_cores": h.n_cores,
            "inclusive": h.inclusive,
        },
        "victim_addrs": list(cfg.env.victim_addrs),
        "attacker_addrs": list(cfg.env.attacker_addrs),
        "flush_enabled": cfg.env.flush_enabled,
        "useless_penalty_enabled": cfg.env.useless_penalty_enabled,
        "snapshot_scope": cfg.env.snapshot_scope,
        "max_episode_len": cfg.env.max_episode_len,
        "epoch_actions": cfg.env.epoch_actions,
        "seed": cfg.env.seed,
    }
    return {
        "name": cfg.name,
        "repeats": cfg.repeats,
        "output_dir": cfg.output_dir,
        "env": env,
        "rewards": asdict(cfg.env.rewards),
        "policy": {
            "hidden_units": cfg.policy.hidden_units,
            "activation": cfg.policy.activation,
            "shared_trunk": cfg.policy.shared_trunk,
            "action_embedding": cfg.policy.action_embedding,
        },
        "hyper": asdict(cfg.hyper),
    }


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))


def preset_config(name: str, **top) -> ExperimentConfig:
    return parse_config({"env": {"preset": name}, **top})


# -- single runs ---------------------------------------------------------------


def with_mode(cfg: ExperimentConfig, mode: str, seed: int) -> ExperimentConfig:
    """The one toggle between approaches, plus the run seed."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    env = dataclasses.replace(cfg.env, useless_penalty_enabled=(mode == "proposal"), seed=seed)
    return dataclasses.replace(cfg, env=env)


def plans_from_report(report: TrainReport) -> dict[int, AttackPlan]:
    plans = {}
    for secret, ep in report.extracted_plans.items():
        trace = tuple(lat.value for lat, a in zip(ep.latencies, ep.actions) if a.kind is ActionKind.ACCESS)
        decode = {} if ep.guess is None else {trace: ep.guess}
        plans[secret] = AttackPlan(tuple(ep.actions), decode)
    return plans


def _fmt_rate(x: float) -> str:
    return f"{x:.6f}"


def summary_row(name: str, mode: str, seed: int, report: TrainReport, plan_accuracy: Optional[float]) -> dict:
    return {
        "config": name,
        "mode": mode,
        "converged": str(report.converged).lower(),
        "epochs": report.epochs_run,
        "total_actions": report.total_actions,
        "useless_ratio_pct": f"{100 * report.useless_ratio:.2f}",
        "wall_time_s": f"{report.wall_time:.3f}",
        "seed": seed,
        "plan_accuracy": "" if plan_accuracy is None else _fmt_rate(plan_accuracy),
    }


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def run_train(
    cfg: ExperimentConfig,
    mode: str,
    seed: int,
    out_dir,
    progress=None,
) -> tuple[TrainReport, dict]:
    """Train once and write epochs.csv, summary.csv, plan files and a checkpoint."""
    run_cfg = with_mode(cfg, mode, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPOCH_COLUMNS)

        def on_epoch(i, stats):
            w.writerow((
                i, stats.episodes_completed, _fmt_rate(stats.correct_rate),
                stats.useless_actions, stats.total_actions, f"{stats.wall_time:.3f}",
            ))
            fh.flush()
            if progress is not None:
                progress(i, stats)

        report = train(run_cfg.env, run_cfg.policy, run_cfg.hyper, seed=seed, on_epoch=on_epoch)

    accuracy = None
    if report.converged:
        plans = plans_from_report(report)
        accuracy = replay_per_secret(plans, run_cfg.env)
        plan_dir = out / "plans"
        plan_dir.mkdir(exist_ok=True)
        for secret, plan in plans.items():
            (plan_dir / f"secret_{secret}.txt").write_text(plan.to_text())
        merged = merge_plans(plans)
        if merged is not None:
            (out / "plan.txt").write_text(merged.to_text())
    save_checkpoint(out / "checkpoint.npz", report.params, run_cfg.policy, run_cfg.hyper, seed)
    row = summary_row(cfg.name, mode, seed, report, accuracy)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, [row])
    return report, row


# -- sweeps --------------------------------------------------------------------


def geomean(values: Sequence[float]) -> float:
    if not values:
        return float("nan")
    return math.exp(mean(math.log(v) for v in values))


def _sweep_job(args) -> dict:
    cfg, mode, seed, out = args
    try:
        _, row = run_train(cfg, mode, seed, out)
        row["error"] = ""
    except Exception as exc:  # recorded per row; the sweep goes on
        row = {c: "" for c in SUMMARY_COLUMNS}
        row.update(config=cfg.name, mode=mode, seed=seed, converged="false")
        row["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        (Path(out) / "error.txt").write_text(traceback.format_exc())
    return row


@dataclass
class SweepSummary:
    runs: list[dict]
    rows: list[dict]
    derived: list[dict]
    geomean_time_ratio: float


def summarize(runs: Sequence[dict]) -> SweepSummary:
    """Per-config, per-approach means plus deltas and the time-ratio geomean.

    A config counts as convergent under an approach when a majority of its
    successful runs converged; the geometric mean only covers configs
    convergent under both approaches.
    """
    names = list(dict.fromkeys(r["config"] for r in runs))
    rows, derived, ratios = [], [], []
    for name in names:
        per_mode = {}
        for mode in MODES:
            group = [r for r in runs if r["config"] == name and r["mode"] == mode]
            ok = [r for r in group if not r["error"]]
            conv = sum(r["converged"] == "true" for r in ok)
            row = {
                "config": name,
                "approach": mode,
                "runs": len(group),
                "converged_runs": conv,
                "total_actions": f"{mean(int(r['total_actions']) for r in ok):.1f}" if ok else "",
                "useless_ratio_pct": f"{mean(float(r['useless_ratio_pct']) for r in ok):.2f}" if ok else "",
                "wall_time_s": f"{mean(float(r['wall_time_s']) for r in ok):.3f}" if ok else "",
                "failed_runs": len(group) - len(ok),
            }
            rows.append(row)
            per_mode[mode] = (row, ok and 2 * conv > len(ok))
        (b, b_conv), (p, p_conv) = per_mode["baseline"], per_mode["proposal"]
        d = {"config": name, "delta_pts": "", "time_ratio": "", "convergent_both": str(bool(b_conv and p_conv)).lower()}
        if b["useless_ratio_pct"] and p["useless_ratio_pct"]:
            d["delta_pts"] = f"{float(p['useless_ratio_pct']) - float(b['useless_ratio_pct']):.2f}"
        if b["wall_time_s"] and p["wall_time_s"] and float(b["wall_time_s"]) > 0:
            ratio = float(p["wall_time_s"]) / float(b["wall_time_s"])
            d["time_ratio"] = f"{ratio:.4f}"
            if b_conv and p_conv and ratio > 0:
                ratios.append(ratio)
        derived.append(d)
    return SweepSummary(list(runs), rows, derived, geomean(ratios))


def write_sweep(summary: SweepSummary, out_dir) -> None:
    out = Path(out_dir)
    _write_csv(out / "sweep_runs.csv", RUN_COLUMNS, summary.runs)
    _write_csv(out / "sweep_summary.csv", SWEEP_COLUMNS, summary.rows)
    g = summary.geomean_time_ratio
    derived = summary.derived + [{
        "config": "geomean", "delta_pts": "", "convergent_both": "",
        "time_ratio": "" if math.isnan(g) else f"{g:.4f}",
    }]
    _write_csv(out / "sweep_derived.csv", DERIVED_COLUMNS, derived)


def run_sweep(
    configs: Sequence[ExperimentConfig],
    repeats: Optional[int],
    out_dir,
    jobs: int = 1,
) -> SweepSummary:
    """Both approaches, seeds 0..repeats-1, for every config."""
    if not configs:
        raise ValueError("run_sweep needs at least one config")
    out = Path(out_dir)
    tasks = []
    for cfg in configs:
        n = repeats if repeats is not None else cfg.repeats
        for mode in MODES:
            for seed in range(n):
                run_dir = out / cfg.name / mode / f"seed{seed}"
                run_dir.mkdir(parents=True, exist_ok=True)
                tasks.append((cfg, mode, seed, run_dir))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_sweep_job, tasks))
    else:
        runs = [_sweep_job(t) for t in tasks]
    summary = summarize(runs)
    write_sweep(summary, out)
    return summary


def read_runs(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- oracle --------------------------------------------------------------------


def run_oracle(cfg: ExperimentConfig, max_len: int, out_dir=None) -> tuple[Optional[AttackPlan], Optional[float]]:
    """Search, replay, and (when ``out_dir`` is given) write ``plan.txt``."""
    plan = search(cfg.env, max_len)
    if plan is None:
        return None, None
    accuracy = replay(plan, cfg.env)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "plan.txt").write_text(plan.to_text())
    return plan, accuracy


def replay_files(cfg: ExperimentConfig, paths: Sequence) -> float:
    """Accuracy of one fixed plan, or of per-secret plan files taken together."""
    plans = [AttackPlan.from_text(Path(p).read_text()) for p in paths]
    if len(plans) == 1:
        return replay(plans[0], cfg.env)
    per_secret = {}
    for p in plans:
        for secret in set(p.decode.values()):
            per_secret[secret] = p
    return replay_per_secret(per_secret, cfg.env)
