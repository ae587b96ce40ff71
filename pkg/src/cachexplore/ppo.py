"""PPO with a small numpy actor-critic.

The network is one ReLU hidden layer feeding a logits head and a scalar
value head. Gradients are derived by hand (see ``loss_and_grad``) and
checked against finite differences in the test suite. Everything runs in
float64 so that a fixed seed reproduces a run exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .env import STEP_FEATURES, ActionKind, AttackEnv, EnvConfig, EpochStats

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicySpec:
    obs_dim: int
    n_actions: int
    hidden_units: int = 256
    activation: str = "relu"
    shared_trunk: bool = True
    # expand each step's action index to a one-hot before the first layer
    action_embedding: bool = True

    def __post_init__(self):
        if self.action_embedding and self.obs_dim % STEP_FEATURES:
            raise ValueError(
                f"action_embedding needs obs_dim to be a multiple of {STEP_FEATURES}, got {self.obs_dim}"
            )
        if self.hidden_units <= 0:
            raise ValueError("hidden_units must be positive")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.obs_dim <= 0 or self.n_actions <= 0:
            raise ValueError("obs_dim and n_actions must be positive")

    @property
    def input_dim(self) -> int:
        if not self.action_embedding:
            return self.obs_dim
        return embedded_dim(self.obs_dim, self.n_actions)

    @classmethod
    def for_env(cls, cfg: EnvConfig, **kwargs) -> "PolicySpec":
        env = AttackEnv(cfg)
        return cls(obs_dim=cfg.obs_dim, n_actions=env.n_actions, **kwargs)


@dataclass(frozen=True)
class TrainHyper:
    gamma: float = 0.99
    lr: float = 3e-4
    clip_ratio: float = 0.2
    rollout_len: int = 2048
    minibatch: int = 64
    gae_lambda: float = 0.95
    ppo_epochs_per_update: int = 10
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_epochs: int = 999

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 < self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in (0, 1]")
        if self.minibatch <= 0 or self.rollout_len % self.minibatch:
            raise ValueError("minibatch must divide rollout_len")
        if self.lr <= 0 or self.clip_ratio <= 0:
            raise ValueError("lr and clip_ratio must be positive")
        if self.ppo_epochs_per_update < 1 or self.max_epochs < 1:
            raise ValueError("ppo_epochs_per_update and max_epochs must be >= 1")


# -- network -----------------------------------------------------------------


def embedded_dim(obs_dim: int, n_actions: int) -> int:
    return obs_dim // STEP_FEATURES * (n_actions + STEP_FEATURES - 1)


def embed_actions(obs: np.ndarray, n_actions: int) -> np.ndarray:
    """Replace each step's normalized action index by a one-hot over actions.

    Empty slots (index feature 0) map to an all-zero one-hot. The other
    step features pass through unchanged.
    """
    steps = obs.reshape(obs.shape[:-1] + (-1, STEP_FEATURES))
    idx = np.rint(steps[..., 0] * n_actions).astype(np.int64) - 1
    onehot = (idx[..., None] == np.arange(n_actions)).astype(np.float64)
    out = np.concatenate([onehot, steps[..., 1:]], axis=-1)
    return out.reshape(obs.shape[:-1] + (-1,))


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_params(spec: PolicySpec, seed: int = 0) -> dict[str, np.ndarray]:
    """Orthogonal init: gain sqrt(2) for hidden, 0.01 policy head, 1 value head."""
    rng = np.random.default_rng(seed)
    h = spec.hidden_units
    p: dict[str, np.ndarray] = {}
    trunks = ("" ,) if spec.shared_trunk else ("_pi", "_vf")
    for t in trunks:
        p["W1" + t] = _orthogonal(rng, spec.input_dim, h, np.sqrt(2.0))
        p["b1" + t] = np.zeros(h)
    p["Wp"] = _orthogonal(rng, h, spec.n_actions, 0.01)
    p["bp"] = np.zeros(spec.n_actions)
    p["Wv"] = _orthogonal(rng, h, 1, 1.0)
    p["bv"] = np.zeros(1)
    return p


def _trunk_names(params) -> tuple[str, str]:
    return ("", "") if "W1" in params else ("_pi", "_vf")


def _inputs(params, obs):
    """Network input for ``obs``; the first layer's width says whether actions are embedded."""
    tp, _ = _trunk_names(params)
    width = params["W1" + tp].shape[0]
    d = obs.shape[-1]
    if width == d:
        return obs
    n_actions = params["Wp"].shape[1]
    if d % STEP_FEATURES == 0 and width == embedded_dim(d, n_actions):
        return embed_actions(obs, n_actions)
    raise ValueError(f"observation has {d} entries, network expects {width}")


def _forward(params, obs):
    tp, tv = _trunk_names(params)
    x = _inputs(params, obs)
    zp = x @ params["W1" + tp] + params["b1" + tp]
    hp = np.maximum(zp, 0.0)
    if tp == tv:
        zv, hv = zp, hp
    else:
        zv = x @ params["W1" + tv] + params["b1" + tv]
        hv = np.maximum(zv, 0.0)
    logits = hp @ params["Wp"] + params["bp"]
    value = (hv @ params["Wv"] + params["bv"])[..., 0]
    return logits, value, (x, zp, hp, zv, hv)


def forward(params: dict[str, np.ndarray], obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits and value for one observation (1-D) or a batch (2-D)."""
    obs = np.asarray(obs, dtype=np.float64)
    logits, value, _ = _forward(params, obs)
    return logits, value


def masked_log_softmax(logits: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    m = np.max(logits, axis=-1, keepdims=True)
    z = logits - m
    with np.errstate(divide="ignore"):
        return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def sample_action(logits: np.ndarray, mask: Optional[np.ndarray], rng: np.random.Generator) -> tuple[int, float]:
    if mask is not None and not np.any(mask):
        raise ValueError("no legal action to sample")
    logp = masked_log_softmax(logits, mask)
    probs = np.exp(logp)
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    idx = min(idx, len(probs) - 1)
    # guard against landing on a zero-probability tail entry through rounding
    while probs[idx] == 0.0:
        idx -= 1
    return idx, float(logp[idx])


# -- advantage estimation -----------------------------------------------------


def compute_gae(
    rewards,
    values,
    dones,
    gamma: float,
    lam: float,
    last_value: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and returns.

    ``last_value`` bootstraps the state after the final step when that step
    did not end its episode.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    n = len(rewards)
    if not len(values) == len(dones) == n:
        raise ValueError("rewards, values and dones must have equal length")
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        next_value = values[t + 1] if t + 1 < n else last_value
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv, adv + values


# -- loss --------------------------------------------------------------------


@dataclass
class LossInfo:
    loss: float
    policy_objective: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float


def loss_and_grad(params, obs, actions, logp_old, advantages, returns, hyper: TrainHyper, masks=None):
    """Total PPO loss (to minimize) and its gradient.

    loss = -mean(min(r*A, clip(r)*A)) + value_coef*mean((V-R)^2)
           - entropy_coef*mean(H)
    """
    b = len(actions)
    logits, value, (x, zp, hp, zv, hv) = _forward(params, obs)
    logp_all = masked_log_softmax(logits, masks)
    probs = np.exp(logp_all)
    rows = np.arange(b)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - logp_old)
    eps = hyper.clip_ratio
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * advantages
    surrogate = np.minimum(unclipped, clipped)
    safe_logp = np.where(probs > 0, logp_all, 0.0)
    entropy = -np.sum(probs * safe_logp, axis=1)
    err = value - returns
    value_loss = np.mean(err**2)
    loss = -np.mean(surrogate) + hyper.value_coef * value_loss - hyper.entropy_coef * np.mean(entropy)

    # d(surrogate)/d(logp): r*A on the unclipped branch, 0 when the clip binds
    d_logp = np.where(unclipped <= clipped, unclipped, 0.0)
    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    g_logits = -(d_logp[:, None] * (onehot - probs)) / b
    # dH/dz_j = -p_j (log p_j + H)
    d_entropy = -probs * (safe_logp + entropy[:, None])
    g_logits -= hyper.entropy_coef * d_entropy / b
    g_value = hyper.value_coef * 2.0 * err / b

    tp, tv = _trunk_names(params)
    g = {
        "Wp": hp.T @ g_logits,
        "bp": g_logits.sum(axis=0),
        "Wv": hv.T @ g_value[:, None],
        "bv": np.array([g_value.sum()]),
    }
    dhp = g_logits @ params["Wp"].T
    dhv = g_value[:, None] @ params["Wv"].T
    if tp == tv:
        dz = (dhp + dhv) * (zp > 0)
        g["W1"] = x.T @ dz
        g["b1"] = dz.sum(axis=0)
    else:
        dzp = dhp * (zp > 0)
        dzv = dhv * (zv > 0)
        g["W1" + tp] = x.T @ dzp
        g["b1" + tp] = dzp.sum(axis=0)
        g["W1" + tv] = x.T @ dzv
        g["b1" + tv] = dzv.sum(axis=0)

    info = LossInfo(
        loss=float(loss),
        policy_objective=float(np.mean(surrogate)),
        value_loss=float(value_loss),
        entropy=float(np.mean(entropy)),
        clip_fraction=float(np.mean(np.abs(ratio - 1) > eps)),
        approx_kl=float(np.mean(logp_old - logp)),
    )
    return float(loss), g, info


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- rollouts ----------------------------------------------------------------


class RolloutBuffer:
    def __init__(self, size: int, obs_dim: int, n_actions: int):
        self.size = size
        self.obs = np.zeros((size, obs_dim))
        self.actions = np.zeros(size, dtype=np.int64)
        self.logp = np.zeros(size)
        self.rewards = np.zeros(size)
        self.values = np.zeros(size)
        self.dones = np.zeros(size, dtype=bool)
        self.truncated = np.zeros(size, dtype=bool)
        self.masks = np.ones((size, n_actions), dtype=bool)
        self.advantages = np.zeros(size)
        self.returns = np.zeros(size)
        self.n = 0

    @property
    def full(self) -> bool:
        return self.n == self.size

    def add(self, obs, action, logp, reward, value, done, truncated, mask):
        i = self.n
        self.obs[i] = obs
        self.actions[i] = action
        self.logp[i] = logp
        self.rewards[i] = reward
        self.values[i] = value
        self.dones[i] = done
        self.truncated[i] = truncated
        self.masks[i] = mask
        self.n += 1

    def finish(self, last_value: float, gamma: float, lam: float):
        adv, ret = compute_gae(
            self.rewards[: self.n], self.values[: self.n], self.dones[: self.n],
            gamma, lam, last_value,
        )
        self.returns[: self.n] = ret
        std = adv.std()
        self.advantages[: self.n] = (adv - adv.mean()) / (std + 1e-8)

    def clear(self):
        self.n = 0


def ppo_update(buffer: RolloutBuffer, params, opt: Adam, hyper: TrainHyper, rng: np.random.Generator) -> LossInfo:
    """Clipped-surrogate passes over shuffled minibatches; updates params in place."""
    if not buffer.full:
        raise TrainingError(f"buffer holds {buffer.n} of {buffer.size} steps")
    infos = []
    for _ in range(hyper.ppo_epochs_per_update):
        order = rng.permutation(buffer.size)
        for start in range(0, buffer.size, hyper.minibatch):
            idx = order[start:start + hyper.minibatch]
            loss, grads, info = loss_and_grad(
                params, buffer.obs[idx], buffer.actions[idx], buffer.logp[idx],
                buffer.advantages[idx], buffer.returns[idx], hyper, buffer.masks[idx],
            )
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(
                    f"non-finite loss {loss} (value_loss={info.value_loss}, "
                    f"entropy={info.entropy}, kl={info.approx_kl})"
                )
            opt.step(params, grads)
            infos.append(info)
    return LossInfo(*np.mean([list(asdict(i).values()) for i in infos], axis=0))


# -- training loop -----------------------------------------------------------


@dataclass
class GreedyEpisode:
    secret: int
    actions: list
    latencies: list
    guess: Optional[int]

    @property
    def correct(self) -> bool:
        return self.guess == self.secret


@dataclass
class TrainReport:
    converged: bool
    epochs_run: int
    epochs: list[EpochStats]
    total_actions: int
    total_useless: int
    wall_time: float
    extracted_plans: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict, repr=False)

    @property
    def useless_ratio(self) -> float:
        return self.total_useless / self.total_actions if self.total_actions else 0.0

    @property
    def plan_accuracy(self) -> float:
        if not self.extracted_plans:
            return 0.0
        plans = self.extracted_plans.values()
        return sum(p.correct for p in plans) / len(plans)


def greedy_episode(params, env_cfg: EnvConfig, secret: int) -> GreedyEpisode:
    """Run the argmax policy for one forced secret."""
    env = AttackEnv(env_cfg)
    obs = env.reset_episode(secret)
    actions, latencies, guess = [], [], None
    done = False
    while not done:
        logits, _ = forward(params, obs)
        res = env.step(int(np.argmax(logits)))
        action = res.info["action"]
        if action.kind is ActionKind.GUESS:
            guess = action.operand
        else:
            actions.append(action)
            latencies.append(res.info["latency"])
        obs, done = res.observation, res.done
    return GreedyEpisode(secret, actions, latencies, guess)


def extract_plans(params, env_cfg: EnvConfig) -> dict[int, GreedyEpisode]:
    return {s: greedy_episode(params, env_cfg, s) for s in env_cfg.secret_domain}


def train(
    env_cfg: EnvConfig,
    spec: Optional[PolicySpec] = None,
    hyper: Optional[TrainHyper] = None,
    seed: int = 0,
    on_epoch: Optional[Callable[[int, EpochStats], None]] = None,
) -> TrainReport:
    """Train until an epoch is 100% correct or ``max_epochs`` have run."""
    hyper = hyper or TrainHyper()
    env = AttackEnv(env_cfg)
    spec = spec or PolicySpec(obs_dim=env_cfg.obs_dim, n_actions=env.n_actions)
    if spec.obs_dim != env_cfg.obs_dim or spec.n_actions != env.n_actions:
        raise ValueError(
            f"policy dims ({spec.obs_dim}, {spec.n_actions}) do not match environment "
            f"({env_cfg.obs_dim}, {env.n_actions})"
        )
    params = init_params(spec, seed)
    opt = Adam(params, lr=hyper.lr)
    rng = np.random.default_rng([seed, 1])
    buf = RolloutBuffer(hyper.rollout_len, spec.obs_dim, spec.n_actions)
    mask = env.action_mask()

    t0 = time.perf_counter()
    epochs: list[EpochStats] = []
    converged = False
    obs = env.reset_episode()
    while not converged and len(epochs) < hyper.max_epochs:
        logits, value = forward(params, obs)
        a, logp = sample_action(logits, mask, rng)
        res = env.step(a)
        buf.add(obs, a, logp, res.reward, value, res.done, res.info["truncated"], mask)
        obs = env.reset_episode() if res.done else res.observation

        if env.epoch_complete:
            stats = env.epoch_stats()
            epochs.append(stats)
            if on_epoch is not None:
                on_epoch(len(epochs), stats)
            converged = stats.episodes_completed > 0 and stats.correct_rate == 1.0

        if buf.full and not converged and len(epochs) < hyper.max_epochs:
            last_value = 0.0 if res.done else float(forward(params, obs)[1])
            buf.finish(last_value, hyper.gamma, hyper.gae_lambda)
            ppo_update(buf, params, opt, hyper, rng)
            buf.clear()

    total_actions = sum(e.total_actions for e in epochs)
    total_useless = sum(e.useless_actions for e in epochs)
    plans = extract_plans(params, env_cfg) if converged else {}
    return TrainReport(
        converged=converged,
        epochs_run=len(epochs),
        epochs=epochs,
        total_actions=total_actions,
        total_useless=total_useless,
        wall_time=time.perf_counter() - t0,
        extracted_plans=plans,
        params=params,
    )


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params, spec: PolicySpec, hyper: TrainHyper, seed: int):
    meta = {
        "version": CHECKPOINT_VERSION,
        "spec": asdict(spec),
        "hyper": asdict(hyper),
        "seed": seed,
    }
    arrays = {f"param/{k}": v for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], PolicySpec, TrainHyper, int]:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k.split("/", 1)[1]: data[k].copy() for k in data.files if k.startswith("param/")}
    return params, PolicySpec(**meta["spec"]), TrainHyper(**meta["hyper"]), meta["seed"]
