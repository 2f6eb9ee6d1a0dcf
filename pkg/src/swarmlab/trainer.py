"""Clipped-surrogate policy optimization over decentralized shared-policy rollouts."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import envs as E
from .world import BodyCommand


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch_size: int = 512
    lr: float = 3e-4
    entropy_coef: float = 5e-3
    value_coef: float = 0.5
    iterations: int = 100
    n_envs: int = 64
    horizon: int = 200  # policy steps per env per iteration
    max_grad_norm: float = 1.0
    snapshot_interval: int = 50  # soccer self-play
    pool_capacity: int = 10
    enc_hidden: tuple = (64, 64)
    feat_dim: int = 32
    trunk_hidden: tuple = (128, 128)
    history_len: int = 4
    time_limit: float = 45.0
    aggregator: str = "max"
    max_entities: tuple = ()

    def __post_init__(self):
        assert 0.0 <= self.gamma < 1.0


@dataclass
class RolloutBuffer:
    obs: list = field(default_factory=list)
    u: list = field(default_factory=list)
    logp: list = field(default_factory=list)
    reward: list = field(default_factory=list)
    value: list = field(default_factory=list)
    done: list = field(default_factory=list)
    episode_id: list = field(default_factory=list)
    # per (env, agent) stream: record indices in time order plus bootstrap value
    streams: list = field(default_factory=list)
    adv: np.ndarray | None = None
    ret: np.ndarray | None = None

    def __len__(self):
        return len(self.obs)


def gae(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimation.

    `values` carries one bootstrap entry beyond the rewards. Returns raw
    (unnormalized) advantages and returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    t_len = rewards.shape[0]
    if values.shape[0] != t_len + 1 or dones.shape[0] != t_len:
        raise ValueError("gae input length mismatch")
    adv = np.zeros(t_len)
    acc = 0.0
    for t in reversed(range(t_len)):
        mask = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * mask - values[t]
        acc = delta + gamma * lam * mask * acc
        adv[t] = acc
    return adv, adv + values[:-1]


@dataclass
class EpisodeStats:
    returns: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)

    @property
    def mean_return(self):
        return float(np.mean(self.returns)) if self.returns else 0.0

    @property
    def success_rate(self):
        if not self.outcomes:
            return 0.0
        return float(np.mean([o == E.Outcome.SUCCESS for o in self.outcomes]))


def _policy_commands(params, obs_list, rng=None):
    """Commands (and training records) for a list of observations.

    Stochastic Beta sampling when rng is given, else deterministic mean.
    """
    records = []
    commands = []
    for obs in obs_list:
        alpha, beta, value, _ = enc.forward(params, obs)
        if rng is not None:
            u = enc.beta_sample(alpha, beta, rng)
        else:
            u = enc.beta_mean(alpha, beta)
        act = enc.scale_action(u, params.config.action_bounds)
        commands.append(BodyCommand(*act))
        records.append((obs, u, enc.beta_logprob(alpha, beta, u), value))
    return commands, records


def collect(envs, params, train_cfg: TrainConfig, pool, rng: np.random.Generator,
            curriculum: E.CurriculumState):
    """Roll out every env for `horizon` policy steps with the shared policy.

    Episodes auto-reset on termination, applying curriculum updates; soccer
    opponents act deterministically via pool-sampled snapshots.
    """
    buf = RolloutBuffer()
    stats = EpisodeStats()
    stream_idx = {}
    ep_return = {i: 0.0 for i in range(len(envs))}
    episode_counter = 0
    episode_of_env = {}

    for i, env in enumerate(envs):
        if env.world is None:
            env.curriculum = curriculum
            env.reset(rng)
            if env.cfg.task == "soccer" and env.cfg.n_opponents > 0:
                env.opponent_params = pool.sample(rng)
        episode_of_env[i] = episode_counter
        episode_counter += 1
        for a in range(env.cfg.n_agents):
            stream_idx[(i, a)] = []

    for _ in range(train_cfg.horizon):
        for i, env in enumerate(envs):
            n = env.cfg.n_agents
            obs_list = [env.observe(a) for a in range(n)]
            commands, records = _policy_commands(params, obs_list, rng)
            if env.cfg.task == "soccer" and env.cfg.n_opponents > 0:
                opp_obs = [env.observe(a) for a in range(n, env.n_agents_total)]
                opp_cmds, _ = _policy_commands(env.opponent_params, opp_obs, None)
                commands = commands + opp_cmds
            r, outcome = env.step(commands)
            done = outcome != E.Outcome.RUNNING
            ep_return[i] += r
            for a, (obs, u, logp, value) in enumerate(records):
                rec = len(buf.obs)
                buf.obs.append(obs)
                buf.u.append(u)
                buf.logp.append(logp)
                buf.reward.append(r)
                buf.value.append(value)
                buf.done.append(done)
                buf.episode_id.append(episode_of_env[i])
                stream_idx[(i, a)].append(rec)
            if done:
                stats.returns.append(ep_return[i])
                stats.outcomes.append(outcome)
                ep_return[i] = 0.0
                goals_reached = sum(g.reached for g in env.world.goals)
                curriculum = E.update_curriculum(curriculum, env.cfg.task, outcome,
                                                 goals_reached)
                env.curriculum = curriculum
                env.reset(rng)
                if env.cfg.task == "soccer" and env.cfg.n_opponents > 0:
                    env.opponent_params = pool.sample(rng)
                episode_of_env[i] = episode_counter
                episode_counter += 1

    for (i, a), recs in sorted(stream_idx.items()):
        if not recs:
            continue
        obs = envs[i].observe(a)
        _, _, bootstrap, _ = enc.forward(params, obs)
        buf.streams.append((i, a, recs, bootstrap))
    return buf, stats, curriculum


def compute_advantages(buf: RolloutBuffer, gamma: float, lam: float):
    """Per-stream GAE followed by batch-wide normalization."""
    n = len(buf)
    adv = np.zeros(n)
    ret = np.zeros(n)
    for _, _, recs, bootstrap in buf.streams:
        rewards = [buf.reward[r] for r in recs]
        values = [buf.value[r] for r in recs] + [bootstrap]
        dones = [buf.done[r] for r in recs]
        a, rt = gae(rewards, values, dones, gamma, lam)
        for k, r in enumerate(recs):
            adv[r] = a[k]
            ret[r] = rt[k]
    buf.ret = ret
    buf.adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return buf


class Adam:
    """First-order adaptive-moment optimizer with bias correction."""

    def __init__(self, size: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, flat_params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return flat_params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def sample_loss_and_grads(params, obs, u, logp_old, adv, ret, cfg: TrainConfig,
                          grads, scale: float):
    """One sample's PPO loss value; gradients accumulated into `grads` (scaled)."""
    alpha, beta, value, cache = enc.forward(params, obs)
    logp_new = enc.beta_logprob(alpha, beta, u)
    ratio = math.exp(logp_new - logp_old)
    clipped_ratio = min(max(ratio, 1.0 - cfg.clip_eps), 1.0 + cfg.clip_eps)
    unclipped = ratio * adv
    clipped = clipped_ratio * adv
    pol_loss = -min(unclipped, clipped)
    val_loss = cfg.value_coef * (value - ret) ** 2
    entropy = enc.beta_entropy(alpha, beta)
    loss = pol_loss + val_loss - cfg.entropy_coef * entropy

    d_logp = -adv * ratio if unclipped <= clipped else 0.0
    dlp_da, dlp_db = enc.beta_logprob_grads(alpha, beta, u)
    dh_da, dh_db = enc.beta_entropy_grads(alpha, beta)
    d_alpha = (d_logp * dlp_da - cfg.entropy_coef * dh_da) * scale
    d_beta = (d_logp * dlp_db - cfg.entropy_coef * dh_db) * scale
    d_value = 2.0 * cfg.value_coef * (value - ret) * scale
    enc.backward(params, cache, d_alpha, d_beta, d_value, grads)
    return loss, logp_new, ratio


def ppo_update(buf: RolloutBuffer, params, cfg: TrainConfig, adam: Adam,
               rng: np.random.Generator):
    """Epochs of minibatch clipped-surrogate updates; returns (params, stats)."""
    if len(buf) == 0:
        raise ValueError("empty rollout buffer")
    n = len(buf)
    stats = {"loss": 0.0, "kl": 0.0, "clip_frac": 0.0, "n_minibatches": 0}
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start: start + cfg.minibatch_size]
            grads = enc.zeros_like_params(params)
            scale = 1.0 / len(idx)
            total_loss = 0.0
            kl = 0.0
            clipped_n = 0
            for j in idx:
                loss, logp_new, ratio = sample_loss_and_grads(
                    params, buf.obs[j], buf.u[j], buf.logp[j],
                    buf.adv[j], buf.ret[j], cfg, grads, scale)
                total_loss += loss * scale
                kl += (buf.logp[j] - logp_new) * scale
                if abs(ratio - 1.0) > cfg.clip_eps:
                    clipped_n += 1
            if not math.isfinite(total_loss):
                raise RuntimeError(f"NaN/inf PPO loss (kl={kl}); aborting update")
            g = enc.params_to_flat(grads)
            gnorm = float(np.linalg.norm(g))
            if gnorm > cfg.max_grad_norm:
                g *= cfg.max_grad_norm / gnorm
            flat = adam.step(enc.params_to_flat(params), g)
            params = enc.flat_to_params(flat, params)
            stats["loss"] += total_loss
            stats["kl"] += kl
            stats["clip_frac"] += clipped_n / len(idx)
            stats["n_minibatches"] += 1
    m = max(stats["n_minibatches"], 1)
    stats["loss"] /= m
    stats["kl"] /= m
    stats["clip_frac"] /= m
    return params, stats


def make_training_envs(task: str, cfg: TrainConfig, rng: np.random.Generator,
                       **overrides):
    """n_envs independent episode instances; agent counts fixed per instance.

    Entity counts are drawn once per env so each (env, agent) pair forms a
    contiguous trajectory stream across auto-resets; the mixture over envs
    covers the per-episode training ranges.
    """
    envs = []
    for _ in range(cfg.n_envs):
        ep = E.sample_episode_config(task, rng, history_len=cfg.history_len,
                                     time_limit=cfg.time_limit, **overrides)
        envs.append(E.Environment(ep))
    return envs


@dataclass
class TrainResult:
    params: object
    gee_config: object
    checkpoints: list
    curve_path: Path
    curriculum: E.CurriculumState


def train(task: str, cfg: TrainConfig, seed: int, out_dir,
          env_overrides: dict | None = None, log=None) -> TrainResult:
    """collect -> gae -> ppo_update loop with curriculum and self-play hooks."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    envs = make_training_envs(task, cfg, rng, **(env_overrides or {}))
    gee_cfg = E.make_gee_config(envs[0].cfg, cfg.enc_hidden, cfg.feat_dim,
                                cfg.trunk_hidden, cfg.aggregator,
                                cfg.max_entities or None)
    params = enc.init_params(gee_cfg, rng)
    adam = Adam(enc.params_to_flat(params).size, cfg.lr)
    pool = E.OpponentPool(cfg.pool_capacity)
    pool.push(params)
    curriculum = E.CurriculumState()

    checkpoints = []
    ckpt0 = out_dir / "checkpoint_init.bin"
    enc.save_checkpoint(ckpt0, params)
    checkpoints.append(ckpt0)

    curve_path = out_dir / "learning_curve.csv"
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        fh.write(f"# provenance {gee_cfg.digest()[:16]} seed={seed}\n")
        writer.writerow(["iteration", "mean_episode_reward", "success_rate",
                         "curriculum_level", "loss", "kl"])
        for it in range(cfg.iterations):
            buf, stats, curriculum = collect(envs, params, cfg, pool, rng, curriculum)
            buf = compute_advantages(buf, cfg.gamma, cfg.lam)
            params, upd = ppo_update(buf, params, cfg, adam, rng)
            if task == "soccer" and (it + 1) % cfg.snapshot_interval == 0:
                pool.push(params)
            level = (curriculum.difficulty if task == "navigation"
                     else curriculum.robot_range_hi)
            writer.writerow([it, f"{stats.mean_return:.6g}",
                             f"{stats.success_rate:.6g}", f"{level:.6g}",
                             f"{upd['loss']:.6g}", f"{upd['kl']:.6g}"])
            if log:
                log(f"iter {it}: R={stats.mean_return:.3f} "
                    f"success={stats.success_rate:.2f} level={level}")

    ckpt = out_dir / "checkpoint_final.bin"
    enc.save_checkpoint(ckpt, params)
    checkpoints.append(ckpt)
    return TrainResult(params, gee_cfg, checkpoints, curve_path, curriculum)


def run_episode(env: E.Environment, params, rng: np.random.Generator,
                max_steps: int | None = None, stochastic: bool = False,
                opponent_params=None):
    """Play one episode; returns (outcome, completion_time, total_reward)."""
    env.reset(rng)
    if max_steps is None:
        max_steps = int(env.cfg.time_limit / 0.2)
    total = 0.0
    for _ in range(max_steps):
        n = env.cfg.n_agents
        obs_list = [env.observe(a) for a in range(n)]
        commands, _ = _policy_commands(params, obs_list, rng if stochastic else None)
        if env.cfg.task == "soccer" and env.cfg.n_opponents > 0:
            opp = opponent_params or params
            opp_obs = [env.observe(a) for a in range(n, env.n_agents_total)]
            opp_cmds, _ = _policy_commands(opp, opp_obs, None)
            commands = commands + opp_cmds
        r, outcome = env.step(commands)
        total += r
        if outcome != E.Outcome.RUNNING:
            return outcome, env.world.t, total
    return E.Outcome.FAILURE, env.world.t, total


def evaluate(task: str, params, episode_cfg: E.EpisodeConfig, episodes: int,
             seed: int, stochastic: bool = False):
    """Deterministic-action evaluation; returns (success_rate, mean_time_success)."""
    rng = np.random.default_rng(seed)
    env = E.Environment(episode_cfg)
    successes = 0
    times = []
    for _ in range(episodes):
        outcome, t, _ = run_episode(env, params, rng, stochastic=stochastic)
        if outcome == E.Outcome.SUCCESS:
            successes += 1
            times.append(t)
    rate = successes / episodes
    mean_time = float(np.mean(times)) if times else float(episode_cfg.time_limit)
    return rate, mean_time
