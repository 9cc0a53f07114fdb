"""Value-factorized multi-agent Q-learning with a shared feedforward agent
network, VDN/monotonic mixers, double-Q targets, an episode replay buffer,
and the outer training loop that interleaves rollouts, memory construction,
TD rounds, and embedder refreshes."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import env as genv
from . import nn
from .embedding import EmbeddingConfig, make_embedder, train_embedder
from .incentive import (
    E3BState,
    IncentiveConfig,
    e3b_bonus,
    ec_target,
    episodic_incentive_batch,
    reward_ec,
)
from .memory import EpisodicBuffer

MIXERS = ("vdn", "mono")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    lr: float = 5e-4
    eps_start: float = 1.0
    eps_final: float = 0.05
    eps_anneal_steps: int = 200_000
    target_interval: int = 200
    n_circle: int = 1
    batch_episodes: int = 32
    replay_capacity: int = 5000
    total_steps: int = 200_000
    eval_interval: int = 2000
    eval_episodes: int = 30
    return_threshold: float = 10.0
    mixer: str = "vdn"

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if not 0.0 <= self.eps_final <= self.eps_start <= 1.0:
            raise ValueError("need 0 <= eps_final <= eps_start <= 1")
        if self.mixer not in MIXERS:
            raise ValueError(f"unknown mixer {self.mixer!r}")
        for name in ("eps_anneal_steps", "target_interval", "n_circle",
                     "batch_episodes", "replay_capacity", "eval_interval",
                     "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")


def epsilon_at(step: int, cfg: TrainConfig) -> float:
    frac = min(max(step, 0) / cfg.eps_anneal_steps, 1.0)
    return cfg.eps_start + (cfg.eps_final - cfg.eps_start) * frac


@dataclass
class Episode:
    obs: np.ndarray      # (T+1, n_agents, obs_dim)
    states: np.ndarray   # (T+1, state_dim)
    actions: np.ndarray  # (T, n_agents)
    rewards: np.ndarray  # (T,)
    bonuses: np.ndarray  # (T,) rollout-time novelty bonuses
    episode_return: float
    desirable: int

    def __len__(self) -> int:
        return self.actions.shape[0]


class AgentNet:
    """One dense stack shared by all agents; the agent id and previous action
    enter as one-hot input blocks."""

    def __init__(self, obs_dim: int, n_agents: int, n_actions: int,
                 rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.input_dim = obs_dim + n_agents + n_actions
        self.net = nn.Sequential([
            nn.Dense(self.input_dim, 64, activation="relu", rng=rng),
            nn.Dense(64, 64, activation="relu", rng=rng),
            nn.Dense(64, n_actions, activation="identity", rng=rng),
        ])

    def modules(self) -> list:
        return [self.net]

    def _inputs(self, obs: np.ndarray, last_actions: np.ndarray) -> np.ndarray:
        """obs (..., n_agents, obs_dim), last_actions (..., n_agents) with -1
        for "no action yet" -> flat (rows, input_dim)."""
        lead = obs.shape[:-1]
        rows = int(np.prod(lead))
        flat_obs = obs.reshape(rows, self.obs_dim)
        ids = np.tile(np.eye(self.n_agents), (rows // self.n_agents, 1))
        la = np.asarray(last_actions).reshape(rows)
        la_hot = np.zeros((rows, self.n_actions))
        taken = la >= 0
        la_hot[np.flatnonzero(taken), la[taken]] = 1.0
        return np.concatenate([flat_obs, ids, la_hot], axis=1)

    def q_values(self, obs: np.ndarray, last_actions: np.ndarray) -> np.ndarray:
        """(n_agents, obs_dim) -> (n_agents, n_actions)."""
        return self.net.forward(self._inputs(obs, last_actions))

    def q_all(self, obs: np.ndarray, last_actions: np.ndarray) -> np.ndarray:
        """(B, T1, n_agents, obs_dim) -> (B, T1, n_agents, n_actions)."""
        b, t1, n, _ = obs.shape
        q = self.net.forward(self._inputs(obs, last_actions))
        return q.reshape(b, t1, n, self.n_actions)

    def backward_all(self, d_q: np.ndarray) -> None:
        self.net.backward(d_q.reshape(-1, self.n_actions))


class VdnMixer:
    kind = "vdn"

    def __init__(self, state_dim: int, n_agents: int,
                 rng: np.random.Generator | None = None):
        self.n_agents = n_agents

    def modules(self) -> list:
        return []

    def params(self) -> list:
        return []

    def grads(self) -> list:
        return []

    def forward(self, q: np.ndarray, states: np.ndarray) -> np.ndarray:
        return q.sum(axis=1)

    def backward(self, d_qtot: np.ndarray) -> np.ndarray:
        return np.repeat(d_qtot[:, None], self.n_agents, axis=1)


class MonotonicMixer:
    """State-conditioned nonnegative combination: Q_tot = sum_i |w_i(s)|*Q_i
    + b(s). Abs keeps every dQ_tot/dQ_i >= 0."""

    kind = "mono"

    def __init__(self, state_dim: int, n_agents: int, rng: np.random.Generator):
        self.n_agents = n_agents
        self.w_net = nn.Sequential([
            nn.Dense(state_dim, 32, activation="relu", rng=rng),
            nn.Dense(32, n_agents, activation="identity", rng=rng),
        ])
        self.b_net = nn.Sequential([
            nn.Dense(state_dim, 32, activation="relu", rng=rng),
            nn.Dense(32, 1, activation="identity", rng=rng),
        ])
        self._w_raw = None
        self._q = None

    def modules(self) -> list:
        return [self.w_net, self.b_net]

    def params(self) -> list:
        return nn.collect_params(self.modules())

    def grads(self) -> list:
        return nn.collect_grads(self.modules())

    def forward(self, q: np.ndarray, states: np.ndarray) -> np.ndarray:
        self._w_raw = self.w_net.forward(states)
        self._q = q
        bias = self.b_net.forward(states)[:, 0]
        return np.sum(np.abs(self._w_raw) * q, axis=1) + bias

    def backward(self, d_qtot: np.ndarray) -> np.ndarray:
        d_col = d_qtot[:, None]
        self.w_net.backward(d_col * np.sign(self._w_raw) * self._q)
        self.b_net.backward(d_col)
        return d_col * np.abs(self._w_raw)


def make_mixer(kind: str, state_dim: int, n_agents: int,
               rng: np.random.Generator):
    if kind == "vdn":
        return VdnMixer(state_dim, n_agents, rng)
    if kind == "mono":
        return MonotonicMixer(state_dim, n_agents, rng)
    raise ValueError(f"unknown mixer {kind!r}")


class ReplayBuffer:
    """Whole-episode FIFO store with uniform with-replacement sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._episodes: list[Episode] = []

    def __len__(self) -> int:
        return len(self._episodes)

    def append(self, episode: Episode) -> None:
        self._episodes.append(episode)
        if len(self._episodes) > self.capacity:
            self._episodes.pop(0)

    def sample(self, rng: np.random.Generator, k: int) -> list[Episode]:
        if not self._episodes:
            raise ValueError("empty replay buffer")
        idx = rng.integers(0, len(self._episodes), size=k)
        return [self._episodes[i] for i in idx]


def select_actions(net: AgentNet, obs: np.ndarray, last_actions: np.ndarray,
                   epsilon: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    q = net.q_values(obs, last_actions)
    greedy = np.argmax(q, axis=1)
    actions = np.empty(net.n_agents, dtype=np.int64)
    for i in range(net.n_agents):
        if rng.random() < epsilon:
            actions[i] = rng.integers(net.n_actions)
        else:
            actions[i] = greedy[i]
    return actions


def rollout(env_cfg: genv.GridworldConfig, net: AgentNet,
            rng: np.random.Generator, *, eps_fn=None, start_step: int = 0,
            greedy: bool = False, return_threshold: float = 10.0,
            embedder=None, e3b_state: E3BState | None = None) -> Episode:
    """Play one episode. With an E3BState the per-transition novelty of the
    reached state is recorded (start state seeds the covariance; its bonus is
    discarded)."""
    state = genv.reset(env_cfg)
    obs = genv.observations(env_cfg, state)
    la = np.full(env_cfg.n_agents, -1, dtype=np.int64)
    obs_seq = [obs]
    state_seq = [genv.state_vector(env_cfg, state)]
    actions, rewards, bonuses = [], [], []
    if e3b_state is not None:
        e3b_state.reset()
        phi0 = embedder.embed(state_seq[0][None, :], np.array([0.0]))[0]
        e3b_bonus(phi0, e3b_state)
    t = 0
    while True:
        eps = 0.0 if greedy else eps_fn(start_step + t)
        acts = select_actions(net, obs, la, eps, rng)
        state, reward, terminal = genv.step(env_cfg, state, tuple(acts))
        obs = genv.observations(env_cfg, state)
        svec = genv.state_vector(env_cfg, state)
        bonus = 0.0
        if e3b_state is not None:
            t_norm = min((t + 1) / env_cfg.t_max, 1.0)
            phi = embedder.embed(svec[None, :], np.array([t_norm]))[0]
            bonus = e3b_bonus(phi, e3b_state)
        obs_seq.append(obs)
        state_seq.append(svec)
        actions.append(acts)
        rewards.append(reward)
        bonuses.append(bonus)
        la = acts
        t += 1
        if terminal:
            break
    ep_return = float(np.sum(rewards))
    return Episode(
        obs=np.stack(obs_seq), states=np.stack(state_seq),
        actions=np.stack(actions).astype(np.int64),
        rewards=np.asarray(rewards, dtype=np.float64),
        bonuses=np.asarray(bonuses, dtype=np.float64),
        episode_return=ep_return,
        desirable=genv.label_desirability(ep_return, return_threshold),
    )


def _pad_batch(episodes: list[Episode]):
    b = len(episodes)
    t_max = max(len(ep) for ep in episodes)
    n, od = episodes[0].obs.shape[1], episodes[0].obs.shape[2]
    sd = episodes[0].states.shape[1]
    obs = np.zeros((b, t_max + 1, n, od))
    states = np.zeros((b, t_max + 1, sd))
    actions = np.zeros((b, t_max, n), dtype=np.int64)
    rewards = np.zeros((b, t_max))
    bonuses = np.zeros((b, t_max))
    mask = np.zeros((b, t_max))
    done = np.zeros((b, t_max))
    la = np.full((b, t_max + 1, n), -1, dtype=np.int64)
    for i, ep in enumerate(episodes):
        t = len(ep)
        obs[i, :t + 1] = ep.obs
        states[i, :t + 1] = ep.states
        actions[i, :t] = ep.actions
        rewards[i, :t] = ep.rewards
        bonuses[i, :t] = ep.bonuses
        mask[i, :t] = 1.0
        done[i, t - 1] = 1.0
        la[i, 1:t + 1] = ep.actions
    return obs, states, actions, rewards, bonuses, mask, done, la


def td_loss(episodes: list[Episode], net: AgentNet, mixer, target_net: AgentNet,
            target_mixer, *, gamma: float, inc_cfg: IncentiveConfig,
            memory: EpisodicBuffer | None = None, embedder=None,
            delta: float = 0.0, env_t_max: int = 50):
    """Masked mean squared TD error over a padded episode batch, with the
    mode's reward/loss term. Populates gradients on net and mixer; the
    bootstrap action comes from the online net, its value from the target net.
    Returns (loss, stats)."""
    if not episodes:
        raise ValueError("empty batch")
    obs, states, actions, rewards, bonuses, mask, done, la = _pad_batch(episodes)
    b, t1 = obs.shape[0], obs.shape[1]
    t_len = t1 - 1
    n, a_dim = net.n_agents, net.n_actions
    rows = b * t_len

    q_all = net.q_all(obs, la)
    qt_all = target_net.q_all(obs, la)
    q_chosen = np.take_along_axis(q_all[:, :t_len], actions[..., None],
                                  axis=-1)[..., 0]
    qtot = mixer.forward(q_chosen.reshape(rows, n),
                         states[:, :t_len].reshape(rows, -1))
    a_star = np.argmax(q_all[:, 1:], axis=-1)
    q_eval = np.take_along_axis(qt_all[:, 1:], a_star[..., None], axis=-1)[..., 0]
    y_boot = target_mixer.forward(q_eval.reshape(rows, n),
                                  states[:, 1:].reshape(rows, -1))

    mask_f = mask.reshape(rows)
    n_valid = mask_f.sum()
    rew = rewards.reshape(rows)
    done_f = done.reshape(rows)

    hit = np.zeros(rows, dtype=bool)
    h_rec = np.zeros(rows)
    n_call = np.zeros(rows, dtype=np.int64)
    n_xi = np.zeros(rows, dtype=np.int64)
    if (inc_cfg.mode in ("ei", "ec", "rec") and memory is not None
            and len(memory) > 0):
        valid = np.flatnonzero(mask_f)
        next_states = states[:, 1:].reshape(rows, -1)
        t_norm = np.broadcast_to((np.arange(t_len) + 1.0) / env_t_max,
                                 (b, t_len)).reshape(rows)
        hv, hh, hxi, hnc, hnx = memory.recall_batch(next_states[valid],
                                                    t_norm[valid], embedder,
                                                    delta)
        hit[valid] = hv
        h_rec[valid] = hh
        n_call[valid] = hnc
        n_xi[valid] = hnx

    r_p = np.zeros(rows)
    if inc_cfg.mode == "ei":
        r_p = episodic_incentive_batch(hit, h_rec, n_call, n_xi, y_boot, gamma,
                                       clamp=inc_cfg.clamp)
        y = rew + r_p + gamma * y_boot * (1.0 - done_f)
    elif inc_cfg.mode == "rec":
        r_ec = np.where(hit, reward_ec(rew, gamma, h_rec, qtot,
                                       inc_cfg.lambda_ec), 0.0)
        y = rew + r_ec + gamma * y_boot * (1.0 - done_f)
    elif inc_cfg.mode == "e3b":
        y = (rew + inc_cfg.beta_e3b * bonuses.reshape(rows)
             + gamma * y_boot * (1.0 - done_f))
    else:  # "ec" keeps the plain target; "none" is plain TD
        y = rew + gamma * y_boot * (1.0 - done_f)

    err = (qtot - y) * mask_f
    loss = float(np.sum(err ** 2) / n_valid)
    d_qtot = 2.0 * err / n_valid
    if inc_cfg.mode == "ec":
        ec_gate = mask_f * hit
        ec_err = (qtot - ec_target(rew, gamma, h_rec)) * ec_gate
        loss += float(inc_cfg.lambda_ec * np.sum(ec_err ** 2) / n_valid)
        d_qtot = d_qtot + 2.0 * inc_cfg.lambda_ec * ec_err / n_valid

    nn.zero_grads(net.modules() + mixer.modules())
    d_q = mixer.backward(d_qtot)
    d_all = np.zeros_like(q_all)
    scatter = np.zeros((b, t_len, n, a_dim))
    np.put_along_axis(scatter, actions[..., None],
                      (d_q.reshape(b, t_len, n))[..., None], axis=-1)
    d_all[:, :t_len] = scatter
    net.backward_all(d_all)

    stats = {
        "loss": loss,
        "mean_rp": float(r_p[mask_f > 0].mean()) if n_valid else 0.0,
        "recall_rate": float(hit[mask_f > 0].mean()) if n_valid else 0.0,
    }
    return loss, stats


class Learner:
    """Owns the online/target nets, the optimizer, and the sync counter."""

    def __init__(self, env_cfg: genv.GridworldConfig, cfg: TrainConfig,
                 rng: np.random.Generator):
        od, n, a = env_cfg.obs_dim, env_cfg.n_agents, len(genv.ACTIONS)
        sd = env_cfg.state_dim
        self.cfg = cfg
        self.net = AgentNet(od, n, a, rng)
        self.mixer = make_mixer(cfg.mixer, sd, n, rng)
        self.target_net = AgentNet(od, n, a, np.random.default_rng(0))
        self.target_mixer = make_mixer(cfg.mixer, sd, n,
                                       np.random.default_rng(0))
        self.sync_targets()
        self.optimizer = nn.Adam(
            nn.collect_params(self.net.modules() + self.mixer.modules()),
            lr=cfg.lr)
        self.train_steps = 0

    def sync_targets(self) -> None:
        nn.copy_params(self.net.modules() + self.mixer.modules(),
                       self.target_net.modules() + self.target_mixer.modules())

    def train_batch(self, episodes: list[Episode], *, memory=None,
                    embedder=None, delta: float = 0.0,
                    inc_cfg: IncentiveConfig, env_t_max: int) -> dict:
        loss, stats = td_loss(
            episodes, self.net, self.mixer, self.target_net, self.target_mixer,
            gamma=self.cfg.gamma, inc_cfg=inc_cfg, memory=memory,
            embedder=embedder, delta=delta, env_t_max=env_t_max)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite TD loss at train step {self.train_steps} "
                f"(mode={inc_cfg.mode})")
        self.optimizer.step(
            nn.collect_grads(self.net.modules() + self.mixer.modules()))
        self.train_steps += 1
        if self.train_steps % self.cfg.target_interval == 0:
            self.sync_targets()
        return stats


def evaluate(env_cfg: genv.GridworldConfig, net: AgentNet,
             rng: np.random.Generator, n_episodes: int,
             return_threshold: float) -> tuple[float, float]:
    wins = 0
    returns = []
    for _ in range(n_episodes):
        ep = rollout(env_cfg, net, rng, greedy=True,
                     return_threshold=return_threshold)
        wins += ep.desirable
        returns.append(ep.episode_return)
    return wins / n_episodes, float(np.mean(returns))


def train_run(env_cfg: genv.GridworldConfig, train_cfg: TrainConfig,
              emb_cfg: EmbeddingConfig, inc_cfg: IncentiveConfig, *,
              capacity: int = 100_000, delta: float = 0.0, seed: int = 0):
    """Full training loop for one seed. Returns metrics rows plus the final
    nets, embedder, and memory for checkpointing.

    The episodic memory is maintained for every incentive mode except "none"
    (the plain-TD baseline skips it entirely; with mode e3b the memory only
    feeds embedder training)."""
    rng = np.random.default_rng(seed)
    start = time.monotonic()
    embedder = make_embedder(emb_cfg, env_cfg.state_dim, rng)
    uses_memory = inc_cfg.mode != "none"
    memory = (EpisodicBuffer(capacity, emb_cfg.embed_dim, env_cfg.state_dim)
              if uses_memory else None)
    replay = ReplayBuffer(train_cfg.replay_capacity)
    learner = Learner(env_cfg, train_cfg, rng)
    e3b_state = (E3BState(emb_cfg.embed_dim, inc_cfg.lambda_e3b)
                 if inc_cfg.mode == "e3b" else None)

    metrics = []
    window_rp = []
    window_loss = []
    emb_loss = 0.0
    env_steps = 0
    next_eval = 0
    last_emb_train = 0

    def emit(nominal_step: int) -> None:
        eval_rng = np.random.default_rng(rng.integers(2 ** 63))
        win, ret = evaluate(env_cfg, learner.net, eval_rng,
                            train_cfg.eval_episodes,
                            train_cfg.return_threshold)
        metrics.append({
            "env_steps": nominal_step,
            "test_win_rate": win,
            "mean_test_return": ret,
            "mean_rp": float(np.mean(window_rp)) if window_rp else 0.0,
            "buffer_size": len(memory) if memory is not None else 0,
            "embedder_loss": emb_loss,
            "wall_clock_s": time.monotonic() - start,
        })
        window_rp.clear()
        window_loss.clear()

    eps_fn = lambda step: epsilon_at(step, train_cfg)
    while env_steps < train_cfg.total_steps:
        ep = rollout(env_cfg, learner.net, rng, eps_fn=eps_fn,
                     start_step=env_steps,
                     return_threshold=train_cfg.return_threshold,
                     embedder=embedder, e3b_state=e3b_state)
        env_steps += len(ep)
        if memory is not None:
            memory.construct_from_trajectory(
                ep.states, ep.rewards, ep.desirable, delta, train_cfg.gamma,
                embedder, env_cfg.t_max)
        replay.append(ep)
        if len(replay) >= train_cfg.batch_episodes:
            for _ in range(train_cfg.n_circle):
                batch = replay.sample(rng, train_cfg.batch_episodes)
                stats = learner.train_batch(
                    batch, memory=memory, embedder=embedder, delta=delta,
                    inc_cfg=inc_cfg, env_t_max=env_cfg.t_max)
                window_rp.append(stats["mean_rp"])
                window_loss.append(stats["loss"])
        if (embedder.trainable and memory is not None
                and env_steps - last_emb_train >= emb_cfg.t_emb):
            losses = train_embedder(embedder, memory, emb_cfg, rng)
            if losses:
                emb_loss = float(np.mean(losses))
            memory.rekey_all(embedder)
            last_emb_train = env_steps
        while next_eval <= min(env_steps, train_cfg.total_steps):
            emit(next_eval)
            next_eval += train_cfg.eval_interval

    return {
        "metrics": metrics,
        "net": learner.net,
        "mixer": learner.mixer,
        "embedder": embedder,
        "memory": memory,
        "train_steps": learner.train_steps,
        "env_steps": env_steps,
    }
