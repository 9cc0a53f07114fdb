"""State embedders: frozen random projection, return-prediction net, and a
timestep-conditioned autoencoder that predicts best returns and reconstructs
states. Training samples records from the episodic buffer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

EMBED_MODES = ("random", "embnet", "dcae")


@dataclass
class EmbeddingConfig:
    mode: str = "dcae"
    embed_dim: int = 4
    lambda_rcon: float = 0.1
    t_emb: int = 1000          # env steps between training rounds
    n_train: int = 102400      # records sampled per round, capped at buffer size
    batch: int = 1024
    lr: float = 5e-4

    def __post_init__(self):
        if self.mode not in EMBED_MODES:
            raise ValueError(f"unknown embed mode {self.mode!r}")
        if self.embed_dim < 1 or self.lambda_rcon < 0:
            raise ValueError("bad embedding config")
        if self.batch > self.n_train:
            raise ValueError("batch larger than the training sample count")


class RandomProjectionEmbedder:
    """Frozen Gaussian projection, entries N(0, 1/k). Ignores the timestep."""

    trainable = False
    mode = "random"

    def __init__(self, state_dim: int, embed_dim: int, rng: np.random.Generator):
        self.state_dim = state_dim
        self.embed_dim = embed_dim
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(embed_dim),
                                     size=(embed_dim, state_dim))

    def embed(self, states: np.ndarray, t_norm: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if states.shape[1] != self.state_dim:
            raise ValueError("state dimension mismatch")
        return states @ self.projection.T


class ReturnEmbedder:
    """Encoder trained so a decoder can predict the stored best return."""

    trainable = True
    mode = "embnet"

    def __init__(self, state_dim: int, embed_dim: int, rng: np.random.Generator,
                 lr: float = 5e-4):
        self.state_dim = state_dim
        self.embed_dim = embed_dim
        self.encoder = nn.Sequential([
            nn.Dense(state_dim, 64, activation="relu", rng=rng),
            nn.Dense(64, embed_dim, activation="identity", rng=rng),
            nn.LayerNorm(embed_dim),
        ])
        self.decoder = nn.Sequential([
            nn.Dense(embed_dim, 128, activation="relu", rng=rng),
            nn.Dense(128, 128, activation="relu", rng=rng),
            nn.Dense(128, 1, activation="identity", rng=rng),
        ])
        self._modules = [self.encoder, self.decoder]
        self.optimizer = nn.Adam(nn.collect_params(self._modules), lr=lr)

    def embed(self, states: np.ndarray, t_norm: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return self.encoder.forward(states)

    def loss_and_grads(self, states, returns, t_norm) -> float:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        returns = np.asarray(returns, dtype=np.float64).reshape(-1)
        n = states.shape[0]
        nn.zero_grads(self._modules)
        x = self.encoder.forward(states)
        pred = self.decoder.forward(x).reshape(-1)
        err = pred - returns
        loss = float(np.mean(err ** 2))
        d_pred = (2.0 / n) * err
        d_x = self.decoder.backward(d_pred[:, None])
        self.encoder.backward(d_x)
        return loss

    def loss(self, states, returns, t_norm) -> float:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        returns = np.asarray(returns, dtype=np.float64).reshape(-1)
        pred = self.decoder.forward(self.encoder.forward(states)).reshape(-1)
        return float(np.mean((pred - returns) ** 2))


class ConditionalAutoencoderEmbedder:
    """Timestep-conditioned encoder with a return head and a state-
    reconstruction head sharing a decoder trunk."""

    trainable = True
    mode = "dcae"

    def __init__(self, state_dim: int, embed_dim: int, rng: np.random.Generator,
                 lambda_rcon: float = 0.1, lr: float = 5e-4):
        self.state_dim = state_dim
        self.embed_dim = embed_dim
        self.lambda_rcon = lambda_rcon
        self.encoder = nn.Sequential([
            nn.Dense(state_dim + 1, 64, activation="relu", rng=rng),
            nn.Dense(64, 64, activation="relu", rng=rng),
            nn.Dense(64, embed_dim, activation="identity", rng=rng),
        ])
        self.trunk = nn.Sequential([
            nn.Dense(embed_dim + 1, 64, activation="relu", rng=rng),
            nn.Dense(64, 64, activation="relu", rng=rng),
        ])
        self.head_return = nn.Dense(64, 1, activation="identity", rng=rng)
        self.head_state = nn.Dense(64, state_dim, activation="identity", rng=rng)
        self._modules = [self.encoder, self.trunk, self.head_return, self.head_state]
        self.optimizer = nn.Adam(nn.collect_params(self._modules), lr=lr)

    @staticmethod
    def _with_t(arr: np.ndarray, t_norm: np.ndarray) -> np.ndarray:
        t_col = np.asarray(t_norm, dtype=np.float64).reshape(-1, 1)
        if t_col.shape[0] == 1 and arr.shape[0] > 1:
            t_col = np.repeat(t_col, arr.shape[0], axis=0)
        return np.concatenate([arr, t_col], axis=1)

    def embed(self, states: np.ndarray, t_norm: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if states.shape[1] != self.state_dim:
            raise ValueError("state dimension mismatch")
        return self.encoder.forward(self._with_t(states, t_norm))

    def decode(self, x: np.ndarray, t_norm: np.ndarray) -> tuple:
        h = self.trunk.forward(self._with_t(x, t_norm))
        return self.head_return.forward(h).reshape(-1), self.head_state.forward(h)

    def loss(self, states, returns, t_norm) -> float:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        returns = np.asarray(returns, dtype=np.float64).reshape(-1)
        x = self.embed(states, t_norm)
        pred_r, pred_s = self.decode(x, t_norm)
        return float(np.mean((returns - pred_r) ** 2
                             + self.lambda_rcon * np.sum((states - pred_s) ** 2, axis=1)))

    def loss_and_grads(self, states, returns, t_norm) -> float:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        returns = np.asarray(returns, dtype=np.float64).reshape(-1)
        n = states.shape[0]
        nn.zero_grads(self._modules)
        x = self.embed(states, t_norm)
        h = self.trunk.forward(self._with_t(x, t_norm))
        pred_r = self.head_return.forward(h).reshape(-1)
        pred_s = self.head_state.forward(h)
        err_r = pred_r - returns
        err_s = pred_s - states
        loss = float(np.mean(err_r ** 2 + self.lambda_rcon * np.sum(err_s ** 2, axis=1)))
        d_h = self.head_return.backward((2.0 / n) * err_r[:, None])
        d_h += self.head_state.backward((2.0 * self.lambda_rcon / n) * err_s)
        d_xt = self.trunk.backward(d_h)
        # The timestep column is an input, not a parameter; drop its gradient.
        self.encoder.backward(d_xt[:, :-1])
        return loss


def make_embedder(config: EmbeddingConfig, state_dim: int, rng: np.random.Generator):
    if config.mode == "random":
        return RandomProjectionEmbedder(state_dim, config.embed_dim, rng)
    if config.mode == "embnet":
        return ReturnEmbedder(state_dim, config.embed_dim, rng, lr=config.lr)
    return ConditionalAutoencoderEmbedder(state_dim, config.embed_dim, rng,
                                          lambda_rcon=config.lambda_rcon, lr=config.lr)


def embnet_loss(embedder: ReturnEmbedder, states, returns, t_norm) -> float:
    return embedder.loss(states, returns, t_norm)


def dcae_loss(embedder: ConditionalAutoencoderEmbedder, states, returns, t_norm) -> float:
    return embedder.loss(states, returns, t_norm)


def train_embedder(embedder, buffer, config: EmbeddingConfig,
                   rng: np.random.Generator) -> list:
    """One training round: sample from the buffer, run minibatch steps.

    Samples min(n_train, buffer size) records without replacement and makes
    one optimizer step per full minibatch (a single short batch when fewer
    than one batch of records exists). Returns the per-batch losses.
    """
    if not embedder.trainable or len(buffer) == 0:
        return []
    n = min(config.n_train, len(buffer))
    idx = rng.choice(len(buffer), size=n, replace=False)
    states, returns, t_norm = buffer.training_view(idx)
    losses = []
    if n < config.batch:
        spans = [(0, n)]
    else:
        spans = [(b * config.batch, (b + 1) * config.batch)
                 for b in range(n // config.batch)]
    for lo, hi in spans:
        loss = embedder.loss_and_grads(states[lo:hi], returns[lo:hi], t_norm[lo:hi])
        embedder.optimizer.step(nn.collect_grads(embedder._modules))
        losses.append(loss)
    return losses
