"""Encoder/decoder VAE with a source-wise HMM prior, and its training loop.

The objective for one reparameterized sample ``S = mu + sigma * eps`` is

    loss = sum_t ||g(s_t) - y_t||^2 + beta * (log q(S | Y) - log p(S))

where ``q`` is a factorized Gaussian with one time-shared variance per
source and ``p`` is the branch-specific prior from :mod:`hmmprior`.
Training is full-sequence: every step sees the whole episode.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .evaluation import match_sources
from .hmmprior import LOG_2PI, HmmPriorParams

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient becomes non-finite.

    ``state`` holds the parameter values at the failing epoch and
    ``report`` the rows logged so far.
    """

    def __init__(self, message, epoch, state, report):
        super().__init__(message)
        self.epoch = epoch
        self.state = state
        self.report = report


# ------------------------------------------------------------ networks


class MLP:
    """Feed-forward map with tanh hidden layers and a linear output layer."""

    def __init__(self, sizes, rng: np.random.Generator, prefix: str):
        self.sizes = list(sizes)
        self.weights, self.biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(dc.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)),
                                          requires_grad=True, name=f"{prefix}.W{i}"))
            self.biases.append(dc.Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.b{i}"))

    def __call__(self, x) -> dc.Tensor:
        h = dc.as_tensor(x)
        if h.shape[-1] != self.sizes[0]:
            raise dc.ShapeError(f"expected {self.sizes[0]} input columns, got {h.shape[-1]}")
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = dc.tanh(h)
        return h

    def parameters(self) -> dict:
        out = {}
        for W, b in zip(self.weights, self.biases):
            out[W.name] = W
            out[b.name] = b
        return out


@dataclass
class TrainConfig:
    branch: int = 1
    K: int = 2
    beta: float = 0.05
    lr: float = 1e-3
    epochs: int = 3000
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    encoder_widths: tuple = (32, 32)
    decoder: str = "linear"
    decoder_width: int = 32
    flow_layers: int = 1
    warmup_fraction: float = 0.1
    init_log_post_var: float = 0.0
    log_every: int = 10

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        self.encoder_widths = tuple(self.encoder_widths)
        if self.branch not in (1, 2, 3):
            raise ValueError("branch must be 1, 2 or 3")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.decoder not in ("linear", "mlp"):
            raise ValueError("decoder must be 'linear' or 'mlp'")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.log_every < 1 or self.flow_layers < 1:
            raise ValueError("log_every and flow_layers must be >= 1")

    def beta_at(self, epoch: int) -> float:
        """Effective prior weight at a 0-based epoch (linear warm-up)."""
        warm = int(round(self.warmup_fraction * self.epochs))
        if warm <= 0 or epoch >= warm:
            return self.beta
        return self.beta * epoch / warm


class SAHMMVAE:
    """Encoder, decoder, posterior log-variances and prior, as leaf Tensors."""

    def __init__(self, m: int, n: int, config: TrainConfig, rng: np.random.Generator):
        self.m, self.n = m, n
        self.encoder = MLP([m, *config.encoder_widths, n], rng, "encoder")
        dec_sizes = [n, m] if config.decoder == "linear" else [n, config.decoder_width, m]
        self.decoder = MLP(dec_sizes, rng, "decoder")
        self.log_post_var = dc.Tensor(np.full(n, config.init_log_post_var),
                                      requires_grad=True, name="log_post_var")
        self.prior = HmmPriorParams.initialize(config.branch, n, config.K, rng,
                                               flow_layers=config.flow_layers)

    def parameters(self) -> dict:
        params = {}
        params.update(self.encoder.parameters())
        params.update(self.decoder.parameters())
        params["log_post_var"] = self.log_post_var
        params.update({f"prior.{k}": v for k, v in self.prior.tensors.items()})
        return params

    def encode(self, Y) -> dc.Tensor:
        return self.encoder(Y)

    def decode(self, S) -> dc.Tensor:
        return self.decoder(S)

    def posterior_means(self, Y) -> np.ndarray:
        with dc.no_grad():
            return self.encode(np.asarray(Y, dtype=float)).value

    def posterior_variances(self) -> np.ndarray:
        return np.exp(self.log_post_var.value)

    def state_dict(self) -> dict:
        return {k: v.value.tolist() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.parameters().items():
            value = np.asarray(state[name], dtype=float)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.value = value


# ------------------------------------------------------------ loss pieces


def encode(encoder: MLP, Y) -> dc.Tensor:
    return encoder(Y)


def sample_latents(mu, log_post_var, eps) -> dc.Tensor:
    """``s = mu + sigma * eps``; ``eps`` is a constant array."""
    mu = dc.as_tensor(mu)
    eps = np.asarray(eps, dtype=float)
    if eps.shape != mu.shape:
        raise dc.ShapeError(f"noise shape {eps.shape} != {mu.shape}")
    return mu + dc.exp(0.5 * dc.as_tensor(log_post_var)) * eps


def reconstruction_loss(Y, Y_hat) -> dc.Tensor:
    Y, Y_hat = dc.as_tensor(Y), dc.as_tensor(Y_hat)
    if Y.shape != Y_hat.shape:
        raise dc.ShapeError(f"shape mismatch {Y.shape} vs {Y_hat.shape}")
    return dc.square(Y_hat - Y).sum()


def posterior_logq(S, mu, log_post_var) -> dc.Tensor:
    lv = dc.as_tensor(log_post_var)
    resid = dc.square(dc.as_tensor(S) - mu) * dc.exp(-lv)
    return (-0.5 * LOG_2PI - 0.5 * lv - 0.5 * resid).sum()


@dataclass
class LossParts:
    total: float
    rec: float
    logq: float
    logp: float
    beta: float


def step_noise(seed: int, epoch: int, shape) -> np.ndarray:
    """Standard normal draws for one training step, keyed on (seed, epoch)."""
    ss = np.random.SeedSequence([int(seed), int(epoch)])
    return np.random.Generator(np.random.Philox(ss)).standard_normal(shape)


def total_loss(model: SAHMMVAE, Y, beta: float, eps) -> tuple[dc.Tensor, LossParts]:
    """Single-sample objective; ``eps`` is the (T, n) reparameterization noise."""
    Y = np.asarray(Y, dtype=float)
    mu = model.encode(Y)
    S = sample_latents(mu, model.log_post_var, eps)
    rec = reconstruction_loss(Y, model.decode(S))
    logq = posterior_logq(S, mu, model.log_post_var)
    logp = model.prior.log_prob(S)
    loss = rec + beta * (logq - logp)
    parts = LossParts(loss.item(), rec.item(), logq.item(), logp.item(), float(beta))
    return loss, parts


# ------------------------------------------------------------ optimizer


class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise dc.ShapeError(f"{name}: gradient shape {g.shape} != {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            m = self.m[name] = self.b1 * m + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.value = p.value - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.asarray(v, dtype=float) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=float) for k, v in state["v"].items()}


# ------------------------------------------------------------ training


@dataclass
class TrainReport:
    """Rows logged during training plus prior snapshots at the same epochs."""

    rows: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    @property
    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.rows])


@dataclass
class TrainState:
    model: SAHMMVAE
    optimizer: Adam
    epoch: int
    losses: list

    def checkpoint(self, config: TrainConfig) -> dict:
        return {"config": asdict(config), "epoch": self.epoch,
                "params": self.model.state_dict(), "optimizer": self.optimizer.state_dict(),
                "losses": list(self.losses)}


def save_checkpoint(path, state: TrainState, config: TrainConfig) -> None:
    Path(path).write_text(json.dumps(state.checkpoint(config)))


def load_checkpoint(path) -> dict:
    return json.loads(Path(path).read_text())


def build_model(m: int, n: int, config: TrainConfig) -> SAHMMVAE:
    return SAHMMVAE(m, n, config, np.random.Generator(np.random.Philox(config.seed)))


def train(episode, config: TrainConfig, *, n_sources: int | None = None,
          resume: dict | None = None, stop_after: int | None = None) -> tuple[TrainState, TrainReport]:
    """Run full-sequence training on ``episode``.

    ``episode`` is an :class:`~sahmmvae.synthgen.EpisodeData` (ground truth
    is then used for logged correlations) or a bare (T, m) array.
    ``resume`` takes a checkpoint dict; ``stop_after`` ends early after that
    many completed epochs, which is how checkpoints are produced mid-run.
    """
    truth = getattr(episode, "sources", None)
    Y = np.asarray(getattr(episode, "observations", episode), dtype=float)
    T, m = Y.shape
    n = n_sources or (truth.shape[1] if truth is not None else m)
    model = build_model(m, n, config)
    opt = Adam(config.lr, config.adam_betas, config.adam_eps)
    start, losses = 0, []
    if resume is not None:
        model.load_state_dict(resume["params"])
        opt.load_state_dict(resume["optimizer"])
        start, losses = int(resume["epoch"]), list(resume.get("losses", []))
    params = model.parameters()
    report = TrainReport()
    end = config.epochs if stop_after is None else min(config.epochs, stop_after)

    for epoch in range(start, end):
        beta = config.beta_at(epoch)
        eps = step_noise(config.seed, epoch, (T, n))
        # overflow surfaces through the finiteness checks below
        with dc.recording() as tape, np.errstate(over="ignore", invalid="ignore"):
            loss, parts = total_loss(model, Y, beta, eps)
        if not math.isfinite(parts.total):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", epoch,
                                   model.state_dict(), report)
        with np.errstate(over="ignore", invalid="ignore"):
            tape.backward(loss)
        grads = {}
        for name, p in params.items():
            g = np.zeros_like(p.value) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for {name} at epoch {epoch}",
                                       epoch, model.state_dict(), report)
            grads[name] = g
            p.grad = None
        losses.append(parts.total)

        if epoch % config.log_every == 0 or epoch == end - 1:
            row = {"epoch": epoch, "total": parts.total, "rec": parts.rec,
                   "logq": parts.logq, "logp": parts.logp, "beta": parts.beta,
                   "post_var": model.posterior_variances().tolist()}
            if truth is not None:
                row["corr"] = match_sources(model.posterior_means(Y), truth).correlations.tolist()
            report.rows.append(row)
            report.snapshots.append({"epoch": epoch, "sources": model.prior.snapshot()})
            log.debug("epoch %d loss %.4f rec %.4f", epoch, parts.total, parts.rec)
        opt.step(params, grads)

    return TrainState(model, opt, end, losses), report
