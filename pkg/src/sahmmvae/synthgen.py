"""Synthetic regime-switching sources, mixing maps and episode files.

All randomness comes from ``numpy.random.Generator(Philox)``: Philox is a
counter-based 64-bit generator whose streams numpy defines bit-for-bit, so
an episode is reproducible from ``(specs, seed)`` on any platform.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flows import FlowParams, flow_forward

KINDS = ("gaussian-emission", "msar", "state-flow")

_REQUIRED = {
    "gaussian-emission": ("means", "variances"),
    "msar": ("init_means", "init_variances", "means", "ar_coefs", "innov_variances"),
    "state-flow": ("init_means", "init_variances", "ar_coefs", "scales", "flow_gamma", "flow_delta"),
}
_POSITIVE = ("variances", "init_variances", "innov_variances", "scales", "flow_delta")


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class SourceSpec:
    """Ground-truth switching process for one source.

    ``params`` holds length-K arrays per kind (see ``_REQUIRED``); the
    state-flow kind also takes ``flow_gamma``/``flow_delta`` of shape (K, L).
    """

    kind: str
    initial: np.ndarray
    transition: np.ndarray
    params: dict

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        self.initial = np.asarray(self.initial, dtype=float)
        self.transition = np.atleast_2d(np.asarray(self.transition, dtype=float))
        K = self.initial.size
        if self.initial.ndim != 1 or K < 1:
            raise ValueError("initial distribution must be a non-empty vector")
        if self.transition.shape != (K, K):
            raise ValueError(f"transition matrix must be {K}x{K}")
        for name, p in (("initial distribution", self.initial[None]), ("transition", self.transition)):
            if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-12):
                raise ValueError(f"{name} rows must be non-negative and sum to 1")
        missing = [k for k in _REQUIRED[self.kind] if k not in self.params]
        if missing:
            raise ValueError(f"{self.kind} source missing parameters {missing}")
        params = {}
        for name in _REQUIRED[self.kind]:
            arr = np.asarray(self.params[name], dtype=float)
            if name.startswith("flow_"):
                arr = arr.reshape(K, -1)
            elif arr.shape != (K,):
                raise ValueError(f"{name} must have length {K}")
            if name in _POSITIVE and np.any(arr <= 0):
                raise ValueError(f"{name} must be strictly positive")
            params[name] = arr
        if "ar_coefs" in params and np.any(np.abs(params["ar_coefs"]) >= 1):
            raise ValueError("AR coefficients must lie strictly inside (-1, 1)")
        if self.kind == "state-flow" and params["flow_gamma"].shape != params["flow_delta"].shape:
            raise ValueError("flow_gamma and flow_delta must have the same shape")
        self.params = params

    @property
    def K(self) -> int:
        return self.initial.size

    def flow(self, k: int) -> FlowParams:
        return FlowParams.from_delta(self.params["flow_gamma"][k], self.params["flow_delta"][k])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "initial": self.initial.tolist(),
                "transition": self.transition.tolist(),
                "params": {k: v.tolist() for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "SourceSpec":
        return cls(d["kind"], d["initial"], d["transition"], dict(d["params"]))


@dataclass
class MixingSpec:
    """Ground-truth mixing map ``y = g(s) + noise``.

    ``linear`` uses ``matrix`` (m, n).  ``mlp`` uses one tanh hidden layer:
    ``y = W2 tanh(W1 s + b1) + b2`` with weights in ``weights``.
    """

    kind: str
    matrix: np.ndarray | None = None
    weights: dict = field(default_factory=dict)
    noise_std: float = 0.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.kind == "linear":
            self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
            m, n = self.matrix.shape
            if m < n:
                raise ValueError("underdetermined mixing (m < n) is not supported")
            if np.linalg.svd(self.matrix, compute_uv=False).min() <= 1e-6:
                raise ValueError("mixing matrix is rank deficient")
        elif self.kind == "mlp":
            self.weights = {k: np.asarray(v, dtype=float) for k, v in self.weights.items()}
            if set(self.weights) != {"W1", "b1", "W2", "b2"}:
                raise ValueError("mlp mixing needs W1, b1, W2, b2")
        else:
            raise ValueError(f"unknown mixing kind {self.kind!r}")

    @classmethod
    def random_mlp(cls, n: int, m: int, seed: int, noise_std: float = 0.0,
                   hidden: int = 16) -> "MixingSpec":
        rng = make_rng(seed)
        w = {"W1": rng.normal(0.0, 1.0 / np.sqrt(n), (hidden, n)),
             "b1": rng.normal(0.0, 0.1, hidden),
             "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), (m, hidden)),
             "b2": np.zeros(m)}
        return cls("mlp", weights=w, noise_std=noise_std)

    @property
    def n(self) -> int:
        return self.matrix.shape[1] if self.kind == "linear" else self.weights["W1"].shape[1]

    @property
    def m(self) -> int:
        return self.matrix.shape[0] if self.kind == "linear" else self.weights["W2"].shape[0]

    def apply(self, sources: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return sources @ self.matrix.T
        w = self.weights
        return np.tanh(sources @ w["W1"].T + w["b1"]) @ w["W2"].T + w["b2"]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "noise_std": self.noise_std}
        if self.kind == "linear":
            d["matrix"] = self.matrix.tolist()
        else:
            d["weights"] = {k: v.tolist() for k, v in self.weights.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MixingSpec":
        return cls(d["kind"], matrix=d.get("matrix"), weights=d.get("weights", {}),
                   noise_std=float(d.get("noise_std", 0.0)))


@dataclass
class EpisodeData:
    """One synthetic experiment: truth, hidden paths (1-based) and mixtures."""

    sources: np.ndarray
    states: np.ndarray
    observations: np.ndarray
    source_specs: list
    mixing: MixingSpec
    seed: int

    @property
    def T(self) -> int:
        return self.sources.shape[0]

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "seed": self.seed,
            "source_specs": [s.to_dict() for s in self.source_specs],
            "mixing": self.mixing.to_dict(),
            "sources": self.sources.tolist(),
            "states": self.states.tolist(),
            "observations": self.observations.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeData":
        ep = cls(
            sources=np.asarray(d["sources"], dtype=float).reshape(d["T"], -1),
            states=np.asarray(d["states"], dtype=int).reshape(d["T"], -1),
            observations=np.asarray(d["observations"], dtype=float).reshape(d["T"], -1),
            source_specs=[SourceSpec.from_dict(s) for s in d["source_specs"]],
            mixing=MixingSpec.from_dict(d["mixing"]),
            seed=int(d["seed"]),
        )
        if ep.states.min() < 1 or any(ep.states[:, j].max() > s.K for j, s in enumerate(ep.source_specs)):
            raise ValueError("state labels out of range")
        return ep

    def digest(self) -> str:
        """SHA-256 of the canonical episode file contents."""
        return hashlib.sha256(dumps_episode(self).encode()).hexdigest()


def dumps_episode(ep: EpisodeData) -> str:
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps(ep.to_dict(), sort_keys=True)


def save_episode(ep: EpisodeData, path) -> None:
    Path(path).write_text(dumps_episode(ep))


def load_episode(path) -> EpisodeData:
    return EpisodeData.from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------ sampling


def sample_state_path(spec: SourceSpec, T: int, rng: np.random.Generator) -> np.ndarray:
    """Markov chain path of length T with 1-based labels."""
    if T < 1:
        raise ValueError("T must be >= 1")
    K = spec.K
    u = rng.random(T)
    cum_pi = np.cumsum(spec.initial)
    cum_A = np.cumsum(spec.transition, axis=1)
    path = np.empty(T, dtype=int)
    path[0] = min(int(np.searchsorted(cum_pi, u[0], side="right")), K - 1)
    for t in range(1, T):
        path[t] = min(int(np.searchsorted(cum_A[path[t - 1]], u[t], side="right")), K - 1)
    return path + 1


def sample_source(spec: SourceSpec, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Trajectory given a 1-based state path."""
    c = np.asarray(states, dtype=int) - 1
    if c.min() < 0 or c.max() >= spec.K:
        raise ValueError("state path contains labels outside 1..K")
    T = c.size
    p = spec.params
    xi = rng.standard_normal(T)
    if spec.kind == "gaussian-emission":
        return p["means"][c] + np.sqrt(p["variances"][c]) * xi

    s = np.empty(T)
    s[0] = p["init_means"][c[0]] + np.sqrt(p["init_variances"][c[0]]) * xi[0]
    if spec.kind == "msar":
        mu, phi, sd = p["means"][c], p["ar_coefs"][c], np.sqrt(p["innov_variances"][c])
        for t in range(1, T):
            s[t] = mu[t] + phi[t] * (s[t - 1] - mu[t]) + sd[t] * xi[t]
        return s

    innov = np.empty(T)
    for k in range(spec.K):
        mask = c == k
        innov[mask] = flow_forward(spec.flow(k), xi[mask])
    a, rho = p["ar_coefs"][c], p["scales"][c]
    for t in range(1, T):
        s[t] = a[t] * s[t - 1] + rho[t] * innov[t]
    return s


def mix(spec: MixingSpec, sources: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    if sources.shape[1] != spec.n:
        raise ValueError(f"mixing expects {spec.n} sources, got {sources.shape[1]}")
    clean = spec.apply(sources)
    noise = rng.standard_normal(clean.shape)
    return clean + spec.noise_std * noise


def make_episode(source_specs, mixing: MixingSpec, T: int, seed: int) -> EpisodeData:
    if len(source_specs) != mixing.n:
        raise ValueError(f"{len(source_specs)} source specs for a mixing map expecting {mixing.n}")
    rng = make_rng(seed)
    states = np.empty((T, len(source_specs)), dtype=int)
    sources = np.empty((T, len(source_specs)))
    for j, spec in enumerate(source_specs):
        states[:, j] = sample_state_path(spec, T, rng)
        sources[:, j] = sample_source(spec, states[:, j], rng)
    return EpisodeData(sources, states, mix(mixing, sources, rng),
                       list(source_specs), mixing, int(seed))


# ------------------------------------------------------------ scenarios


def sticky_transition(K: int, stay: float) -> np.ndarray:
    if K == 1:
        return np.ones((1, 1))
    A = np.full((K, K), (1.0 - stay) / (K - 1))
    np.fill_diagonal(A, stay)
    return A


DEFAULT_MIXING = [[0.8, 0.6], [0.6, -0.8]]


def default_scenario(noise_std: float = 0.01, stay: float = 0.95):
    """Two level-switching sources under a fixed orthogonal linear mix."""
    A = sticky_transition(2, stay)
    pi = np.full(2, 0.5)
    specs = [
        SourceSpec("gaussian-emission", pi, A, {"means": [-1.0, 1.0], "variances": [0.05, 0.05]}),
        SourceSpec("gaussian-emission", pi, A, {"means": [-0.5, 1.5], "variances": [0.1, 0.02]}),
    ]
    return specs, MixingSpec("linear", DEFAULT_MIXING, noise_std=noise_std)


def msar_scenario(noise_std: float = 0.01, stay: float = 0.95):
    """Two MSAR sources whose regimes differ in persistence and level."""
    A = sticky_transition(2, stay)
    pi = np.full(2, 0.5)
    specs = [
        SourceSpec("msar", pi, A, {"init_means": [0.0, 0.0], "init_variances": [1.0, 1.0],
                                   "means": [-1.0, 1.0], "ar_coefs": [0.9, -0.5],
                                   "innov_variances": [0.02, 0.05]}),
        SourceSpec("msar", pi, A, {"init_means": [0.0, 0.0], "init_variances": [1.0, 1.0],
                                   "means": [0.5, -0.5], "ar_coefs": [-0.6, 0.8],
                                   "innov_variances": [0.05, 0.02]}),
    ]
    return specs, MixingSpec("linear", DEFAULT_MIXING, noise_std=noise_std)


def state_flow_spec(stay: float = 0.95) -> SourceSpec:
    """A two-state state-flow source with skewed, differently tailed innovations."""
    return SourceSpec("state-flow", np.full(2, 0.5), sticky_transition(2, stay),
                      {"init_means": [0.0, 0.0], "init_variances": [1.0, 1.0],
                       "ar_coefs": [0.8, -0.3], "scales": [0.3, 0.6],
                       "flow_gamma": [[-0.5], [0.5]], "flow_delta": [[0.7], [1.4]]})


SCENARIOS = {"default": default_scenario, "msar": msar_scenario}
