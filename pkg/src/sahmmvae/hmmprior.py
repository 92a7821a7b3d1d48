"""Source-wise HMM priors over latent trajectories.

Layout conventions used throughout:

* a latent sample ``S`` is ``(T, n)``: time by source;
* state parameters are ``(n, K)`` (transition logits ``(n, K, K)``, flow
  layer parameters ``(L, n, K)``), so source ``j`` owns row ``j`` only;
* local scores are ``(T, n, K)``: the log-density of ``s[t, j]`` under
  state ``k`` of source ``j`` given the previous value where relevant.

State labels are 0-based inside this module except for :func:`viterbi`,
which returns 1-based labels to match episode files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import flows

LOG_2PI = float(np.log(2.0 * np.pi))

BRANCH_PARAMS = {
    1: ("means", "log_vars"),
    2: ("init_means", "init_log_vars", "ar_means", "ar_coefs", "log_innov_vars"),
    3: ("init_means", "init_log_vars", "ar_coefs", "log_scales", "flow_gamma", "flow_tau"),
}


def gaussian_logpdf(x, mean, log_var) -> dc.Tensor:
    return -0.5 * (dc.square(x - mean) * dc.exp(-dc.as_tensor(log_var)) + LOG_2PI + log_var)


def _expand_states(x: dc.Tensor, K: int) -> dc.Tensor:
    T, n = x.shape
    return dc.broadcast_to(x.reshape(T, n, 1), (T, n, K))


def branch1_scores(S, means, log_vars) -> dc.Tensor:
    """Gaussian emission scores, ``(T, n, K)``."""
    S = dc.as_tensor(S)
    K = dc.as_tensor(means).shape[-1]
    return gaussian_logpdf(_expand_states(S, K), means, log_vars)


def branch2_scores(S, init_means, init_log_vars, ar_means, ar_coefs, log_innov_vars) -> dc.Tensor:
    """Markov-switching AR(1) scores; row 0 uses the initial Gaussian."""
    S = dc.as_tensor(S)
    K = dc.as_tensor(init_means).shape[-1]
    first = gaussian_logpdf(_expand_states(S[0:1], K), init_means, init_log_vars)
    if S.shape[0] == 1:
        return first
    prev = _expand_states(S[:-1], K)
    cur = _expand_states(S[1:], K)
    mean = ar_means + ar_coefs * (prev - ar_means)
    rest = gaussian_logpdf(cur, mean, log_innov_vars)
    return dc.concat([first, rest], axis=0)


def branch3_scores(S, init_means, init_log_vars, ar_coefs, log_scales, flow_gamma, flow_tau) -> dc.Tensor:
    """State-flow scores: AR residual, scaled, pulled back through the flow.

    ``flow_gamma`` and ``flow_tau`` are ``(L, n, K)``.
    """
    S = dc.as_tensor(S)
    flow_gamma, flow_tau = dc.as_tensor(flow_gamma), dc.as_tensor(flow_tau)
    K = dc.as_tensor(init_means).shape[-1]
    first = gaussian_logpdf(_expand_states(S[0:1], K), init_means, init_log_vars)
    if S.shape[0] == 1:
        return first
    prev = _expand_states(S[:-1], K)
    cur = _expand_states(S[1:], K)
    u = (cur - ar_coefs * prev) * dc.exp(-dc.as_tensor(log_scales))
    layers = [(flow_gamma[i], flow_tau[i]) for i in range(flow_gamma.shape[0])]
    eps, logdet = flows.inverse_with_logdet(u, layers)
    rest = -0.5 * (dc.square(eps) + LOG_2PI) + logdet - log_scales
    return dc.concat([first, rest], axis=0)


_SCORERS = {1: branch1_scores, 2: branch2_scores, 3: branch3_scores}


# ------------------------------------------------------------ forward recursion


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.exp(x - m).sum(axis=axis))


def _forward(local: np.ndarray, log_pi: np.ndarray, log_A: np.ndarray) -> np.ndarray:
    """Log-domain alphas for ``local`` (T, n, K); returns (T, n, K)."""
    T = local.shape[0]
    alpha = np.empty_like(local)
    alpha[0] = log_pi + local[0]
    for t in range(1, T):
        alpha[t] = local[t] + _lse(alpha[t - 1][:, :, None] + log_A, axis=1)
    return alpha


def _backward(local: np.ndarray, log_A: np.ndarray) -> np.ndarray:
    T = local.shape[0]
    beta = np.zeros_like(local)
    for t in range(T - 2, -1, -1):
        beta[t] = _lse(log_A + (local[t + 1] + beta[t + 1])[:, None, :], axis=2)
    return beta


def _posteriors(local, log_pi, log_A):
    """Return (log_z (n,), gamma (T,n,K), expected transition counts (n,K,K))."""
    alpha = _forward(local, log_pi, log_A)
    log_z = _lse(alpha[-1], axis=-1)
    beta = _backward(local, log_A)
    gamma = np.exp(alpha + beta - log_z[:, None])
    if local.shape[0] > 1:
        log_xi = (alpha[:-1, :, :, None] + log_A[None]
                  + (local[1:] + beta[1:])[:, :, None, :] - log_z[None, :, None, None])
        counts = np.exp(log_xi).sum(axis=0)
    else:
        counts = np.zeros_like(log_A)
    return log_z, gamma, counts


def hmm_log_marginal(local, log_pi, log_A) -> dc.Tensor:
    """log Σ_paths p(path, s) per source, as a single differentiable op.

    The backward rule uses the posterior identities: the derivative with
    respect to a local score is the state marginal, with respect to
    ``log_pi`` the first-step marginal, and with respect to ``log_A`` the
    expected transition count.
    """
    local, log_pi, log_A = dc.as_tensor(local), dc.as_tensor(log_pi), dc.as_tensor(log_A)
    lv, pv, av = local.value, log_pi.value, log_A.value
    if lv.ndim != 3 or pv.shape != lv.shape[1:] or av.shape != lv.shape[1:] + lv.shape[2:]:
        raise dc.ShapeError(f"inconsistent shapes {lv.shape}, {pv.shape}, {av.shape}")
    needs_grad = dc._active_tape() is not None and (
        local.requires_grad or log_pi.requires_grad or log_A.requires_grad)
    if not needs_grad:
        return dc.Tensor(_lse(_forward(lv, pv, av)[-1], axis=-1))
    log_z, gamma, counts = _posteriors(lv, pv, av)

    def vjp(g):
        return (g[None, :, None] * gamma, g[:, None] * gamma[0], g[:, None, None] * counts)

    return dc.custom_op(log_z, (local, log_pi, log_A), vjp)


def _with_source_axis(local, init_logits, trans_logits):
    local, init_logits, trans_logits = map(dc.as_tensor, (local, init_logits, trans_logits))
    if local.ndim == 2:
        T, K = local.shape
        return (local.reshape(T, 1, K), init_logits.reshape(1, K),
                trans_logits.reshape(1, K, K), True)
    return local, init_logits, trans_logits, False


def forward_log_likelihood(local, init_logits, trans_logits) -> dc.Tensor:
    """Marginal log-likelihood of each source trajectory.

    ``local`` is (T, n, K) with logits (n, K) and (n, K, K), giving an (n,)
    result; a single source may be passed as (T, K), (K,), (K, K), giving a
    scalar.
    """
    local, init_logits, trans_logits, single = _with_source_axis(local, init_logits, trans_logits)
    out = hmm_log_marginal(local, dc.log_softmax(init_logits, axis=-1),
                           dc.log_softmax(trans_logits, axis=-1))
    return out.reshape(()) if single else out


def forward_log_likelihood_composed(local, init_logits, trans_logits) -> dc.Tensor:
    """Same quantity built step by step from elementary tape operations.

    Slower; kept as an independent route for checking the fused op.
    """
    local, init_logits, trans_logits, single = _with_source_axis(local, init_logits, trans_logits)
    log_pi = dc.log_softmax(init_logits, axis=-1)
    log_A = dc.log_softmax(trans_logits, axis=-1)
    T, n, K = local.shape
    alpha = log_pi + local[0]
    for t in range(1, T):
        prev = dc.broadcast_to(alpha.reshape(n, K, 1), (n, K, K))
        alpha = local[t] + dc.log_sum_exp(prev + log_A, axis=1)
    out = dc.log_sum_exp(alpha, axis=-1)
    return out.reshape(()) if single else out


# ------------------------------------------------------------ decoding


def _log_probs(init_logits, trans_logits):
    init_logits = np.asarray(init_logits, dtype=float)
    trans_logits = np.asarray(trans_logits, dtype=float)
    log_pi = init_logits - _lse(init_logits[None], axis=1)[0]
    log_A = trans_logits - _lse(trans_logits, axis=1)[:, None]
    return log_pi, log_A


def viterbi(local, init_logits, trans_logits) -> np.ndarray:
    """Most probable state path for one source; 1-based labels.

    Ties go to the lower state index.
    """
    local = np.asarray(local, dtype=float)
    log_pi, log_A = _log_probs(init_logits, trans_logits)
    T, K = local.shape
    delta = log_pi + local[0]
    back = np.zeros((T, K), dtype=int)
    for t in range(1, T):
        cand = delta[:, None] + log_A
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(K)] + local[t]
    path = np.empty(T, dtype=int)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path + 1


def path_log_score(path, local, init_logits, trans_logits) -> float:
    """log π_{c1} + Σ log A + Σ ℓ for a 1-based ``path``."""
    local = np.asarray(local, dtype=float)
    log_pi, log_A = _log_probs(init_logits, trans_logits)
    c = np.asarray(path) - 1
    return float(log_pi[c[0]] + log_A[c[:-1], c[1:]].sum() + local[np.arange(len(c)), c].sum())


def forward_backward(local, init_logits, trans_logits) -> np.ndarray:
    """Posterior state marginals p(c_t = k | s) for one source, (T, K)."""
    local = np.asarray(local, dtype=float)
    log_pi, log_A = _log_probs(init_logits, trans_logits)
    _, gamma, _ = _posteriors(local[:, None, :], log_pi[None], log_A[None])
    gamma = gamma[:, 0, :]
    return gamma / gamma.sum(axis=1, keepdims=True)


# ------------------------------------------------------------ parameters


def _softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class HmmPriorParams:
    """Trainable parameters of the source-wise prior for one branch.

    ``tensors`` maps names to leaf Tensors: always ``init_logits`` (n, K)
    and ``trans_logits`` (n, K, K), plus the branch payload listed in
    :data:`BRANCH_PARAMS`.  Variances and scales are stored as logs.
    """

    branch: int
    tensors: dict

    @property
    def n(self) -> int:
        return self.tensors["init_logits"].shape[0]

    @property
    def K(self) -> int:
        return self.tensors["init_logits"].shape[1]

    @classmethod
    def initialize(cls, branch: int, n: int, K: int, rng: np.random.Generator,
                   flow_layers: int = 1) -> "HmmPriorParams":
        if branch not in BRANCH_PARAMS:
            raise ValueError(f"branch must be 1, 2 or 3, got {branch}")
        spread = np.tile(np.linspace(-1.0, 1.0, K) if K > 1 else np.zeros(1), (n, 1))
        half = np.full((n, K), np.log(0.5))
        zeros = np.zeros((n, K))
        values = {
            "init_logits": rng.normal(0.0, 0.1, (n, K)),
            "trans_logits": rng.normal(0.0, 0.1, (n, K, K)) + 2.0 * np.eye(K),
        }
        if branch == 1:
            values.update(means=spread, log_vars=half)
        elif branch == 2:
            values.update(init_means=spread, init_log_vars=half, ar_means=spread,
                          ar_coefs=zeros, log_innov_vars=half)
        else:
            values.update(init_means=spread, init_log_vars=half, ar_coefs=zeros,
                          log_scales=0.5 * half,
                          flow_gamma=np.zeros((flow_layers, n, K)),
                          flow_tau=np.broadcast_to(flows.tau_from_delta(1.0),
                                                   (flow_layers, n, K)).copy())
        return cls(branch, {k: dc.Tensor(v, requires_grad=True, name=k) for k, v in values.items()})

    @classmethod
    def from_arrays(cls, branch: int, arrays: dict) -> "HmmPriorParams":
        names = ("init_logits", "trans_logits") + BRANCH_PARAMS[branch]
        missing = [k for k in names if k not in arrays]
        if missing:
            raise ValueError(f"missing prior parameters: {missing}")
        return cls(branch, {k: dc.Tensor(arrays[k], requires_grad=True, name=k) for k in names})

    def payload(self) -> list:
        return [self.tensors[k] for k in BRANCH_PARAMS[self.branch]]

    def local_scores(self, S) -> dc.Tensor:
        return _SCORERS[self.branch](S, *self.payload())

    def log_prob_per_source(self, S) -> dc.Tensor:
        return forward_log_likelihood(self.local_scores(S), self.tensors["init_logits"],
                                      self.tensors["trans_logits"])

    def log_prob(self, S) -> dc.Tensor:
        return self.log_prob_per_source(S).sum()

    def initial_distribution(self) -> np.ndarray:
        return _softmax(self.tensors["init_logits"].value)

    def transition_matrices(self) -> np.ndarray:
        return _softmax(self.tensors["trans_logits"].value)

    def viterbi_paths(self, S) -> np.ndarray:
        """Decoded (T, n) state paths, 1-based."""
        with dc.no_grad():
            local = self.local_scores(np.asarray(S, dtype=float)).value
        init = self.tensors["init_logits"].value
        trans = self.tensors["trans_logits"].value
        return np.stack([viterbi(local[:, j], init[j], trans[j]) for j in range(self.n)], axis=1)

    def snapshot(self) -> list[dict]:
        """Per-source parameters in natural units (probabilities, variances)."""
        t = {k: v.value for k, v in self.tensors.items()}
        pi, A = self.initial_distribution(), self.transition_matrices()
        out = []
        for j in range(self.n):
            rec = {"source": j + 1, "pi": pi[j].tolist(), "A": A[j].tolist()}
            if self.branch == 1:
                rec.update(means=t["means"][j].tolist(), variances=np.exp(t["log_vars"][j]).tolist())
            elif self.branch == 2:
                rec.update(init_means=t["init_means"][j].tolist(),
                           init_variances=np.exp(t["init_log_vars"][j]).tolist(),
                           ar_means=t["ar_means"][j].tolist(),
                           ar_coefs=t["ar_coefs"][j].tolist(),
                           innov_variances=np.exp(t["log_innov_vars"][j]).tolist())
            else:
                tau = t["flow_tau"][:, j, :]
                delta = np.maximum(tau, 0) + np.log1p(np.exp(-np.abs(tau))) + flows.DELTA_FLOOR
                rec.update(init_means=t["init_means"][j].tolist(),
                           init_variances=np.exp(t["init_log_vars"][j]).tolist(),
                           ar_coefs=t["ar_coefs"][j].tolist(),
                           scales=np.exp(t["log_scales"][j]).tolist(),
                           flow_gamma=t["flow_gamma"][:, j, :].T.tolist(),
                           flow_delta=delta.T.tolist())
            out.append(rec)
        return out


def total_prior_logp(S, params: HmmPriorParams) -> dc.Tensor:
    """Σ_j log p(s_{:, j}) under each source's own chain."""
    return params.log_prob(S)
