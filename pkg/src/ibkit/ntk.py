"""Infinite-width ensembles: NNGP/NTK kernels, the Gaussian posterior of
gradient-flow training under squared loss, and information quantities
derived from it.

Network parameterization (NTK convention), depth L hidden layers:
h1 = sigma_w W1 x / sqrt(d) + sigma_b b1, h_{l+1} = sigma_w W phi(h_l) / sqrt(n) + sigma_b b,
output f = h_{L+1}. Log-losses are in nats; mutual-information bounds in bits.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

LOG2 = math.log(2.0)
ACTIVATIONS = ("relu", "erf")
RIDGE_COND = 1e12
RIDGE_SCALE = 1e-10


@dataclass(frozen=True)
class ArchSpec:
    depth: int = 3
    activation: str = "relu"
    sigma_w2: float = 1.0
    sigma_b2: float = 0.01

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.sigma_w2 <= 0 or self.sigma_b2 <= 0:
            raise ValueError("variances must be positive")


@dataclass
class KernelPair:
    """NNGP (K) and NTK (Theta) over one point set. Arrays are read-only."""
    nngp: np.ndarray
    ntk: np.ndarray
    n_clipped: int = 0

    def __post_init__(self):
        self.nngp = np.array(self.nngp, dtype=float)
        self.ntk = np.array(self.ntk, dtype=float)
        if self.nngp.shape != self.ntk.shape or self.nngp.ndim != 2 or self.nngp.shape[0] != self.nngp.shape[1]:
            raise ValueError("kernels must be square matrices of equal shape")
        for m in (self.nngp, self.ntk):
            m.flags.writeable = False

    @property
    def n_points(self) -> int:
        return self.nngp.shape[0]

    def block(self, rows, cols) -> "KernelPair":
        rows, cols = np.asarray(rows), np.asarray(cols)
        return KernelPair(self.nngp[np.ix_(rows, cols)], self.ntk[np.ix_(rows, cols)])

    def is_psd(self, rel_tol: float = 1e-8) -> bool:
        for m in (self.nngp, self.ntk):
            if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
                return False
            if np.linalg.eigvalsh(m).min() < -rel_tol * np.trace(m):
                return False
        return True

    def save(self, path) -> None:
        """One JSON header line, then K and Theta as little-endian float64."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"format": "ibkit-kernels", "version": 1, "dtype": "<f8", "n": self.n_points,
                  "order": ["nngp", "ntk"], "n_clipped": int(self.n_clipped)}
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode() + b"\n")
            fh.write(self.nngp.astype("<f8").tobytes())
            fh.write(self.ntk.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "KernelPair":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            data = np.frombuffer(fh.read(), dtype=header["dtype"])
        n = header["n"]
        if data.size != 2 * n * n:
            raise ValueError("kernel file is truncated")
        return cls(data[: n * n].reshape(n, n), data[n * n:].reshape(n, n), header.get("n_clipped", 0))


def _relu_expectations(k11, k22, k12):
    norm = np.sqrt(k11 * k22)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(norm > 0, k12 / norm, 1.0)
    n_clip = int(np.sum((c > 1.0) | (c < -1.0)))
    c = np.clip(c, -1.0, 1.0)
    theta = np.arccos(c)
    k = norm / (2 * np.pi) * (np.sin(theta) + (np.pi - theta) * c)
    kdot = (np.pi - theta) / (2 * np.pi)
    return k, kdot, n_clip


def _erf_expectations(k11, k22, k12):
    a = 1.0 + 2.0 * k11
    b = 1.0 + 2.0 * k22
    arg = 2.0 * k12 / np.sqrt(a * b)
    n_clip = int(np.sum((arg > 1.0) | (arg < -1.0)))
    arg = np.clip(arg, -1.0, 1.0)
    k = 2.0 / np.pi * np.arcsin(arg)
    kdot = 4.0 / np.pi / np.sqrt(np.maximum(a * b - 4.0 * k12 ** 2, 1e-300))
    return k, kdot, n_clip


def compute_kernels(arch: ArchSpec, points: np.ndarray) -> KernelPair:
    """Infinite-width output kernels over ``points`` (rows)."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if x.shape[0] < 1:
        raise ValueError("need at least one point")
    if not np.all(np.isfinite(x)):
        raise ValueError("points must be finite")
    d = x.shape[1]
    k = arch.sigma_b2 + arch.sigma_w2 * (x @ x.T) / d
    theta = k.copy()
    expect = _relu_expectations if arch.activation == "relu" else _erf_expectations
    clipped = 0
    for _ in range(arch.depth):
        diag = np.diag(k)
        e, edot, nc = expect(diag[:, None], diag[None, :], k)
        clipped += nc
        k_next = arch.sigma_b2 + arch.sigma_w2 * e
        theta = k_next + arch.sigma_w2 * edot * theta
        k = k_next
    k = 0.5 * (k + k.T)
    theta = 0.5 * (theta + theta.T)
    return KernelPair(k, theta, clipped)


@dataclass
class EnsemblePosterior:
    """Gaussian law of the ensemble outputs at time tau over a point set.

    ``mu`` is (n_points, n_outputs); ``sigma`` is the (n_points, n_points)
    covariance shared by every output dimension; ``prior_var`` is K(x, x).
    """
    mu: np.ndarray
    sigma: np.ndarray
    tau: float
    prior_var: np.ndarray
    ridge: float = 0.0

    @property
    def n_outputs(self) -> int:
        return self.mu.shape[1]

    @property
    def var(self) -> np.ndarray:
        return np.maximum(np.diag(self.sigma), 0.0)

    def subset(self, idx) -> "EnsemblePosterior":
        idx = np.asarray(idx)
        return EnsemblePosterior(self.mu[idx], self.sigma[np.ix_(idx, idx)], self.tau,
                                 self.prior_var[idx], self.ridge)


def _as_targets(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y[:, None] if y.ndim == 1 else y


class PosteriorEvolution:
    """Eigendecomposition of the train-block NTK, reused across tau.

    Points 0..n_train-1 of ``kernels`` are the training set; the rest are
    evaluation points.
    """

    def __init__(self, kernels: KernelPair, n_train: int, y_train):
        self.kernels = kernels
        self.n_train = int(n_train)
        self.y = _as_targets(y_train)
        if self.y.shape[0] != self.n_train:
            raise ValueError("targets must have one row per training point")
        if not 1 <= self.n_train <= kernels.n_points:
            raise ValueError("n_train out of range")
        tr = slice(0, self.n_train)
        th = np.array(kernels.ntk[tr, tr])
        evals, vecs = np.linalg.eigh(th)
        self.ridge = 0.0
        if evals.min() <= 0 or evals.max() / evals.min() > RIDGE_COND:
            self.ridge = RIDGE_SCALE * float(np.trace(th)) / self.n_train
            evals = evals + self.ridge
        if evals.min() <= 0:
            raise np.linalg.LinAlgError("train NTK is singular even after the ridge")
        self.evals = evals
        self.vecs = vecs
        theta_x = np.array(kernels.ntk[:, tr])
        theta_x[tr] = (vecs * evals) @ vecs.T      # ridged block on training rows
        self._theta_x = theta_x
        self._k_x = np.array(kernels.nngp[:, tr])
        self._k_tr = np.array(kernels.nngp[tr, tr])

    def operator(self, tau: float) -> np.ndarray:
        """M = Theta^-1 (I - exp(-tau Theta)) on the training block."""
        g = self._gain(tau) / self.evals
        return (self.vecs * g) @ self.vecs.T

    def _gain(self, tau: float) -> np.ndarray:
        if tau < 0:
            raise ValueError("tau must be nonnegative")
        if math.isinf(tau):
            return np.ones_like(self.evals)
        return -np.expm1(-tau * self.evals)

    def at(self, tau: float) -> EnsemblePosterior:
        m = self.operator(tau)
        a = self._theta_x @ m                     # Theta(x, X) M
        mu = a @ self.y
        cross = a @ self._k_x.T
        sigma = np.array(self.kernels.nngp) - cross - cross.T + a @ self._k_tr @ a.T
        sigma = 0.5 * (sigma + sigma.T)
        return EnsemblePosterior(mu, sigma, float(tau), np.diag(self.kernels.nngp).copy(), self.ridge)

    def train_spectral(self, tau: float) -> tuple[np.ndarray, np.ndarray]:
        """(Theta eigenvalues, gain 1 - exp(-tau lambda)) on the training block."""
        return self.evals, self._gain(tau)


def posterior(kernels: KernelPair, n_train: int, y_train, tau: float) -> EnsemblePosterior:
    """Mean and covariance of the ensemble at time ``tau`` over all kernel points."""
    return PosteriorEvolution(kernels, n_train, y_train).at(tau)


def _check_dims(post: EnsemblePosterior, y) -> np.ndarray:
    y = _as_targets(y)
    if y.shape != post.mu.shape:
        raise ValueError(f"targets {y.shape} do not match posterior {post.mu.shape}")
    return y


def expected_log_loss(post: EnsemblePosterior, y) -> float:
    """Mean over points of E_z[log N(y; z, I)] (nats), the Gibbs log-likelihood."""
    y = _check_dims(post, y)
    k = post.n_outputs
    per = (-0.5 * np.sum((y - post.mu) ** 2, axis=1) - 0.5 * k * post.var
           - 0.5 * k * math.log(2 * math.pi))
    return float(np.mean(per))


def fitted_log_loss(post: EnsemblePosterior, y) -> tuple[float, np.ndarray]:
    """Gibbs log-likelihood under the best diagonal Gaussian observation
    covariance, Sigma_r = mean residual second moment per output."""
    y = _check_dims(post, y)
    sigma_r = np.mean((y - post.mu) ** 2 + post.var[:, None], axis=0)
    sigma_r = np.maximum(sigma_r, 1e-300)
    k = post.n_outputs
    return float(-0.5 * k - 0.5 * np.sum(np.log(2 * math.pi * sigma_r))), sigma_r


def label_entropy_bits(labels) -> float:
    """Plug-in entropy of empirical label frequencies (rows are labels)."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    _, counts = np.unique(labels, axis=0, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log2(p)))


def izy_lower_bound(post: EnsemblePosterior, y, label_entropy: float | None = None,
                    fit_residual: bool = False) -> float:
    """H(Y) + E[log q(y|z)] in bits. ``label_entropy`` (bits) defaults to the
    empirical label entropy; pass a differential entropy for continuous targets."""
    h = label_entropy_bits(_as_targets(y)) if label_entropy is None else float(label_entropy)
    ell = fitted_log_loss(post, y)[0] if fit_residual else expected_log_loss(post, y)
    return h + ell / LOG2


def _point_logpdf(z: np.ndarray, mu: np.ndarray, var: np.ndarray) -> np.ndarray:
    """log N(z_a; mu_j, var_j I) for all pairs, (len(z), len(mu))."""
    k = mu.shape[1]
    d2 = np.sum(z ** 2, axis=1)[:, None] - 2 * z @ mu.T + np.sum(mu ** 2, axis=1)[None, :]
    d2 = np.maximum(d2, 0.0)
    return -0.5 * d2 / var[None, :] - 0.5 * k * np.log(2 * math.pi * var)[None, :]


def izx_minibatch_bounds(post: EnsemblePosterior, samples: int = 1, batch: int = 1000,
                         rng: np.random.Generator | int | None = 0,
                         min_var: float = 1e-300) -> tuple[float, float]:
    """Multi-sample (lower, upper) bounds in bits on I(Z;X) with
    p(z|x_i) = N(mu_i, sigma_ii I), averaged over consecutive minibatches.

    The lower bound never exceeds log2(batch).
    """
    if batch < 2:
        raise ValueError("batch must be >= 2")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(rng)
    n = post.mu.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    var = np.maximum(post.var, min_var)
    lowers, uppers, weights = [], [], []
    for start in range(0, n, batch):
        idx = np.arange(start, min(start + batch, n))
        if len(idx) < 2:
            continue
        mu, v = post.mu[idx], var[idx]
        nb = len(idx)
        lo = up = 0.0
        for _ in range(samples):
            z = mu + np.sqrt(v)[:, None] * rng.standard_normal(mu.shape)
            lp = _point_logpdf(z, mu, v)
            own = np.diag(lp).copy()
            lo += np.mean(own - (logsumexp(lp, axis=1) - math.log(nb)))
            np.fill_diagonal(lp, -np.inf)
            up += np.mean(own - (logsumexp(lp, axis=1) - math.log(nb - 1)))
        lowers.append(lo / samples)
        uppers.append(up / samples)
        weights.append(nb)
    w = np.asarray(weights, dtype=float)
    return (float(np.average(lowers, weights=w) / LOG2), float(np.average(uppers, weights=w) / LOG2))


def izd_upper_bound(post: EnsemblePosterior, min_var: float = 1e-300) -> float:
    """Mean over points of KL(N(mu, sigma I) || N(0, K(x,x) I)) in bits."""
    kx = post.prior_var
    if np.any(kx <= 0):
        raise ValueError("prior predictive variance must be positive")
    s = np.maximum(post.var, min_var)
    k = post.n_outputs
    kl = (0.5 * k * (s / kx - 1.0 - np.log(s / kx)) + 0.5 * np.sum(post.mu ** 2, axis=1) / kx)
    return float(np.mean(kl) / LOG2)


def fisher_trace(kernels: KernelPair, n_outputs: int = 1) -> float:
    """Tr F = Tr Theta (per output dimension) over the kernel's points."""
    return float(n_outputs * np.trace(kernels.ntk))


def _train_blocks(kernels: KernelPair, y):
    y = _as_targets(y)
    n = y.shape[0]
    if n > kernels.n_points:
        raise ValueError("more targets than kernel points")
    k = np.array(kernels.nngp[:n, :n])
    th = np.array(kernels.ntk[:n, :n])
    evals, vecs = np.linalg.eigh(th)
    return y, k, evals, vecs


def path_length_bound(kernels: KernelPair, y, tau: float) -> float:
    """sqrt(E[L^2]) >= E[L], L the Fisher-metric length of the parameter path
    up to ``tau``; the first len(y) kernel points are the training set."""
    y, k, evals, vecs = _train_blocks(kernels, y)
    evals = np.maximum(evals, 0.0)
    g = evals * (1.0 if math.isinf(tau) else -np.expm1(-2.0 * tau * evals))
    kq = vecs.T @ k @ vecs
    yq = vecs.T @ y
    e_l2 = 0.5 * (y.shape[1] * float(np.sum(np.diag(kq) * g)) + float(np.sum(g[:, None] * yq ** 2)))
    return math.sqrt(max(e_l2, 0.0))


def itheta_d_bound(kernels: KernelPair, y, tau: float) -> float:
    """KL[p(theta|D) || p0(theta)] bound on I(theta; D) in nats:
    Tr(K Theta^-1 (I - e^{-tau Theta})^2) + Y^T Theta^-1 (I - e^{-tau Theta})^2 Y + tau Tr Theta."""
    y, k, evals, vecs = _train_blocks(kernels, y)
    if evals.min() <= 0 or evals.max() / evals.min() > 1e15:
        raise np.linalg.LinAlgError("train NTK is singular")
    if math.isinf(tau):
        return float("inf")
    g = np.expm1(-tau * evals) ** 2 / evals
    kq = vecs.T @ k @ vecs
    yq = vecs.T @ y
    return float(y.shape[1] * np.sum(np.diag(kq) * g) + np.sum(g[:, None] * yq ** 2)
                 + tau * np.sum(evals))


def waic(post: EnsemblePosterior, y) -> float:
    """Mean Bayes minus Gibbs log-likelihood (nats) under N(y; z, I)."""
    y = _check_dims(post, y)
    s = post.var
    k = post.n_outputs
    r2 = np.sum((y - post.mu) ** 2, axis=1)
    per = 0.5 * r2 * s / (1.0 + s) + 0.5 * k * s - 0.5 * k * np.log1p(s)
    return float(np.mean(per))


def default_taus(lo: float = 1e-2, hi: float = 1e10, n: int = 49) -> np.ndarray:
    return np.geomspace(lo, hi, n)


@dataclass
class NtkTrajectory:
    """Information quantities of one architecture over a tau grid."""
    arch: ArchSpec
    taus: np.ndarray
    columns: dict[str, np.ndarray] = field(default_factory=dict)
    ridge: float = 0.0

    FIELDS = ("train_loss", "test_loss", "izx_lower", "izx_upper", "izy", "izd",
              "fisher_trace", "path_length", "itheta_d", "waic")

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["activation", "sigma_w2", "tau", *self.FIELDS])
            for i, tau in enumerate(self.taus):
                w.writerow([self.arch.activation, repr(float(self.arch.sigma_w2)), repr(float(tau)),
                            *[repr(float(self.columns[f][i])) for f in self.FIELDS]])

    def info_plane(self):
        """Same schema as binned information-plane trajectories (one 'layer')."""
        from .infoplane import InfoPlaneTrajectory
        return InfoPlaneTrajectory(np.arange(len(self.taus)), self.columns["izx_lower"][:, None],
                                   self.columns["izy"][:, None])


def ntk_trajectory(arch: ArchSpec, x_train, y_train, x_eval, y_eval,
                   taus: Sequence[float] | None = None, batch: int = 1000, samples: int = 1,
                   label_entropy: float | None = None, seed: int = 0) -> NtkTrajectory:
    """Evaluate every quantity at each tau; information-plane coordinates use the eval set."""
    taus = default_taus() if taus is None else np.asarray(taus, dtype=float)
    y_train, y_eval = _as_targets(y_train), _as_targets(y_eval)
    n_tr = len(y_train)
    kernels = compute_kernels(arch, np.vstack([x_train, x_eval]))
    evo = PosteriorEvolution(kernels, n_tr, y_train)
    ev = np.arange(n_tr, kernels.n_points)
    train_k = kernels.block(np.arange(n_tr), np.arange(n_tr))
    rng = np.random.default_rng(seed)
    cols = {f: np.zeros(len(taus)) for f in NtkTrajectory.FIELDS}
    for i, tau in enumerate(taus):
        post = evo.at(float(tau))
        pe = post.subset(ev)
        cols["train_loss"][i] = -expected_log_loss(post.subset(np.arange(n_tr)), y_train)
        cols["test_loss"][i] = -expected_log_loss(pe, y_eval)
        cols["izx_lower"][i], cols["izx_upper"][i] = izx_minibatch_bounds(pe, samples, batch, rng)
        cols["izy"][i] = izy_lower_bound(pe, y_eval, label_entropy)
        cols["izd"][i] = izd_upper_bound(pe)
        cols["fisher_trace"][i] = fisher_trace(train_k, y_train.shape[1])
        cols["path_length"][i] = path_length_bound(train_k, y_train, float(tau))
        cols["itheta_d"][i] = itheta_d_bound(train_k, y_train, float(tau))
        cols["waic"][i] = waic(pe, y_eval)
    return NtkTrajectory(arch, taus, cols, evo.ridge)
