"""Gaussian-channel upper bound on layer information during the diffusion phase of SGD.

With weights W (out x in) split as W(tau) = W* + dW(tau) about the end of the
drift phase, each output unit i contributes 1/2 log2(1 + A_ii / (lambda_i + c))
where dW dW^T = Q diag(lambda) Q^T, A = Q^T W* W*^T Q and c = sigma_z^2 / sigma_T^2.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .netlab import Dataset, TrainRun, forward

DEFAULT_NOISE_RATIO = 1e-4


def jacobi_eigh(m: np.ndarray, rel_tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigensolver for a real symmetric matrix.

    Returns (eigenvalues ascending, eigenvectors as columns). Stops when the
    off-diagonal Frobenius norm drops below ``rel_tol * ||m||_F``.
    """
    a = np.array(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    target = rel_tol * scale
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise np.linalg.LinAlgError("Jacobi sweeps did not converge")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


@dataclass
class WeightDecomposition:
    """W*(per layer) at the transition and dW(tau) for every later snapshot."""
    transition_iter: int
    w_star: list[np.ndarray]
    delta_w: dict[int, list[np.ndarray]]
    sigma_t2: np.ndarray
    sigma_z2: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.sigma_z2) <= 0):
            raise ValueError("sigma_z2 must be positive")

    @property
    def taus(self) -> list[int]:
        return sorted(self.delta_w)

    @property
    def n_layers(self) -> int:
        return len(self.w_star)

    def weights_at(self, tau: int) -> list[np.ndarray]:
        return [w + d for w, d in zip(self.w_star, self.delta_w[tau])]


def nearest_snapshot(run: TrainRun, iteration: float) -> int:
    """First recorded snapshot at or after ``iteration`` (last one if none)."""
    its = run.snapshot_iterations
    for it in its:
        if it >= iteration:
            return it
    return its[-1]


def decompose_weights(run: TrainRun, transition_iter: int, dataset: Dataset | None = None,
                      noise_ratio: float = DEFAULT_NOISE_RATIO) -> WeightDecomposition:
    """Split every later snapshot into W* + dW(tau), tau = iteration - transition.

    sigma_T^2 per weight layer is the variance of that layer's input
    activations over all dataset inputs at the transition (1.0 without a
    dataset); sigma_z^2 = noise_ratio * sigma_T^2.
    """
    if transition_iter not in run.snapshots:
        raise KeyError(f"iteration {transition_iter} is not a recorded snapshot")
    star = run.snapshots[transition_iter]
    w_star = [w.copy() for w in star.weights]
    delta = {}
    for it in run.snapshot_iterations:
        if it >= transition_iter:
            delta[it - transition_iter] = [w - ws for w, ws in zip(run.snapshots[it].weights, w_star)]
    if dataset is not None:
        acts = [dataset.x] + forward(star, dataset.x, run.spec.activation)[:-1]
        sigma_t2 = np.array([float(np.var(a)) for a in acts])
    else:
        sigma_t2 = np.ones(len(w_star))
    sigma_t2 = np.maximum(sigma_t2, 1e-300)
    return WeightDecomposition(transition_iter, w_star, delta, sigma_t2, noise_ratio * sigma_t2)


@dataclass
class LayerBound:
    bound_bits: float
    exact_bits: float
    a_diag: np.ndarray
    lambdas: np.ndarray


def _align_degenerate(lam: np.ndarray, q: np.ndarray, s: np.ndarray, rel_tol: float = 1e-9) -> np.ndarray:
    """Within each group of tied eigenvalues (the null space of a rank-deficient
    dW dW^T in particular) rotate the basis to diagonalize S = W* W*^T there.

    Any basis of a tied group is an eigenbasis; this one makes the per-direction
    bound tightest and independent of how the eigensolver happened to pick it.
    """
    q = q.copy()
    tol = rel_tol * float(np.max(lam)) if lam.size else 0.0
    start = 0
    for i in range(1, len(lam) + 1):
        if i == len(lam) or lam[i] - lam[i - 1] > tol:
            if i - start > 1:
                sub = q[:, start:i]
                _, r = jacobi_eigh(sub.T @ s @ sub)
                q[:, start:i] = sub @ r
            start = i
    return q


def gaussian_channel_bound(w_star: np.ndarray, delta_w: np.ndarray, noise_ratio: float) -> LayerBound:
    """Hadamard-relaxed bound and the exact log-det ratio it relaxes, in bits."""
    if noise_ratio < 0:
        raise ValueError("noise ratio must be nonnegative")
    lam, q = jacobi_eigh(delta_w @ delta_w.T)
    lam = np.maximum(lam, 0.0)
    q = _align_degenerate(lam, q, w_star @ w_star.T)
    a = q.T @ (w_star @ w_star.T) @ q
    a_diag = np.maximum(np.diag(a).copy(), 0.0)
    denom = lam + noise_ratio
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a_diag > 0, np.log2(1.0 + a_diag / denom), 0.0)
    bound = 0.5 * float(np.sum(terms))
    n = len(lam)
    num = np.linalg.slogdet(a + np.diag(lam) + noise_ratio * np.eye(n))
    den = np.linalg.slogdet(np.diag(lam) + noise_ratio * np.eye(n))
    exact = 0.5 * (num[1] - den[1]) / math.log(2.0) if den[0] > 0 and num[0] > 0 else float("inf")
    return LayerBound(bound, float(exact), a_diag, lam)


def mi_gaussian_bound(dec: WeightDecomposition, tau: int) -> list[LayerBound]:
    """Per weight layer bound (bits) at diffusion time ``tau`` (iterations after the transition)."""
    if tau not in dec.delta_w:
        raise KeyError(f"tau={tau} is not available")
    return [gaussian_channel_bound(w, d, float(z / t))
            for w, d, z, t in zip(dec.w_star, dec.delta_w[tau], dec.sigma_z2, dec.sigma_t2)]


@dataclass
class BoundReport:
    """Bound trajectory per layer over diffusion times, with the informative split."""
    taus: np.ndarray
    bound_bits: np.ndarray          # (n_tau, n_layers)
    n_informative: np.ndarray       # per layer
    r_constant: np.ndarray          # per layer
    layers: list[list[LayerBound]] = field(default_factory=list, repr=False)

    def nonincreasing_fraction(self, layer: int, tol: float = 1e-12) -> float:
        b = self.bound_bits[:, layer]
        d = np.diff(b)
        return float(np.mean(d <= tol)) if d.size else float("nan")

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "tau", "bound_bits", "n_informative", "r_constant"])
            for k in range(self.bound_bits.shape[1]):
                for i, tau in enumerate(self.taus):
                    w.writerow([k + 1, int(tau), repr(float(self.bound_bits[i, k])),
                                int(self.n_informative[k]), repr(float(self.r_constant[k]))])


def bound_report(dec: WeightDecomposition, taus: Sequence[int] | None = None,
                 growth_threshold: float = 2.0) -> BoundReport:
    """Bound at every diffusion time tau > 0.

    Eigen-directions (matched by ascending rank) whose lambda grows by more
    than ``growth_threshold`` between the first and last tau are
    non-informative; R = 1/2 sum over them of A_ii / lambda_i at the first tau.
    """
    taus = [t for t in (dec.taus if taus is None else taus) if t > 0]
    if not taus:
        raise ValueError("need at least one diffusion snapshot after the transition")
    per_tau = [mi_gaussian_bound(dec, t) for t in taus]
    bounds = np.array([[lb.bound_bits for lb in row] for row in per_tau])
    n_inf = np.zeros(dec.n_layers, dtype=np.int64)
    r = np.zeros(dec.n_layers)
    for k in range(dec.n_layers):
        first, last = per_tau[0][k], per_tau[-1][k]
        with np.errstate(divide="ignore", invalid="ignore"):
            growth = np.where(first.lambdas > 0, last.lambdas / first.lambdas, np.inf)
        ni = growth > growth_threshold
        n_inf[k] = int(np.sum(~ni))
        with np.errstate(divide="ignore", invalid="ignore"):
            r[k] = 0.5 * float(np.sum(np.where(ni & (first.lambdas > 0),
                                               first.a_diag / first.lambdas, 0.0)))
    return BoundReport(np.array(taus), bounds, n_inf, r, per_tau)


def compression_time(r_constant: float, delta_i: float, alpha: float) -> float:
    """Relative time (R / dI)^(1/alpha) to compress a representation by dI bits."""
    if r_constant <= 0 or delta_i <= 0:
        raise ValueError("R and delta_i must be positive")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    return (r_constant / delta_i) ** (1.0 / alpha)


@dataclass(frozen=True)
class BoostFit:
    alpha_hat: float
    r2: float
    monotone: bool
    slope: float


def layer_boost_fit(convergence_iters: Mapping[int, float]) -> BoostFit:
    """Fit iterations ~ c K^(-1/alpha) in log-log; ``monotone`` flags strictly decreasing data."""
    ks = np.array(sorted(convergence_iters), dtype=float)
    its = np.array([convergence_iters[int(k)] for k in ks], dtype=float)
    if len(ks) < 3:
        raise ValueError("need at least 3 depths")
    if np.any(its <= 0) or np.any(ks <= 0):
        raise ValueError("depths and iterations must be positive")
    lk, li = np.log(ks), np.log(its)
    slope, c = np.polyfit(lk, li, 1)
    resid = li - (slope * lk + c)
    ss = np.sum((li - li.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    alpha = -1.0 / slope if slope != 0 else float("inf")
    return BoostFit(float(alpha), float(r2), bool(np.all(np.diff(its) < 0)), float(slope))


@dataclass
class CltReport:
    general_position: tuple[float, float]
    projections: np.ndarray          # (n_patterns, 2)
    ks_statistic: tuple[float, float]
    ks_pvalue: tuple[float, float]
    correlation: float
    flagged: bool
    reasons: list[str]


def general_position_ratio(w: np.ndarray) -> float:
    """sum w^4 / (sum w^2)^2; 1/d for a flat vector, 1 for a single spike."""
    w = np.ravel(w)
    s2 = float(np.sum(w * w))
    if s2 == 0:
        raise ValueError("zero-norm direction")
    return float(np.sum(w ** 4) / s2 ** 2)


def clt_diagnostics(w_star: np.ndarray, delta_w: np.ndarray, activations: np.ndarray,
                    ratio_limit: float = 0.1, alpha: float = 0.01) -> CltReport:
    """Checks that the projections of the layer input on w* and dw look like
    independent standard normals. ``activations`` is (n_patterns, d)."""
    t = np.asarray(activations, dtype=float)
    ws, dw = np.ravel(w_star), np.ravel(delta_w)
    if t.ndim != 2 or t.shape[1] != ws.size or dw.size != ws.size:
        raise ValueError("activations must be (n, d) with d matching the weight vectors")
    if t.shape[1] < 64:
        raise ValueError("layer width must be >= 64")
    gp = (general_position_ratio(ws), general_position_ratio(dw))
    tc = t - t.mean(axis=0)
    sd = math.sqrt(float(np.mean(tc ** 2)))
    if sd == 0:
        raise ValueError("activations have zero variance")
    proj = np.column_stack([tc @ ws / (sd * np.linalg.norm(ws)), tc @ dw / (sd * np.linalg.norm(dw))])
    ks = [stats.kstest(proj[:, j], "norm") for j in range(2)]
    corr = float(np.corrcoef(proj[:, 0], proj[:, 1])[0, 1])
    reasons = []
    for name, g in zip(("w*", "dw"), gp):
        if g > ratio_limit:
            reasons.append(f"{name} not in general position (ratio {g:.3g})")
    for name, k in zip(("w*", "dw"), ks):
        if k.pvalue < alpha:
            reasons.append(f"{name} projection rejects normality (p={k.pvalue:.3g})")
    return CltReport(gp, proj, (float(ks[0].statistic), float(ks[1].statistic)),
                     (float(ks[0].pvalue), float(ks[1].pvalue)), corr, bool(reasons), reasons)
