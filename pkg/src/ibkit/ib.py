"""Discrete Information Bottleneck: self-consistent iteration, beta sweeps, beta* fits.

The functional minimized is ``I(X;T) - beta * I(T;Y)`` (bits). The encoder
update ``p(t|x) ~ p(t) exp(-beta KL[p(y|x) || p(y|t)])`` uses natural-log KL,
which gives the stationary point of the functional in any log base.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .prob import JointDistribution

LN2 = math.log(2.0)
_LOG_FLOOR = 1e-300

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 5000


class NonConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class IBProblem:
    joint: JointDistribution
    cardinality_t: int | None = None

    def __post_init__(self):
        if not isinstance(self.joint, JointDistribution):
            object.__setattr__(self, "joint", JointDistribution(self.joint))
        if self.cardinality_t is None:
            object.__setattr__(self, "cardinality_t", self.joint.shape[0])
        if self.cardinality_t < 1:
            raise ValueError("cardinality_t must be >= 1")

    @property
    def px(self) -> np.ndarray:
        return self.joint.marginal_x()

    @property
    def pyx(self) -> np.ndarray:
        return self.joint.conditional_y_given_x().rows

    @property
    def i_xy(self) -> float:
        from .prob import mutual_information
        return mutual_information(self.joint)


@dataclass
class IBSolution:
    beta: float
    encoder: np.ndarray      # p(t|x), |X| x |T|
    decoder: np.ndarray      # p(y|t), |T| x |Y|
    marginal_t: np.ndarray   # p(t)
    i_x: float
    i_y: float
    functional: float
    iterations: int = 0
    converged: bool = True
    history: np.ndarray | None = field(default=None, repr=False)

    def occupied(self, tol: float = 1e-3) -> int:
        """Number of distinct reachable clusters; decoders within ``tol`` (L1) count once."""
        reps: list[np.ndarray] = []
        for row in self.decoder[self.marginal_t > 1e-9]:
            if not any(np.abs(row - r).sum() < tol for r in reps):
                reps.append(row)
        return len(reps)


@dataclass
class InfoCurve:
    points: list[tuple[float, float, float]]
    converged: list[bool]
    solutions: list[IBSolution] = field(default_factory=list, repr=False)

    @property
    def betas(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def i_x(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @property
    def i_y(self) -> np.ndarray:
        return np.array([p[2] for p in self.points])

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["beta", "i_x_bits", "i_y_bits", "converged"])
            for (b, ix, iy), ok in zip(self.points, self.converged):
                w.writerow([repr(float(b)), repr(float(ix)), repr(float(iy)), int(ok)])

    @classmethod
    def from_csv(cls, path) -> "InfoCurve":
        pts, conv = [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                pts.append((float(row["beta"]), float(row["i_x_bits"]), float(row["i_y_bits"])))
                conv.append(bool(int(row["converged"])))
        return cls(pts, conv)


# ---------------------------------------------------------------------------
# core numerics
# ---------------------------------------------------------------------------

def _neg_h_rows(pyx: np.ndarray) -> np.ndarray:
    """sum_y p(y|x) ln p(y|x) per row."""
    out = np.zeros(pyx.shape[0])
    nz = pyx > 0
    vals = np.where(nz, pyx * np.log(np.where(nz, pyx, 1.0)), 0.0)
    out[:] = vals.sum(axis=1)
    return out


def _consistent(px, pyx, enc):
    pt = px @ enc
    joint_xt = px[:, None] * enc
    safe = np.where(pt > 0, pt, 1.0)
    dec = (joint_xt.T @ pyx) / safe[:, None]
    dec[pt <= 0] = px @ pyx
    return pt, dec


def _info(px, pyx, enc, pt, dec):
    """(I(X;T), I(T;Y)) in bits for a consistent triple."""
    jxt = px[:, None] * enc
    nz = jxt > 0
    ratio = np.where(nz, enc / np.where(pt > 0, pt, 1.0)[None, :], 1.0)
    ixt = np.sum(np.where(nz, jxt * np.log(ratio), 0.0))
    py = px @ pyx
    jty = pt[:, None] * dec
    nz = jty > 0
    ratio = np.where(nz, dec / np.where(py > 0, py, 1.0)[None, :], 1.0)
    ity = np.sum(np.where(nz, jty * np.log(ratio), 0.0))
    return max(ixt, 0.0) / LN2, max(ity, 0.0) / LN2


def _kl_matrix(pyx, neg_h, dec):
    """D[x, t] = KL[p(y|x) || p(y|t)] in nats."""
    return neg_h[:, None] - pyx @ np.log(np.maximum(dec, _LOG_FLOOR)).T


def ib_encoder_from_decoder(pyx, marginal_t, decoder, beta, neg_h=None, log=False):
    """Encoder given by the first IB equation for a fixed marginal and decoder.

    Computed in the log domain with per-row max subtraction so large ``beta``
    never underflows a whole row.
    """
    if neg_h is None:
        neg_h = _neg_h_rows(pyx)
    with np.errstate(divide="ignore"):
        logits = np.log(marginal_t)[None, :] - beta * _kl_matrix(pyx, neg_h, decoder)
    m = logits.max(axis=1, keepdims=True)
    logits = logits - m
    logz = np.log(np.exp(logits).sum(axis=1, keepdims=True))
    log_enc = logits - logz
    return log_enc if log else np.exp(log_enc)


def _solution(problem: IBProblem, beta, enc, iterations=0, converged=True, history=None):
    px, pyx = problem.px, problem.pyx
    pt, dec = _consistent(px, pyx, enc)
    ix, iy = _info(px, pyx, enc, pt, dec)
    return IBSolution(float(beta), enc, dec, pt, ix, iy, ix - beta * iy,
                      iterations, converged, history)


def random_encoder(n_x: int, n_t: int, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(n_t), size=n_x)


def resolved_encoder(n_x: int, n_t: int, rng: np.random.Generator, mix: float = 0.1) -> np.ndarray:
    """Random start that keeps inputs apart: a random (injective when |T| >= |X|)
    hard assignment blended with Dirichlet noise. The iteration then only has
    to merge clusters, which it does readily, instead of splitting them."""
    if n_t >= n_x:
        assign = rng.permutation(n_t)[:n_x]
    else:
        assign = rng.integers(n_t, size=n_x)
    hard = np.zeros((n_x, n_t))
    hard[np.arange(n_x), assign] = 1.0
    return (1.0 - mix) * hard + mix * random_encoder(n_x, n_t, rng)


def initial_solution(problem: IBProblem, beta: float, seed: int | None = None,
                     encoder: np.ndarray | None = None) -> IBSolution:
    if encoder is None:
        rng = np.random.default_rng(seed)
        encoder = resolved_encoder(problem.joint.shape[0], problem.cardinality_t, rng)
    return _solution(problem, beta, np.asarray(encoder, dtype=float), 0, False)


def ib_iterate(problem: IBProblem, state: IBSolution, beta: float | None = None) -> IBSolution:
    """One synchronous pass: encoder, then marginal, then decoder."""
    beta = state.beta if beta is None else beta
    px, pyx = problem.px, problem.pyx
    if state.encoder.shape != (px.shape[0], problem.cardinality_t):
        raise ValueError(f"state encoder shape {state.encoder.shape} does not match problem")
    enc = ib_encoder_from_decoder(pyx, state.marginal_t, state.decoder, beta)
    return _solution(problem, beta, enc, state.iterations + 1, state.converged)


@numba.njit(cache=True)
def _solve_kernel(px, pyx, neg_h, log_py, beta, enc, tol, max_iter, history):
    nx, nt = enc.shape
    ny = pyx.shape[1]
    pt = np.zeros(nt)
    dec = np.zeros((nt, ny))
    logits = np.zeros(nt)
    log_dec = np.zeros((nt, ny))
    log_pt = np.zeros(nt)
    prev = np.inf
    it = 0
    converged = False
    while True:
        # marginal and decoder from the current encoder
        for t in range(nt):
            s = 0.0
            for x in range(nx):
                s += px[x] * enc[x, t]
            pt[t] = s
        for t in range(nt):
            for y in range(ny):
                dec[t, y] = 0.0
        for x in range(nx):
            for t in range(nt):
                w = px[x] * enc[x, t]
                if w > 0.0:
                    for y in range(ny):
                        dec[t, y] += w * pyx[x, y]
        for t in range(nt):
            if pt[t] > 0.0:
                for y in range(ny):
                    dec[t, y] /= pt[t]
        # functional of the consistent triple
        ixt = 0.0
        for x in range(nx):
            for t in range(nt):
                w = px[x] * enc[x, t]
                if w > 0.0:
                    ixt += w * math.log(enc[x, t] / pt[t])
        ity = 0.0
        for t in range(nt):
            if pt[t] > 0.0:
                for y in range(ny):
                    d = dec[t, y]
                    if d > 0.0:
                        ity += pt[t] * d * (math.log(d) - log_py[y])
        f = (ixt - beta * ity) / math.log(2.0)
        if it < history.shape[0]:
            history[it] = f
        if abs(prev - f) < tol:
            converged = True
            break
        if it >= max_iter:
            break
        prev = f
        # encoder update in the log domain
        for t in range(nt):
            log_pt[t] = math.log(pt[t]) if pt[t] > 0.0 else -np.inf
            for y in range(ny):
                log_dec[t, y] = math.log(max(dec[t, y], 1e-300))
        for x in range(nx):
            m = -np.inf
            for t in range(nt):
                if pt[t] > 0.0:
                    cross = 0.0
                    for y in range(ny):
                        p = pyx[x, y]
                        if p > 0.0:
                            cross += p * log_dec[t, y]
                    logits[t] = log_pt[t] - beta * (neg_h[x] - cross)
                else:
                    logits[t] = -np.inf
                if logits[t] > m:
                    m = logits[t]
            z = 0.0
            for t in range(nt):
                v = math.exp(logits[t] - m) if logits[t] > -np.inf else 0.0
                enc[x, t] = v
                z += v
            for t in range(nt):
                enc[x, t] /= z
        it += 1
    return it, converged


def solve_ib(problem: IBProblem, beta: float, init_seed: int = 0, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, init: np.ndarray | None = None,
             record_history: bool = False) -> IBSolution:
    """Iterate the IB equations from a random (or given) encoder to convergence.

    Non-convergence after ``max_iter`` passes is reported through
    ``solution.converged = False``.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    px, pyx = problem.px, problem.pyx
    if init is None:
        enc = resolved_encoder(px.shape[0], problem.cardinality_t, np.random.default_rng(init_seed))
    else:
        enc = np.array(init, dtype=float, copy=True)
        if enc.shape != (px.shape[0], problem.cardinality_t):
            raise ValueError("init encoder shape mismatch")
    py = px @ pyx
    log_py = np.log(np.where(py > 0, py, 1.0))
    history = np.full(max_iter + 1 if record_history else 0, np.nan)
    it, ok = _solve_kernel(px, pyx, _neg_h_rows(pyx), log_py, float(beta), enc,
                           float(tol), int(max_iter), history)
    if record_history:
        history = history[: it + 1]
    return _solution(problem, beta, enc, int(it), bool(ok), history if record_history else None)


def _perturbed(enc: np.ndarray, rng: np.random.Generator, eps: float) -> np.ndarray:
    noise = random_encoder(enc.shape[0], enc.shape[1], rng)
    return (1.0 - eps) * enc + eps * noise


def sweep_info_curve(problem: IBProblem, betas: Sequence[float], restarts: int = 3,
                     seed: int = 0, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER, perturb: float = 1e-2) -> InfoCurve:
    """Trace the information curve on a beta grid.

    Each grid point keeps the lowest-functional solution among ``restarts``
    random initializations, an ascending warm-start pass (previous solution
    plus a small perturbation so clusters can split) and a descending
    warm-start pass.
    """
    betas = [float(b) for b in betas]
    if any(b < 0 for b in betas):
        raise ValueError("betas must be nonnegative")
    if any(b2 < b1 for b1, b2 in zip(betas, betas[1:])):
        raise ValueError("betas must be ascending")
    rng = np.random.default_rng(seed)
    best: list[IBSolution | None] = [None] * len(betas)

    def offer(i, sol):
        cur = best[i]
        if cur is None or sol.functional < cur.functional - 1e-13:
            best[i] = sol

    for i, b in enumerate(betas):
        for r in range(restarts):
            offer(i, solve_ib(problem, b, int(rng.integers(2**31)), tol, max_iter))
    prev = None
    for i, b in enumerate(betas):
        init = None if prev is None else _perturbed(prev.encoder, rng, perturb)
        sol = solve_ib(problem, b, int(rng.integers(2**31)), tol, max_iter, init=init)
        offer(i, sol)
        prev = best[i]
    prev = None
    for i in range(len(betas) - 1, -1, -1):
        if prev is not None:
            offer(i, solve_ib(problem, betas[i], 0, tol, max_iter, init=prev.encoder.copy()))
        prev = best[i]
    sols = [s for s in best if s is not None]
    return InfoCurve([(s.beta, s.i_x, s.i_y) for s in sols], [s.converged for s in sols], sols)


def curve_concavity_violation(i_x: np.ndarray, i_y: np.ndarray, min_dx: float = 1e-9) -> float:
    """Largest amount by which an interior point falls below its neighbours' chord."""
    worst = 0.0
    for k in range(1, len(i_x) - 1):
        x0, x1, x2 = i_x[k - 1], i_x[k], i_x[k + 1]
        if x2 - x0 < min_dx:
            continue
        chord = i_y[k - 1] + (i_y[k + 1] - i_y[k - 1]) * (x1 - x0) / (x2 - x0)
        worst = max(worst, chord - i_y[k])
    return worst


def curve_slopes(curve: InfoCurve, min_dx: float = 1e-3):
    """Central finite-difference slopes dI_Y/dI_X at interior points, with their betas."""
    bx, ix, iy = curve.betas, curve.i_x, curve.i_y
    out = []
    for k in range(1, len(bx) - 1):
        dx = ix[k + 1] - ix[k - 1]
        if dx < min_dx or ix[k - 1] < min_dx:
            continue
        out.append((bx[k], (iy[k + 1] - iy[k - 1]) / dx))
    return out


def fit_beta_star(layer_encoder, layer_decoder, problem: IBProblem,
                  beta_grid: Sequence[float]) -> tuple[float, float]:
    """Beta whose IB encoder (built from the layer's own decoder) is closest to the layer's.

    Closeness is the p(x)-weighted KL between encoder rows, in bits. Ties go to
    the smaller beta.
    """
    grid = np.asarray(list(beta_grid), dtype=float)
    if grid.size == 0:
        raise ValueError("beta grid is empty")
    enc = np.asarray(getattr(layer_encoder, "rows", layer_encoder), dtype=float)
    dec = np.asarray(getattr(layer_decoder, "rows", layer_decoder), dtype=float)
    px, pyx = problem.px, problem.pyx
    if enc.shape[0] != px.shape[0] or dec.shape[0] != enc.shape[1] or dec.shape[1] != pyx.shape[1]:
        raise ValueError(f"dimension mismatch: encoder {enc.shape}, decoder {dec.shape}, "
                         f"joint {problem.joint.shape}")
    pt = px @ enc
    neg_h = _neg_h_rows(pyx)
    nz = enc > 0
    ent_term = np.where(nz, enc * np.log(np.where(nz, enc, 1.0)), 0.0).sum(axis=1)
    kls = []
    for b in grid:
        log_ib = ib_encoder_from_decoder(pyx, pt, dec, b, neg_h, log=True)
        cross = np.where(nz, enc * log_ib, 0.0).sum(axis=1)
        kls.append(float(px @ (ent_term - cross)) / LN2)
    kls = np.array(kls)
    tied = np.flatnonzero(kls <= kls.min() + 1e-12)
    best = tied[np.argmin(grid[tied])]
    return float(grid[best]), float(kls[best])


def geometric_betas(lo: float, hi: float, ratio: float) -> np.ndarray:
    n = int(math.floor(math.log(hi / lo) / math.log(ratio))) + 1
    return lo * ratio ** np.arange(n)
