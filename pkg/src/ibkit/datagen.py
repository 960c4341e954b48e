"""Benchmark data: an orbit-symmetric binary rule on 12 bits and a jointly Gaussian task."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import expit
from scipy.stats import norm

from .prob import JointDistribution

N_BITS = 12
N_PATTERNS = 1 << N_BITS
EXPECTED_ORBITS = 64


class CalibrationError(RuntimeError):
    pass


class OrbitCountError(ValueError):
    pass


@dataclass(frozen=True)
class PermutationGroup:
    name: str
    generators: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        for g in self.generators:
            if sorted(g) != list(range(N_BITS)):
                raise ValueError(f"{self.name}: generator {g} is not a permutation of {N_BITS} positions")


def _group_data() -> dict:
    return json.loads((Path(__file__).parent / "data" / "groups.json").read_text())


def load_group(name: str | None = None) -> PermutationGroup:
    """Shipped groups: ``half_axes`` (default, 64 orbits) and ``icosahedral`` (120 elements)."""
    data = _group_data()
    name = name or data["default_group"]
    if name == "trivial":
        return PermutationGroup("trivial", (tuple(range(N_BITS)),))
    try:
        g = data["groups"][name]
    except KeyError:
        raise ValueError(f"unknown group {name!r}; known: {sorted(data['groups'])} and 'trivial'") from None
    perms = g.get("generators") or g["elements"]
    return PermutationGroup(name, tuple(tuple(p) for p in perms))


def face_axis_triples() -> list[tuple[int, ...]]:
    return [tuple(t) for t in _group_data()["face_axis_triples"]]


def all_patterns() -> np.ndarray:
    """4096 x 12 array of bits; row i is the binary expansion of i (bit 0 first)."""
    idx = np.arange(N_PATTERNS)
    return ((idx[:, None] >> np.arange(N_BITS)) & 1).astype(np.int8)


def _pattern_index(bits: np.ndarray) -> np.ndarray:
    return bits.astype(np.int64) @ (1 << np.arange(N_BITS))


def compute_orbits(group: PermutationGroup, patterns: np.ndarray | None = None) -> np.ndarray:
    """Orbit label per pattern, labels ordered by first appearance."""
    patterns = all_patterns() if patterns is None else patterns
    src = np.arange(N_PATTERNS)
    rows, cols = [], []
    for g in group.generators:
        # the image of pattern x under g puts bit i at position g[i]
        img = np.empty_like(patterns)
        img[:, list(g)] = patterns
        rows.append(src)
        cols.append(_pattern_index(img))
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    adj = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(N_PATTERNS, N_PATTERNS))
    _, labels = connected_components(adj, directed=True, connection="weak")
    _, first = np.unique(labels, return_index=True)
    relabel = np.empty(labels.max() + 1, dtype=np.int64)
    relabel[labels[np.sort(first)]] = np.arange(first.size)
    return relabel[labels]


@dataclass(frozen=True)
class PatternSet:
    patterns: np.ndarray
    orbit_id: np.ndarray
    group_name: str = "half_axes"

    def __post_init__(self):
        if self.patterns.shape != (N_PATTERNS, N_BITS):
            raise ValueError("patterns must be 4096 x 12")
        n = int(self.orbit_id.max()) + 1
        if n != EXPECTED_ORBITS:
            raise OrbitCountError(f"group {self.group_name!r} gives {n} orbits, expected {EXPECTED_ORBITS}")

    @property
    def n_orbits(self) -> int:
        return int(self.orbit_id.max()) + 1

    def inputs(self) -> np.ndarray:
        """Network inputs in {-1, +1}."""
        return 2.0 * self.patterns - 1.0


@dataclass(frozen=True)
class RuleDistribution:
    p_y1_given_x: np.ndarray
    gain: float
    threshold: float
    orbit_scores: np.ndarray = field(default=None, repr=False)

    def joint(self) -> JointDistribution:
        """Exact p(x, y) with uniform p(x); column 0 is y=0."""
        p1 = self.p_y1_given_x
        return JointDistribution(np.column_stack([1.0 - p1, p1]) / p1.size)

    @property
    def p_y1(self) -> float:
        return float(self.p_y1_given_x.mean())


def _orbit_features(patterns: np.ndarray) -> np.ndarray:
    """Per-pattern features; averaged over orbits they become orbit scores."""
    north, south = patterns[:, :6], patterns[:, 6:]
    n1 = north.sum(1).astype(float)
    n2 = south.sum(1).astype(float)
    faces = np.zeros((64,), dtype=bool)
    for t in face_axis_triples():
        faces[sum(1 << i for i in t)] = True
    w6 = 1 << np.arange(6)
    tri1 = faces[north.astype(np.int64) @ w6].astype(float)
    tri2 = faces[south.astype(np.int64) @ w6].astype(float)
    return np.column_stack([n1, n2, n1 ** 2 / 6, n2 ** 2 / 6, n1 * n2 / 6, tri1, tri2])


def orbit_scores(patterns: np.ndarray, orbit_id: np.ndarray, seed: int, draw: int = 0) -> np.ndarray:
    """Seeded, standardized score per orbit (mean of a random feature combination).

    ``draw`` > 0 selects an independent redraw for the same seed.
    """
    rng = np.random.default_rng(seed if draw == 0 else [seed, draw])
    feats = _orbit_features(patterns)
    w = rng.normal(size=feats.shape[1])
    f = feats @ w
    n = int(orbit_id.max()) + 1
    s = np.bincount(orbit_id, weights=f, minlength=n) / np.bincount(orbit_id, minlength=n)
    sd = s.std()
    return (s - s.mean()) / (sd if sd > 0 else 1.0)


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 0.0, 1.0)
    out = np.zeros_like(p)
    m = (p > 0) & (p < 1)
    q = p[m]
    out[m] = -(q * np.log2(q) + (1 - q) * np.log2(1 - q))
    return out


def rule_mi(scores: np.ndarray, weights: np.ndarray, theta: float, gain: float) -> tuple[float, float]:
    """(p(y=1), I(X;Y)) in bits for p(y=1|x) = sigmoid(gain (s - theta))."""
    p = expit(gain * (scores - theta))
    p1 = float(weights @ p)
    return p1, float(_binary_entropy(np.array([p1]))[0] - weights @ _binary_entropy(p))


def _theta_for_balance(scores, weights, gain, p1_target, iters=200):
    lo, hi = scores.min() - 50.0 / gain - 1.0, scores.max() + 50.0 / gain + 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if rule_mi(scores, weights, mid, gain)[0] > p1_target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    return 0.5 * (lo + hi)


def calibrate_threshold_and_gain(scores: Sequence[float], p1: float = 0.5, mi: float = 0.99,
                                 weights: Sequence[float] | None = None,
                                 gain_range: tuple[float, float] = (1e-3, 1e4),
                                 tol: float = 0.01) -> tuple[float, float]:
    """Bisection on theta for p(y=1), nested in a bisection on gain for I(X;Y).

    ``weights`` are the probabilities of the score entries (uniform if omitted).
    Raises CalibrationError when the gain range cannot bracket the MI target
    or the result misses either target by more than ``tol``.
    """
    s = np.asarray(scores, dtype=float)
    if np.unique(s).size < 2:
        raise ValueError("need at least two distinct scores")
    w = np.full(s.size, 1.0 / s.size) if weights is None else np.asarray(weights, float) / np.sum(weights)

    def mi_at(g):
        th = _theta_for_balance(s, w, g, p1)
        return th, rule_mi(s, w, th, g)[1]

    lo, hi = np.log(gain_range[0]), np.log(gain_range[1])
    if not (mi_at(np.exp(lo))[1] < mi < mi_at(np.exp(hi))[1]):
        raise CalibrationError(f"MI target {mi} not bracketed by gain range {gain_range}")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if mi_at(np.exp(mid))[1] < mi:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    gain = float(np.exp(0.5 * (lo + hi)))
    theta, _ = mi_at(gain)
    got_p1, got_mi = rule_mi(s, w, theta, gain)
    if abs(got_p1 - p1) > tol or abs(got_mi - mi) > tol:
        raise CalibrationError(f"calibration missed targets: p1={got_p1:.4f}, mi={got_mi:.4f}")
    return float(theta), gain


def generate_symmetric_rule(seed: int = 0, group: PermutationGroup | str | None = None,
                            mi_target: float = 0.99, max_draws: int = 20) -> tuple[PatternSet, RuleDistribution]:
    """Orbit-constant rule calibrated to p(y=1) = 0.5 and the MI target.

    A balanced threshold that cuts through a heavy orbit caps the reachable MI,
    so scores are redrawn (deterministically from ``seed``) up to ``max_draws``
    times before CalibrationError propagates.
    """
    if not isinstance(group, PermutationGroup):
        group = load_group(group)
    pats = all_patterns()
    orbit = compute_orbits(group, pats)
    pset = PatternSet(pats, orbit, group.name)
    sizes = np.bincount(orbit)
    for draw in range(max_draws):
        s = orbit_scores(pats, orbit, seed, draw)
        try:
            theta, gain = calibrate_threshold_and_gain(s, 0.5, mi_target, weights=sizes)
            break
        except CalibrationError:
            if draw == max_draws - 1:
                raise
    p = expit(gain * (s[orbit] - theta))
    return pset, RuleDistribution(p, gain, theta, s)


def save_rule_csv(pset: PatternSet, rule: RuleDistribution, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"b{i}" for i in range(N_BITS)] + ["orbit", "p_y1"])
        for bits, o, p in zip(pset.patterns, pset.orbit_id, rule.p_y1_given_x):
            w.writerow([*map(int, bits), int(o), repr(float(p))])


def load_rule_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(patterns, orbit_id, p_y1_given_x) as stored."""
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    return data[:, :N_BITS].astype(np.int8), data[:, N_BITS].astype(np.int64), data[:, N_BITS + 1]


# ---------------------------------------------------------------------------
# jointly Gaussian task
# ---------------------------------------------------------------------------

def _random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


@dataclass
class JointGaussianTask:
    """x = sigma_x eps_x,  y = sigma_y eps_y + A x."""
    dim_x: int
    dim_y: int
    sigma_x: float
    sigma_y: float
    mixing: np.ndarray
    spectrum: np.ndarray
    seed: int = 0

    @property
    def cov_x(self) -> np.ndarray:
        return self.sigma_x ** 2 * np.eye(self.dim_x)

    @property
    def cov_y(self) -> np.ndarray:
        ly = self.sigma_y * np.eye(self.dim_y)
        return ly @ ly.T + self.mixing @ self.cov_x @ self.mixing.T

    @property
    def cov_xy(self) -> np.ndarray:
        return self.cov_x @ self.mixing.T

    def sample(self, n: int, rng: np.random.Generator | int | None = None) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(rng)
        x = self.sigma_x * rng.normal(size=(n, self.dim_x))
        y = self.sigma_y * rng.normal(size=(n, self.dim_y)) + x @ self.mixing.T
        return x, y

    def to_json(self, path) -> None:
        d = {"dim_x": self.dim_x, "dim_y": self.dim_y, "sigma_x": self.sigma_x,
             "sigma_y": self.sigma_y, "spectrum": list(map(float, self.spectrum)), "seed": self.seed}
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(d, indent=2))

    @classmethod
    def from_json(cls, path) -> "JointGaussianTask":
        d = json.loads(Path(path).read_text())
        return generate_joint_gaussian(d["dim_x"], d["dim_y"], d["seed"], d["sigma_x"],
                                       d["sigma_y"], d["spectrum"])


def generate_joint_gaussian(dim_x: int = 30, dim_y: int = 1, seed: int = 0, sigma_x: float = 1.0,
                            sigma_y: float = 1.0, spectrum: Sequence[float] | None = None) -> JointGaussianTask:
    """Mixing matrix A = U diag(spectrum) V^T with seeded random orthogonal U, V."""
    if dim_x < 1 or dim_y < 1:
        raise ValueError("dimensions must be >= 1")
    if sigma_x <= 0 or sigma_y <= 0:
        raise ValueError("sigmas must be positive")
    k = min(dim_x, dim_y)
    spec = np.ones(k) if spectrum is None else np.asarray(spectrum, dtype=float)
    if spec.shape != (k,):
        raise ValueError(f"spectrum must have length min(dim_x, dim_y) = {k}")
    rng = np.random.default_rng(seed)
    u = _random_orthogonal(dim_y, rng)
    v = _random_orthogonal(dim_x, rng)
    a = u[:, :k] @ np.diag(spec) @ v[:, :k].T
    return JointGaussianTask(dim_x, dim_y, float(sigma_x), float(sigma_y), a, spec, seed)


def analytic_mi_gaussian(task: JointGaussianTask) -> float:
    """I(X;Y) in bits from the singular values of the mixing matrix."""
    sv = np.linalg.svd(task.mixing, compute_uv=False)
    return float(0.5 * np.sum(np.log2(1.0 + task.sigma_x ** 2 * sv ** 2 / task.sigma_y ** 2)))


@dataclass(frozen=True)
class GibSpectrum:
    eigenvalues: np.ndarray


def gib_spectrum(task: JointGaussianTask) -> GibSpectrum:
    """Eigenvalues of I - S_xy S_yy^-1 S_yx S_xx^-1, ascending, clipped to [0, 1]."""
    sxx, syy, sxy = task.cov_x, task.cov_y, task.cov_xy
    if np.linalg.cond(sxx) > 1e12:
        raise np.linalg.LinAlgError("cov_x is singular")
    m = np.eye(task.dim_x) - sxy @ np.linalg.solve(syy, sxy.T) @ np.linalg.inv(sxx)
    ev = np.sort(np.real(np.linalg.eigvals(m)))
    return GibSpectrum(np.clip(ev, 0.0, 1.0))


def sufficient_projection(task: JointGaussianTask) -> np.ndarray:
    """Unit vector v with v.x carrying all information about a scalar y."""
    if task.dim_y != 1:
        raise ValueError("sufficient projection is defined here for dim_y = 1")
    a = task.mixing[0]
    n = np.linalg.norm(a)
    if n == 0:
        e = np.zeros(task.dim_x)
        e[0] = 1.0
        return e
    return a / n


def discretized_joint(task: JointGaussianTask, bins: int = 60, span: float = 5.0) -> JointDistribution:
    """Joint of (binned s = v.x, binned y) for dim_y = 1, with exact cell masses along s
    and exact conditional masses of y given each s-cell midpoint.

    Both axes use ``bins`` equal cells over +-``span`` standard deviations;
    tail mass is folded into the edge cells.
    """
    v = sufficient_projection(task)
    gain = float(task.mixing[0] @ v)
    sd_s = task.sigma_x
    sd_y = math.sqrt(float(task.cov_y[0, 0]))
    es = np.linspace(-span * sd_s, span * sd_s, bins + 1)
    ey = np.linspace(-span * sd_y, span * sd_y, bins + 1)
    es[0], es[-1], ey[0], ey[-1] = -np.inf, np.inf, -np.inf, np.inf
    ps = np.diff(norm.cdf(es, scale=sd_s))
    # conditional y | s is N(gain s, sigma_y^2); use the cell's conditional mean of s
    lo, hi = es[:-1], es[1:]
    mean_s = sd_s ** 2 * (norm.pdf(lo, scale=sd_s) - norm.pdf(hi, scale=sd_s)) / np.maximum(ps, 1e-300)
    cy = np.diff(norm.cdf(ey[None, :], loc=gain * mean_s[:, None], scale=task.sigma_y), axis=1)
    table = ps[:, None] * cy
    return JointDistribution(table / table.sum())


def gaussian_ib_curve(task: JointGaussianTask, i_x: np.ndarray) -> np.ndarray:
    """Optimal I(T;Y) (bits) at given I(X;T) for a scalar target: the bound
    -1/2 log2(1 - rho^2 (1 - 2^(-2 I_x))) with rho the x-y correlation."""
    if task.dim_y != 1:
        raise ValueError("closed-form curve implemented for dim_y = 1")
    rho2 = 1.0 - 2.0 ** (-2.0 * analytic_mi_gaussian(task))
    i_x = np.asarray(i_x, dtype=float)
    return -0.5 * np.log2(1.0 - rho2 * (1.0 - 2.0 ** (-2.0 * i_x)))
