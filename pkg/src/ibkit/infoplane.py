"""Binned information-plane estimates over training snapshots, DPI audits and phase detection."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from .netlab import Dataset, Params, TrainRun, _act, forward, gradient_snr_series, running_median
from .prob import entropy, mi_from_sparse, mi_from_table

MAX_PATTERNS = 100_000


@dataclass(frozen=True)
class BinningConfig:
    """Equal-width binning of layer activations.

    ``markov=True`` feeds each layer from the bin centres of the previous
    layer's (``propagate_bins``-bin) discretization, so the discretized layers
    form a Markov chain X -> T1 -> T2 -> ... and both DPI chains hold exactly.
    With ``markov=False`` every layer's exact activations are binned on their
    own (no such guarantee).
    """
    n_bins: int = 30
    lo: float = -1.0
    hi: float = 1.0
    adaptive: bool = False
    markov: bool = True
    propagate_bins: int | None = None

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        if self.propagate_bins is not None and self.propagate_bins < 2:
            raise ValueError("propagate_bins must be >= 2")

    def edges(self, lo: float | None = None, hi: float | None = None, n: int | None = None) -> np.ndarray:
        # integer ratios keep the edges of n and n/2 bins exactly nested
        lo = self.lo if lo is None else lo
        hi = self.hi if hi is None else hi
        n = self.n_bins if n is None else n
        return lo + (hi - lo) * (np.arange(n + 1) / n)


def discretize(a: np.ndarray, edges: np.ndarray) -> tuple[np.ndarray, int]:
    """Bin index per entry (values outside the range are clipped into the edge bins)."""
    n = len(edges) - 1
    clipped = int(np.sum((a < edges[0]) | (a > edges[-1])))
    idx = np.searchsorted(edges, a, side="right") - 1
    return np.clip(idx, 0, n - 1), clipped


def canonical_clusters(bins: np.ndarray) -> np.ndarray:
    """Label each row by the lexicographic rank of its bin tuple."""
    _, inv = np.unique(bins, axis=0, return_inverse=True)
    return inv.reshape(-1)


def quantized_forward(params: Params, x: np.ndarray, activation: str,
                      edges: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Layer activations where each layer's input is the previous layer snapped to
    its bin centre. Returned activations are pre-snapping (to be binned by the caller)."""
    out = []
    a = x
    ws, bs = params.weights, params.biases
    for k, (w, b) in enumerate(zip(ws, bs)):
        z = a @ w.T + b
        act = expit(z) if k == len(ws) - 1 else _act(z, activation)
        out.append(act)
        e = edges[k]
        idx, _ = discretize(act, e)
        a = 0.5 * (e[idx] + e[idx + 1])
    return out


def layer_tables(t_idx: np.ndarray, pxy: np.ndarray):
    """Exact tables for a deterministic representation t(x).

    Returns the nonzero entries of P(T, X) in (t, x) row-major order and the
    dense P(T, Y) accumulated over x in increasing order.
    """
    n_t = int(t_idx.max()) + 1
    px = pxy.sum(axis=1)
    x = np.arange(len(t_idx))
    order = np.lexsort((x, t_idx))
    pty = np.zeros((n_t, pxy.shape[1]))
    np.add.at(pty, t_idx, pxy)
    return (t_idx[order], x[order], px[order]), pty


def binned_mi(acts: np.ndarray, pxy: np.ndarray, edges: np.ndarray) -> tuple[float, float, int]:
    """(I(X;T), I(T;Y), n_clipped) in bits for one layer's activations over all inputs."""
    bins, clipped = discretize(acts, edges)
    t_idx = canonical_clusters(bins)
    (r, c, v), pty = layer_tables(t_idx, pxy)
    i_xt = mi_from_sparse(r, c, v, (int(t_idx.max()) + 1, len(t_idx)))
    return i_xt, mi_from_table(pty), clipped


@dataclass
class InfoPlaneTrajectory:
    """Per snapshot (rows) and weight layer (columns) binned information coordinates."""
    iterations: np.ndarray
    i_xt: np.ndarray
    i_ty: np.ndarray
    n_clipped: np.ndarray = field(default=None, repr=False)
    i_xy: float = float("nan")
    h_y: float = float("nan")

    @property
    def n_layers(self) -> int:
        return self.i_xt.shape[1]

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "layer", "i_xt_bits", "i_ty_bits"])
            for s, it in enumerate(self.iterations):
                for k in range(self.n_layers):
                    w.writerow([int(it), k + 1, repr(float(self.i_xt[s, k])), repr(float(self.i_ty[s, k]))])

    @classmethod
    def from_csv(cls, path) -> "InfoPlaneTrajectory":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        its = np.unique(rows[:, 0]).astype(np.int64)
        k = int(rows[:, 1].max())
        ix = np.zeros((len(its), k))
        iy = np.zeros((len(its), k))
        pos = {it: i for i, it in enumerate(its)}
        for it, layer, a, b in rows:
            ix[pos[int(it)], int(layer) - 1] = a
            iy[pos[int(it)], int(layer) - 1] = b
        return cls(its, ix, iy)


def estimate_layer_mi(run: TrainRun, dataset: Dataset, binning: BinningConfig = BinningConfig(),
                      iterations: Sequence[int] | None = None) -> InfoPlaneTrajectory:
    """Binned (I(X;T_k), I(T_k;Y)) for every snapshot and weight layer, using exact
    enumeration over all inputs and the full p(x, y)."""
    if len(dataset.x) > MAX_PATTERNS:
        raise ValueError(f"dataset has {len(dataset.x)} patterns; exact enumeration needs <= {MAX_PATTERNS}")
    pxy = dataset.joint_xy()
    its = sorted(run.snapshots) if iterations is None else list(iterations)
    k = run.spec.n_layers
    n_prop = binning.propagate_bins or binning.n_bins
    if binning.adaptive:
        # frozen per-layer range [0, max over the whole run]
        exact = [forward(run.snapshots[it], dataset.x, run.spec.activation) for it in its]
        ranges = [(0.0, max(max(float(a[j].max()) for a in exact), 1e-12)) for j in range(k)]
    else:
        ranges = [(binning.lo, binning.hi)] * k
    edges = [binning.edges(lo, hi) for lo, hi in ranges]
    prop_edges = [binning.edges(lo, hi, n_prop) for lo, hi in ranges]
    ix = np.zeros((len(its), k))
    iy = np.zeros((len(its), k))
    clipped = np.zeros((len(its), k), dtype=np.int64)
    for s, it in enumerate(its):
        if binning.markov:
            acts = quantized_forward(run.snapshots[it], dataset.x, run.spec.activation, prop_edges)
        else:
            acts = forward(run.snapshots[it], dataset.x, run.spec.activation)
        for j in range(k):
            ix[s, j], iy[s, j], clipped[s, j] = binned_mi(acts[j], pxy, edges[j])
    return InfoPlaneTrajectory(np.array(its, dtype=np.int64), ix, iy, clipped,
                               mi_from_table(pxy), entropy(pxy.sum(axis=0)))


@dataclass
class DpiReport:
    max_violation: float
    x_chain_violation: float
    y_chain_violation: float
    worst: tuple[str, int, int] | None   # (chain, iteration, layer index)
    n_snapshots: int

    def ok(self, tol: float = 1e-9) -> bool:
        return self.max_violation < tol


def dpi_check(traj: InfoPlaneTrajectory, include_source: bool = True) -> DpiReport:
    """Checks I(X;T_1) >= I(X;T_2) >= ... and I(Y;T_1) >= I(Y;T_2) >= ... at every snapshot.

    With ``include_source`` the Y chain starts at I(X;Y) and the X chain at H(X)
    is implied by exact enumeration, so only the Y source is checked.
    """
    if traj.n_layers < 2:
        raise ValueError("DPI check needs at least two layers")
    worst = None
    vx = vy = 0.0
    for s, it in enumerate(traj.iterations):
        dx = np.diff(traj.i_xt[s])
        ychain = traj.i_ty[s]
        if include_source and np.isfinite(traj.i_xy):
            ychain = np.concatenate([[traj.i_xy], ychain])
        dy = np.diff(ychain)
        if dx.size and dx.max() > vx:
            vx = float(dx.max())
            worst = ("x", int(it), int(np.argmax(dx)) + 1)
        if dy.size and dy.max() > vy:
            vy = float(dy.max())
            off = 0 if include_source and np.isfinite(traj.i_xy) else 1
            cand = ("y", int(it), int(np.argmax(dy)) + off)
            if vy > vx:
                worst = cand
    return DpiReport(max(vx, vy), vx, vy, worst, len(traj.iterations))


def log_resample(iterations: np.ndarray, values: np.ndarray, n_bins: int):
    """Geometric-mean of a positive series within log-spaced iteration bins."""
    it = np.asarray(iterations, dtype=float)
    v = np.asarray(values, dtype=float)
    good = (it > 0) & np.isfinite(v) & (v > 0)
    it, v = it[good], v[good]
    edges = np.geomspace(it[0], it[-1] * (1 + 1e-12), n_bins + 1)
    which = np.searchsorted(edges, it, side="right") - 1
    out_it, out_v = [], []
    for b in range(n_bins):
        m = which == b
        if np.any(m):
            out_it.append(float(np.exp(np.mean(np.log(it[m])))))
            out_v.append(float(np.exp(np.mean(np.log(v[m])))))
    return np.array(out_it), np.array(out_v)


def detect_snr_transition(snr: Sequence[float], iterations: Sequence[float] | None = None,
                          window: int = 5, log_bins: int | None = None,
                          min_drop: float = 0.05) -> float | None:
    """Point of steepest decay of log SNR after running-median smoothing.

    Without ``iterations`` the result is an index into ``snr``. With
    ``log_bins`` the series is first averaged in log-spaced iteration bins so
    the derivative is taken per log-iteration. Returns None when no step
    lowers log SNR by more than ``min_drop``.
    """
    v = np.asarray(snr, dtype=float)
    it = np.arange(len(v), dtype=float) if iterations is None else np.asarray(iterations, dtype=float)
    if len(v) < 20:
        raise ValueError("need at least 20 points")
    if log_bins:
        it, v = log_resample(it, v, log_bins)
    else:
        good = np.isfinite(v) & (v > 0)
        it, v = it[good], v[good]
    if len(v) < 3:
        return None
    s = running_median(np.log(v), window)
    drop = -np.diff(s)
    j = int(np.argmax(drop))
    if drop[j] <= min_drop:
        return None
    t = 0.5 * (it[j] + it[j + 1]) if log_bins else it[j + 1]
    return float(t)


def detect_compression_onset(traj_or_series, layer: int | None = None, iterations=None,
                             n_consecutive: int = 3, min_drop: float = 0.05):
    """Iteration of the global maximum of I(X;T) when it is followed by at least
    ``n_consecutive`` consecutive snapshots at or below ``peak - min_drop``.

    Accepts a trajectory (plus layer index, default the deepest hidden layer)
    or a bare series (then the result is an index unless ``iterations`` given).
    """
    if isinstance(traj_or_series, InfoPlaneTrajectory):
        traj = traj_or_series
        layer = traj.n_layers - 2 if layer is None else layer
        series = traj.i_xt[:, layer]
        its = traj.iterations
    else:
        series = np.asarray(traj_or_series, dtype=float)
        its = np.arange(len(series)) if iterations is None else np.asarray(iterations)
    if len(series) < 20:
        raise ValueError("need at least 20 snapshots")
    p = int(np.argmax(series))
    below = series[p + 1:] <= series[p] - min_drop
    run = 0
    for b in below:
        run = run + 1 if b else 0
        if run >= n_consecutive:
            return int(its[p])
    return None


@dataclass
class TransitionCorrelation:
    pearson_r: float
    slope: float
    intercept: float
    pairs: list[tuple[float, float]]


def correlate_transitions(pairs: Sequence[tuple[float | None, float | None]]) -> TransitionCorrelation:
    """Pearson r and least-squares slope of SNR-transition iteration against
    compression-onset iteration; pairs with a missing detection are dropped."""
    good = [(float(a), float(b)) for a, b in pairs if a is not None and b is not None]
    if len(good) < 4:
        raise ValueError(f"need at least 4 valid pairs, got {len(good)}")
    snr_it = np.array([a for a, _ in good])
    onset = np.array([b for _, b in good])
    if np.ptp(snr_it) == 0 or np.ptp(onset) == 0:
        raise ValueError("degenerate pairs: no spread")
    r = float(stats.pearsonr(onset, snr_it)[0])
    slope, icpt = np.polyfit(onset, snr_it, 1)
    return TransitionCorrelation(r, float(slope), float(icpt), good)


def save_phase_report(path, **fields) -> None:
    def conv(v):
        if isinstance(v, (np.integer,)):
            return int(v)
        if isinstance(v, (np.floating,)):
            return float(v)
        if isinstance(v, np.ndarray):
            return v.tolist()
        if hasattr(v, "__dataclass_fields__"):
            return {k: conv(x) for k, x in asdict(v).items()}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(conv(fields), indent=2))


def run_snr_transition(run: TrainRun, log_bins: int = 60, **kwargs) -> float | None:
    """Median over weight layers of the per-layer SNR transition iteration."""
    found = []
    for k in range(run.spec.n_layers):
        its, snr = gradient_snr_series(run, k)
        t = detect_snr_transition(snr, its, log_bins=log_bins, **kwargs)
        if t is not None:
            found.append(t)
    return float(np.median(found)) if found else None


def layer_channel(params: Params, dataset: Dataset, activation: str, layer: int,
                  binning: BinningConfig = BinningConfig()):
    """Deterministic binned encoder p(t|x) (one-hot rows), decoder p(y|t) and
    the matching IB problem for one weight layer."""
    from .ib import IBProblem
    pxy = dataset.joint_xy()
    k = len(params.widths) - 1
    if not 0 <= layer < k:
        raise IndexError(f"layer {layer} out of range for {k} weight layers")
    edges = [binning.edges()] * k
    if binning.markov:
        prop = [binning.edges(n=binning.propagate_bins or binning.n_bins)] * k
        acts = quantized_forward(params, dataset.x, activation, prop)
    else:
        acts = forward(params, dataset.x, activation)
    bins, _ = discretize(acts[layer], edges[layer])
    t = canonical_clusters(bins)
    n_t = int(t.max()) + 1
    enc = np.zeros((len(t), n_t))
    enc[np.arange(len(t)), t] = 1.0
    pty = np.zeros((n_t, pxy.shape[1]))
    np.add.at(pty, t, pxy)
    dec = pty / pty.sum(axis=1, keepdims=True)
    return enc, dec, IBProblem(pxy, cardinality_t=n_t)
