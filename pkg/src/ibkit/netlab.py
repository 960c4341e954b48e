"""Small fully connected networks trained with minibatch SGD, with full instrumentation.

Weights follow the (out, in) convention: ``z = a @ W.T + b``. Outputs are
sigmoid units trained with binary cross-entropy against one-hot targets.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from scipy.special import erf, expit

from .datagen import PatternSet, RuleDistribution

ACTIVATIONS = ("tanh", "relu", "erf", "sigmoid")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int):
        super().__init__(f"loss became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class NetworkSpec:
    layer_widths: tuple[int, ...] = (12, 10, 7, 5, 4, 3, 2)
    activation: str = "tanh"
    init_weight_std: float = 1.0
    init_bias_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 3:
            raise ValueError("need input, at least one hidden layer and output")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        """Number of weight layers (hidden layers + output)."""
        return len(self.layer_widths) - 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 8000
    train_fraction: float = 0.85
    loss: str = "cross-entropy"
    snapshot_schedule: tuple[int, ...] | None = None
    n_snapshots: int = 120
    stop_train_error: float | None = None   # end training once train error <= this

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must be in (0, 1]")
        if self.loss != "cross-entropy":
            raise ValueError("only cross-entropy loss is supported")
        if self.snapshot_schedule is not None:
            object.__setattr__(self, "snapshot_schedule", tuple(sorted({int(i) for i in self.snapshot_schedule})))


@dataclass
class Dataset:
    """Fully enumerable dataset: all inputs, sampled labels, and train/test split.

    ``p_y1`` holds the exact rule p(y=1|x) when known (used by info-plane).
    """
    x: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    p_y1: np.ndarray | None = None

    @property
    def n_train(self) -> int:
        return len(self.train_idx)

    def joint_xy(self) -> np.ndarray:
        """p(x, y) over all inputs with uniform p(x); falls back to the sampled labels."""
        n = len(self.x)
        if self.p_y1 is not None:
            p = self.p_y1
        else:
            p = self.labels.astype(float)
        return np.column_stack([1.0 - p, p]) / n


def symmetric_dataset(pset: PatternSet, rule: RuleDistribution, train_fraction: float = 0.85,
                      seed: int = 0) -> Dataset:
    """Inputs in {-1, 1}; labels drawn from the rule; a random train split."""
    rng = np.random.default_rng(seed)
    n = len(pset.patterns)
    labels = (rng.random(n) < rule.p_y1_given_x).astype(np.int64)
    perm = rng.permutation(n)
    n_train = max(1, int(round(train_fraction * n)))
    return Dataset(pset.inputs(), labels, np.sort(perm[:n_train]), np.sort(perm[n_train:]),
                   rule.p_y1_given_x.copy())


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class Params:
    """Flat parameter vector with per-layer (W, b) views."""
    flat: np.ndarray
    widths: tuple[int, ...]

    @classmethod
    def zeros(cls, widths) -> "Params":
        widths = tuple(widths)
        n = sum(o * i + o for i, o in zip(widths[:-1], widths[1:]))
        return cls(np.zeros(n), widths)

    def offsets(self):
        off = 0
        for i, o in zip(self.widths[:-1], self.widths[1:]):
            yield off, off + o * i, off + o * i + o, (o, i)
            off += o * i + o

    @property
    def weights(self) -> list[np.ndarray]:
        return [self.flat[a:b].reshape(shape) for a, b, _, shape in self.offsets()]

    @property
    def biases(self) -> list[np.ndarray]:
        return [self.flat[b:c] for _, b, c, _ in self.offsets()]

    def copy(self) -> "Params":
        return Params(self.flat.copy(), self.widths)

    def weight_mask(self) -> np.ndarray:
        m = np.zeros(self.flat.size, dtype=bool)
        for a, b, _, _ in self.offsets():
            m[a:b] = True
        return m


def init_params(spec: NetworkSpec) -> Params:
    rng = np.random.default_rng(spec.seed)
    p = Params.zeros(spec.layer_widths)
    for w, b in zip(p.weights, p.biases):
        w[:] = rng.normal(0.0, spec.init_weight_std / math.sqrt(w.shape[1]), size=w.shape)
        b[:] = rng.normal(0.0, spec.init_bias_std, size=b.shape) if spec.init_bias_std > 0 else 0.0
    return p


def _act(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "erf":
        return erf(z)
    return expit(z)


def _act_grad(z, a, kind):
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0).astype(float)
    if kind == "erf":
        return 2.0 / math.sqrt(math.pi) * np.exp(-z * z)
    return a * (1.0 - a)


def forward(params: Params, x: np.ndarray, activation: str = "tanh") -> list[np.ndarray]:
    """Activations of every weight layer (hidden layers, then the sigmoid output)."""
    out = []
    a = x
    ws, bs = params.weights, params.biases
    for k, (w, b) in enumerate(zip(ws, bs)):
        z = a @ w.T + b
        a = expit(z) if k == len(ws) - 1 else _act(z, activation)
        out.append(a)
    return out


def _bce_from_logits(z, t):
    # -[t log s(z) + (1-t) log(1-s(z))] = softplus(z) - t z
    return np.logaddexp(0.0, z) - t * z


def loss_and_grads(params: Params, x: np.ndarray, targets: np.ndarray, activation: str = "tanh"):
    """Mean (over rows) summed BCE and its gradient as a flat vector. Reference implementation."""
    ws, bs = params.weights, params.biases
    zs, acts = [], [x]
    a = x
    for k, (w, b) in enumerate(zip(ws, bs)):
        z = a @ w.T + b
        a = expit(z) if k == len(ws) - 1 else _act(z, activation)
        zs.append(z)
        acts.append(a)
    m = x.shape[0]
    loss = float(_bce_from_logits(zs[-1], targets).sum() / m)
    grad = Params.zeros(params.widths)
    gws, gbs = grad.weights, grad.biases
    delta = (acts[-1] - targets) / m
    for k in range(len(ws) - 1, -1, -1):
        gws[k][:] = delta.T @ acts[k]
        gbs[k][:] = delta.sum(0)
        if k > 0:
            delta = (delta @ ws[k]) * _act_grad(zs[k - 1], acts[k], activation)
    return loss, grad.flat


def one_hot(labels: np.ndarray, n: int = 2) -> np.ndarray:
    return np.eye(n)[labels]


@numba.njit(cache=True)
def _sgd_steps(flat, widths, x, t, batches, lr, act, gsum, gsq):
    """Run len(batches) SGD steps in place; accumulate gradient sums. Returns summed loss."""
    n_layers = widths.shape[0] - 1
    total = 0.0
    grad = np.zeros_like(flat)
    for it in range(batches.shape[0]):
        idx = batches[it]
        m = idx.shape[0]
        acts = [x[idx]]
        zs = []
        off = 0
        for k in range(n_layers):
            ni, no = widths[k], widths[k + 1]
            w = flat[off:off + no * ni].reshape((no, ni))
            b = flat[off + no * ni:off + no * ni + no]
            z = acts[k] @ w.T + b
            a = np.empty_like(z)
            if k == n_layers - 1:
                for r in range(m):
                    for c in range(no):
                        a[r, c] = 1.0 / (1.0 + math.exp(-z[r, c]))
            elif act == 0:
                a[:] = np.tanh(z)
            elif act == 1:
                a[:] = np.maximum(z, 0.0)
            elif act == 2:
                for r in range(m):
                    for c in range(no):
                        a[r, c] = math.erf(z[r, c])
            else:
                for r in range(m):
                    for c in range(no):
                        a[r, c] = 1.0 / (1.0 + math.exp(-z[r, c]))
            zs.append(z)
            acts.append(a)
            off += no * ni + no
        zl = zs[n_layers - 1]
        tb = t[idx]
        loss = 0.0
        for r in range(m):
            for c in range(zl.shape[1]):
                v = zl[r, c]
                sp = max(v, 0.0) + math.log1p(math.exp(-abs(v)))
                loss += sp - tb[r, c] * v
        total += loss / m
        if not math.isfinite(loss):
            return total, it
        delta = (acts[n_layers] - tb) / m
        off_end = flat.shape[0]
        for k in range(n_layers - 1, -1, -1):
            ni, no = widths[k], widths[k + 1]
            start = off_end - (no * ni + no)
            w = flat[start:start + no * ni].reshape((no, ni))
            gw = delta.T @ acts[k]
            grad[start:start + no * ni] = gw.ravel()
            grad[start + no * ni:off_end] = delta.sum(axis=0)
            if k > 0:
                back = delta @ w
                zp = zs[k - 1]
                ap = acts[k]
                if act == 0:
                    back *= 1.0 - ap * ap
                elif act == 1:
                    for r in range(m):
                        for c in range(ni):
                            if zp[r, c] <= 0.0:
                                back[r, c] = 0.0
                elif act == 2:
                    for r in range(m):
                        for c in range(ni):
                            back[r, c] *= 1.1283791670955126 * math.exp(-zp[r, c] * zp[r, c])
                else:
                    back *= ap * (1.0 - ap)
                delta = back
            off_end = start
        for j in range(flat.shape[0]):
            g = grad[j]
            gsum[j] += g
            gsq[j] += g * g
            flat[j] -= lr * g
    return total, -1


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

@dataclass
class GradientStats:
    """Per epoch and weight layer: Frobenius norms of the batch-mean gradient and of
    its element-wise batch std, and their ratio."""
    iterations: np.ndarray
    mean_norm: np.ndarray
    std_norm: np.ndarray

    @property
    def snr(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.std_norm > 0, self.mean_norm / self.std_norm, np.nan)


@dataclass
class TrainRun:
    spec: NetworkSpec
    config: TrainConfig
    iters_per_epoch: int
    snapshots: dict[int, Params]
    grad_stats: GradientStats
    train_error: np.ndarray
    test_error: np.ndarray
    loss: np.ndarray
    msd: np.ndarray
    train_idx: np.ndarray = field(default=None, repr=False)

    @property
    def snapshot_iterations(self) -> list[int]:
        return sorted(self.snapshots)

    @property
    def epoch_iterations(self) -> np.ndarray:
        return self.grad_stats.iterations

    def save(self, directory) -> Path:
        d = Path(directory)
        (d / "snapshots").mkdir(parents=True, exist_ok=True)
        its = self.snapshot_iterations
        manifest = {
            "spec": asdict(self.spec), "config": asdict(self.config),
            "iters_per_epoch": self.iters_per_epoch, "snapshot_iterations": its,
            "n_params": int(next(iter(self.snapshots.values())).flat.size) if its else 0,
            "dtype": "<f8",
        }
        for it in its:
            self.snapshots[it].flat.astype("<f8").tofile(d / "snapshots" / f"{it:010d}.bin")
        if self.train_idx is not None:
            np.asarray(self.train_idx, dtype="<i8").tofile(d / "train_idx.bin")
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
        gs = self.grad_stats
        k = gs.mean_norm.shape[1]
        with open(d / "grad_stats.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration"] + [f"{q}_{j}" for j in range(k) for q in ("mean_norm", "std_norm")])
            for i, it in enumerate(gs.iterations):
                w.writerow([int(it)] + [repr(float(v)) for j in range(k)
                                        for v in (gs.mean_norm[i, j], gs.std_norm[i, j])])
        with open(d / "series.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "iteration", "train_error", "test_error", "loss", "msd"])
            for e in range(len(self.train_error)):
                w.writerow([e + 1, int(gs.iterations[e]), repr(float(self.train_error[e])),
                            repr(float(self.test_error[e])), repr(float(self.loss[e])),
                            repr(float(self.msd[e]))])
        return d

    @classmethod
    def load(cls, directory) -> "TrainRun":
        d = Path(directory)
        if not (d / "manifest.json").exists():
            raise FileNotFoundError(f"no train run manifest in {d}")
        man = json.loads((d / "manifest.json").read_text())
        spec = NetworkSpec(**man["spec"])
        cfg = man["config"]
        if cfg.get("snapshot_schedule") is not None:
            cfg["snapshot_schedule"] = tuple(cfg["snapshot_schedule"])
        config = TrainConfig(**cfg)
        snaps = {it: Params(np.fromfile(d / "snapshots" / f"{it:010d}.bin", dtype="<f8"),
                            spec.layer_widths) for it in man["snapshot_iterations"]}
        g = np.loadtxt(d / "grad_stats.csv", delimiter=",", skiprows=1, ndmin=2)
        s = np.loadtxt(d / "series.csv", delimiter=",", skiprows=1, ndmin=2)
        stats = GradientStats(g[:, 0].astype(np.int64), g[:, 1::2], g[:, 2::2])
        tidx = np.fromfile(d / "train_idx.bin", dtype="<i8") if (d / "train_idx.bin").exists() else None
        return cls(spec, config, man["iters_per_epoch"], snaps, stats,
                   s[:, 2], s[:, 3], s[:, 4], s[:, 5], tidx)


def iterations_per_epoch(n_train: int, batch_size: int) -> int:
    return max(1, math.ceil(n_train / batch_size))


def default_schedule(epochs: int, iters_per_epoch: int, n: int = 120) -> tuple[int, ...]:
    """Log-spaced snapshot iterations (epoch aligned, always including 0 and the end)."""
    if epochs == 0:
        return (0,)
    ep = np.unique(np.round(np.geomspace(1, epochs, n)).astype(int))
    return tuple([0] + [int(e) * iters_per_epoch for e in ep])


def _error(params: Params, x, labels, activation) -> float:
    if len(labels) == 0:
        return float("nan")
    out = forward(params, x, activation)[-1]
    return float(np.mean(np.argmax(out, axis=1) != labels))


def train(spec: NetworkSpec, config: TrainConfig, dataset: Dataset) -> TrainRun:
    """Minibatch SGD with batches drawn with replacement from the training split.

    Deterministic for a given (spec.seed, config): the batch sampler is seeded
    from ``spec.seed`` as well.
    """
    if dataset.x.shape[1] != spec.layer_widths[0]:
        raise ValueError(f"input width {dataset.x.shape[1]} != spec {spec.layer_widths[0]}")
    if spec.layer_widths[-1] != 2:
        raise ValueError("output layer must have 2 units (one-hot binary targets)")
    if config.batch_size > dataset.n_train:
        raise ValueError("batch_size exceeds training set size")
    params = init_params(spec)
    w0 = params.flat.copy()
    ipe = iterations_per_epoch(dataset.n_train, config.batch_size)
    schedule = config.snapshot_schedule or default_schedule(config.epochs, ipe, config.n_snapshots)
    pending = sorted(schedule)
    x_tr = np.ascontiguousarray(dataset.x[dataset.train_idx], dtype=float)
    t_tr = one_hot(dataset.labels[dataset.train_idx]).astype(float)
    x_te, y_te = dataset.x[dataset.test_idx], dataset.labels[dataset.test_idx]
    y_tr = dataset.labels[dataset.train_idx]
    widths = np.array(spec.layer_widths, dtype=np.int64)
    act = _ACT_CODE[spec.activation]
    rng = np.random.default_rng([spec.seed, 7])
    mask_layers = [(a, b) for a, b, _, _ in params.offsets()]

    snaps: dict[int, Params] = {}
    n_ep = config.epochs
    mean_norm = np.zeros((n_ep, spec.n_layers))
    std_norm = np.zeros((n_ep, spec.n_layers))
    its = np.zeros(n_ep, dtype=np.int64)
    tr_err, te_err, losses, msd = (np.zeros(n_ep) for _ in range(4))
    if pending and pending[0] == 0:
        snaps[0] = params.copy()
        pending.pop(0)
    it = 0
    for e in range(n_ep):
        batches = rng.integers(0, dataset.n_train, size=(ipe, config.batch_size))
        gsum = np.zeros_like(params.flat)
        gsq = np.zeros_like(params.flat)
        loss = 0.0
        pos = 0
        while pos < ipe:
            stop = ipe
            if pending and pending[0] < it + (ipe - pos):
                stop = pos + (pending[0] - it)
            l, bad = _sgd_steps(params.flat, widths, x_tr, t_tr, batches[pos:stop],
                                float(config.learning_rate), act, gsum, gsq)
            if bad >= 0 or not np.all(np.isfinite(params.flat)):
                raise TrainingDivergedError(it + max(bad, 0))
            loss += l
            it += stop - pos
            pos = stop
            if pending and pending[0] == it:
                snaps[it] = params.copy()
                pending.pop(0)
        mean = gsum / ipe
        var = np.maximum(gsq / ipe - mean * mean, 0.0)
        for k, (a, b) in enumerate(mask_layers):
            mean_norm[e, k] = np.linalg.norm(mean[a:b])
            std_norm[e, k] = math.sqrt(var[a:b].sum())
        its[e] = it
        losses[e] = loss / ipe
        tr_err[e] = _error(params, x_tr, y_tr, spec.activation)
        te_err[e] = _error(params, x_te, y_te, spec.activation)
        msd[e] = np.linalg.norm(params.flat - w0)
        if config.stop_train_error is not None and tr_err[e] <= config.stop_train_error:
            n = e + 1
            mean_norm, std_norm, its = mean_norm[:n], std_norm[:n], its[:n]
            tr_err, te_err, losses, msd = tr_err[:n], te_err[:n], losses[:n], msd[:n]
            break
    return TrainRun(spec, config, ipe, snaps, GradientStats(its, mean_norm, std_norm),
                    tr_err, te_err, losses, msd, np.asarray(dataset.train_idx))


def gradient_snr_series(run: TrainRun, layer: int, smooth: int | None = None):
    """(iterations, snr) for one weight layer; optional running-median smoothing.

    Epochs whose gradient std is zero have undefined SNR and are reported as NaN.
    """
    k = run.grad_stats.mean_norm.shape[1]
    if not 0 <= layer < k:
        raise IndexError(f"layer {layer} out of range [0, {k})")
    snr = run.grad_stats.snr[:, layer]
    if smooth and smooth > 1:
        snr = running_median(snr, smooth)
    return run.grad_stats.iterations.copy(), snr


def running_median(v: np.ndarray, window: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    h = window // 2
    out = np.empty_like(v)
    for i in range(len(v)):
        seg = v[max(0, i - h): i + h + 1]
        seg = seg[np.isfinite(seg)]
        out[i] = np.median(seg) if seg.size else np.nan
    return out


@dataclass(frozen=True)
class DiffusionFit:
    alpha: float
    gamma: float
    r2: float

    @property
    def ultra_slow(self) -> bool:
        """Poor power-law fit: a candidate for slower-than-power-law (e.g. logarithmic) spreading."""
        return self.r2 < 0.99


def fit_diffusion_exponent(iterations: Sequence[float], msd: Sequence[float],
                           window: tuple[float, float] | None = None) -> DiffusionFit:
    """Least-squares fit of log msd = log gamma + alpha log t inside ``window``."""
    t = np.asarray(iterations, dtype=float)
    y = np.asarray(msd, dtype=float)
    if window is not None:
        keep = (t >= window[0]) & (t <= window[1])
        t, y = t[keep], y[keep]
    if len(t) < 10:
        raise ValueError("need at least 10 points in the fit window")
    if np.any(y <= 0) or np.any(t <= 0):
        raise ValueError("MSD and times must be positive inside the window")
    lt, ly = np.log(t), np.log(y)
    alpha, c = np.polyfit(lt, ly, 1)
    resid = ly - (alpha * lt + c)
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return DiffusionFit(float(alpha), float(math.exp(c)), float(r2))
