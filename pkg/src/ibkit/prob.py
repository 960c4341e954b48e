"""Finite-alphabet probability objects and information measures (bits)."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

VALID_TOL = 1e-12
RENORM_TOL = 1e-9


class InvalidDistributionError(ValueError):
    pass


class SupportMismatchError(ValueError):
    """q(i) = 0 where p(i) > 0 in a KL divergence."""


def _normalized(a: np.ndarray, axis=None, what: str = "distribution") -> np.ndarray:
    a = np.array(a, dtype=float)
    if a.size == 0:
        raise InvalidDistributionError(f"empty {what}")
    if not np.all(np.isfinite(a)):
        raise InvalidDistributionError(f"non-finite entries in {what}")
    if np.any(a < 0):
        raise InvalidDistributionError(f"negative entries in {what}")
    s = a.sum(axis=axis, keepdims=axis is not None)
    if np.any(np.abs(s - 1.0) > RENORM_TOL):
        raise InvalidDistributionError(f"{what} does not sum to 1 (sum={np.ravel(s)[:4]})")
    return a / s


@dataclass(frozen=True)
class DiscreteDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = _normalized(self.probs)
        if p.ndim != 1:
            raise InvalidDistributionError("probs must be a vector")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.probs.shape[0]


@dataclass(frozen=True)
class JointDistribution:
    table: np.ndarray

    def __post_init__(self):
        t = _normalized(self.table, what="joint table")
        if t.ndim != 2:
            raise InvalidDistributionError("joint table must be a matrix")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def shape(self):
        return self.table.shape

    def marginal_x(self) -> np.ndarray:
        return self.table.sum(axis=1)

    def marginal_y(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def conditional_y_given_x(self) -> "ConditionalDistribution":
        px = self.marginal_x()
        rows = np.where(px[:, None] > 0, self.table / np.where(px > 0, px, 1.0)[:, None],
                        1.0 / self.table.shape[1])
        return ConditionalDistribution(rows)

    @classmethod
    def from_channel(cls, prior, channel) -> "JointDistribution":
        p = _as_probs(prior)
        w = _as_rows(channel)
        return cls(p[:, None] * w)


@dataclass(frozen=True)
class ConditionalDistribution:
    """Row ``i`` is a distribution over the conditioned variable's codomain.

    ``unreachable`` marks rows whose conditioning value has zero probability
    (their contents are a placeholder, see :func:`bayes_invert`).
    """

    rows: np.ndarray
    unreachable: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        r = _normalized(self.rows, axis=1, what="conditional rows")
        if r.ndim != 2:
            raise InvalidDistributionError("conditional rows must be a matrix")
        r.setflags(write=False)
        object.__setattr__(self, "rows", r)

    @property
    def shape(self):
        return self.rows.shape


DistLike = Union[DiscreteDistribution, np.ndarray, list, tuple]


def _as_probs(p) -> np.ndarray:
    if isinstance(p, DiscreteDistribution):
        return p.probs
    return DiscreteDistribution(p).probs


def _as_table(j) -> np.ndarray:
    if isinstance(j, JointDistribution):
        return j.table
    return JointDistribution(j).table


def _as_rows(c) -> np.ndarray:
    if isinstance(c, ConditionalDistribution):
        return c.rows
    return ConditionalDistribution(c).rows


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log2(p[nz])
    return out


def entropy(p: DistLike) -> float:
    """Shannon entropy in bits with 0 log 0 = 0."""
    return float(max(-_xlogx(_as_probs(p)).sum(), 0.0))


def kl_divergence(p: DistLike, q: DistLike) -> float:
    p = _as_probs(p)
    q = _as_probs(q)
    if p.shape != q.shape:
        raise ValueError(f"support sizes differ: {p.shape} vs {q.shape}")
    nz = p > 0
    if np.any(q[nz] == 0):
        raise SupportMismatchError("p is not absolutely continuous with respect to q")
    return float(max(np.sum(p[nz] * (np.log2(p[nz]) - np.log2(q[nz]))), 0.0))


def joint_entropy(j) -> float:
    return float(max(-_xlogx(_as_table(j)).sum(), 0.0))


def conditional_entropy(j) -> float:
    """H(X|Y) for a joint indexed (x, y)."""
    t = _as_table(j)
    return max(joint_entropy(t) - entropy(t.sum(axis=0)), 0.0)


def mutual_information(j) -> float:
    """I(X;Y) = D[p(x,y) || p(x)p(y)] in bits."""
    t = _as_table(j)
    return mi_from_table(t)


def mi_from_table(t: np.ndarray) -> float:
    """Unvalidated MI of a nonnegative table summing to one (hot path)."""
    px = t.sum(axis=1)
    py = t.sum(axis=0)
    nz = t > 0
    outer = np.outer(px, py)
    return float(max(np.sum(t[nz] * np.log2(t[nz] / outer[nz])), 0.0))


def variation_distance(p: DistLike, q: DistLike) -> float:
    """L1 distance |p - q|_1."""
    p = _as_probs(p)
    q = _as_probs(q)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(np.abs(p - q).sum())


def bayes_invert(prior: DistLike, channel) -> tuple[ConditionalDistribution, DiscreteDistribution]:
    """Posterior p(x|t) and marginal p(t) from p(x) and the channel p(t|x).

    Rows of the posterior whose ``t`` has zero marginal mass are filled with
    the prior and flagged in ``posterior.unreachable``.
    """
    px = _as_probs(prior)
    w = _as_rows(channel)
    if w.shape[0] != px.shape[0]:
        raise ValueError(f"channel has {w.shape[0]} rows, prior has {px.shape[0]} entries")
    joint = px[:, None] * w
    pt = joint.sum(axis=0)
    unreachable = pt <= 0
    safe = np.where(unreachable, 1.0, pt)
    post = (joint / safe).T
    post[unreachable] = px
    return (ConditionalDistribution(post, unreachable=unreachable),
            DiscreteDistribution(pt / pt.sum()))


def compose(channel_a, channel_b) -> np.ndarray:
    """Rows of p(z|x) = sum_y p(y|x) p(z|y)."""
    return _as_rows(channel_a) @ _as_rows(channel_b)


def load_joint_csv(path) -> JointDistribution:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return JointDistribution(np.array(rows))


def save_joint_csv(joint, path) -> None:
    t = _as_table(joint)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in t:
            w.writerow([repr(float(v)) for v in row])


def mi_from_sparse(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray,
                   shape: tuple[int, int] | None = None) -> float:
    """MI (bits) of a joint given as nonzero entries (row, col, prob).

    Summation follows the order of the entries as given, so two callers that
    list the same entries in the same order get identical results.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    if shape is None:
        shape = (int(rows.max()) + 1, int(cols.max()) + 1)
    pr = np.bincount(rows, weights=vals, minlength=shape[0])
    pc = np.bincount(cols, weights=vals, minlength=shape[1])
    nz = vals > 0
    v = vals[nz]
    return float(max(np.sum(v * np.log2(v / (pr[rows[nz]] * pc[cols[nz]]))), 0.0))
