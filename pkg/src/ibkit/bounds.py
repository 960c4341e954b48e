"""Input-compression generalization bound and the compression / sample-size
exchange rate it implies. All logarithms are base 2."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class CompressionBoundInput:
    i_xt: float          # bits
    m: int               # training-set size
    delta: float         # confidence

    def __post_init__(self):
        if not self.i_xt >= 0:
            raise ValueError("I(X;T) must be nonnegative")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")


def input_compression_bound(inp: CompressionBoundInput) -> float:
    """Upper bound on the squared generalization gap:
    eps^2 <= (2^I(X;T) + log2(2/delta)) / (2m)."""
    return (2.0 ** inp.i_xt + math.log2(2.0 / inp.delta)) / (2.0 * inp.m)


def generalization_gap_bound(i_xt: float, m: int, delta: float) -> float:
    """eps, the square root of :func:`input_compression_bound`."""
    return math.sqrt(input_compression_bound(CompressionBoundInput(i_xt, m, delta)))


@dataclass(frozen=True)
class SampleEquivalence:
    ratio: float                 # bound(I - M, m) / bound(I, 2^M m)
    compressed_bound: float      # eps^2 after M bits of compression
    enlarged_bound: float        # eps^2 with 2^M times more samples
    dominant: bool               # 2^(I-M) dominates log2(2/delta)
    dominance: float             # 2^(I-M) / log2(2/delta)


def sample_equivalence_check(i_xt: float, m: int, extra_bits: float, delta: float,
                             dominance_threshold: float = 100.0) -> SampleEquivalence:
    """Compare M bits of extra compression with a 2^M-fold larger sample.

    The two bounds agree when the 2^(I-M) term dominates the confidence term;
    ``dominant`` is False (the regime flag) when that ratio is below
    ``dominance_threshold``.
    """
    if extra_bits < 0:
        raise ValueError("M must be nonnegative")
    if extra_bits > i_xt:
        raise ValueError("cannot compress more than I(X;T) bits")
    a = input_compression_bound(CompressionBoundInput(i_xt - extra_bits, m, delta))
    b = input_compression_bound(CompressionBoundInput(i_xt, m * 2.0 ** extra_bits, delta))
    dom = 2.0 ** (i_xt - extra_bits) / math.log2(2.0 / delta) if delta < 1 else math.inf
    return SampleEquivalence(a / b, a, b, dom >= dominance_threshold, dom)
