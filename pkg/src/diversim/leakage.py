"""Timing-channel capacity from execution-time samples (Blahut-Arimoto)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

MAX_OUTPUTS = 1 << 16
DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 10**5


@dataclass
class TimingSamples:
    labels: list[str]
    samples: dict[str, list[int]]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ValueError("need at least two secret inputs")
        for label in self.labels:
            if not self.samples.get(label):
                raise ValueError(f"no samples for input {label!r}")

    @classmethod
    def from_mapping(cls, samples: Mapping[str, Sequence[int]]) -> "TimingSamples":
        return cls(list(samples), {k: list(v) for k, v in samples.items()})


@dataclass
class ChannelMatrix:
    inputs: list[str]
    outputs: list[int]
    rows: np.ndarray  # shape (len(inputs), len(outputs))


@dataclass
class CapacityResult:
    capacity_bits: float
    iterations: int
    bound_gap: float
    converged: bool = True
    input_distribution: list[float] | None = None

    def to_dict(self) -> dict:
        return {
            "capacity_bits": self.capacity_bits,
            "iterations": self.iterations,
            "bound_gap": self.bound_gap,
            "converged": self.converged,
        }


def build_channel(s: TimingSamples) -> ChannelMatrix:
    """Empirical conditional distribution of cycle counts per secret input."""
    outputs = sorted({v for label in s.labels for v in s.samples[label]})
    if len(outputs) > MAX_OUTPUTS:
        raise ValueError(f"{len(outputs)} distinct observations exceed the {MAX_OUTPUTS} cap")
    col = {v: j for j, v in enumerate(outputs)}
    rows = np.zeros((len(s.labels), len(outputs)))
    for i, label in enumerate(s.labels):
        obs = s.samples[label]
        if not obs:
            raise ValueError(f"no samples for input {label!r}")
        idx = np.fromiter((col[v] for v in obs), dtype=np.int64, count=len(obs))
        rows[i] = np.bincount(idx, minlength=len(outputs)) / len(obs)
    return ChannelMatrix(list(s.labels), outputs, rows)


def ba_capacity(W, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> CapacityResult:
    """Capacity of a discrete memoryless channel by Blahut-Arimoto.

    ``W`` is a row-stochastic matrix (or a :class:`ChannelMatrix`).  Iterates
    until the upper bound ``max_i D_i`` and lower bound ``sum_i p_i D_i``
    (nats) are within ``tol``; returns the lower bound in bits.
    """
    if isinstance(W, ChannelMatrix):
        W = W.rows
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] < 1:
        raise ValueError("channel must be a non-empty 2-D matrix")
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be positive and max_iter at least 1")
    if np.any(W < 0) or not np.allclose(W.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("channel rows must be probability vectors")

    # drop all-zero columns; they carry no mass for any input
    W = W[:, W.sum(axis=0) > 0]
    m = W.shape[0]
    positive = W > 0
    logW = np.zeros_like(W)
    np.log(W, out=logW, where=positive)
    p = np.full(m, 1.0 / m)
    lower = upper = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        q = p @ W
        logq = np.log(q, out=np.zeros_like(q), where=q > 0)
        # D_i = KL(W_i || q), with 0 log 0 := 0
        D = np.where(positive, W * (logW - logq), 0.0).sum(axis=1)
        lower = float(p @ D)
        upper = float(D.max())
        if upper - lower < tol:
            break
        p = p * np.exp(D - upper)
        p /= p.sum()
    else:
        return CapacityResult(_bits(lower, m), it, upper - lower, False, p.tolist())
    return CapacityResult(_bits(lower, m), it, upper - lower, True, p.tolist())


def _bits(nats: float, m: int) -> float:
    # rounding can push the bound a few ulps outside [0, log2 m]
    return min(max(nats, 0.0) / math.log(2), math.log2(m))


def capacity_from_samples(s: TimingSamples | Mapping[str, Sequence[int]], **kw) -> CapacityResult:
    if not isinstance(s, TimingSamples):
        s = TimingSamples.from_mapping(s)
    return ba_capacity(build_channel(s), **kw)


def capacity_reduction(baseline_bits: float, treated_bits: float) -> float:
    """Percent of the baseline capacity removed by a countermeasure."""
    if baseline_bits <= 0:
        raise ValueError("baseline capacity must be positive")
    return 100.0 * (1.0 - treated_bits / baseline_bits)
