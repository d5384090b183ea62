"""Shard-formation probability math.

Everything here is a pure function of its inputs.  The central quantity is
the hypergeometric tail probability that a randomly sampled shard of size
``m`` (drawn without replacement from ``n`` nodes of which a fraction ``s``
are Byzantine) contains more than a fraction ``f`` of Byzantine members.
From it we derive the minimum shard size meeting a ``2**-lambda`` failure
bound, the probability a fresh shard preserves liveness, the availability
and recovery-cost conversions, and the ordering-shard bottleneck estimate.

Two numeric backends are provided.  The ``exact`` backend works in
arbitrary-precision rationals and doubles as the oracle; the ``log``
backend works in log-space floats and is the fast default.  Golden tests
run on both.

Boundary conventions (all configurable, defaults chosen to reproduce the
published reference tables integer-exactly; see the keyword arguments):

* Byzantine population ``B = floor(n * s)``.
* Failure tail counts ``x > m*f`` strictly, i.e. starts at
  ``floor(m*f) + 1``.  ``tail="ceil"`` starts at ``ceil(m*f)`` instead,
  which only differs when ``m*f`` is an exact integer.
* The liveness query treats a shard with up to ``ceil(m*f_L)`` Byzantine
  members as live (``tail="above_ceil"``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Literal, Union

Backend = Literal["log", "exact"]
Tail = Literal["strict", "ceil", "above_ceil"]
ByzRounding = Literal["floor", "nearest", "ceil"]

FractionLike = Union[Fraction, int, float, str]


class SizingError(ValueError):
    """Parameter domain violation in a sizing query."""


class InfeasibleSizeError(SizingError):
    """No shard size up to ``n`` meets the requested failure bound."""

    def __init__(self, message: str, best_pr_fau: float):
        super().__init__(message)
        self.best_pr_fau = best_pr_fau


def as_fraction(x: FractionLike) -> Fraction:
    """Normalise a ratio given as float/str/int to an exact Fraction.

    Floats go through their decimal repr so that e.g. ``0.3`` means 3/10,
    not the nearest binary double.  This matters whenever ``m * f`` lands
    exactly on an integer.
    """
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


@dataclass(frozen=True)
class SizingParams:
    """Population parameters for one sizing query.

    ``f`` plays the role of the safety threshold, the liveness threshold or
    the plain security threshold depending on the query it is passed to.
    """

    n: int
    s: FractionLike
    f: FractionLike
    lambda_bits: int

    def __post_init__(self):
        if self.n < 1:
            raise SizingError(f"n must be >= 1, got {self.n}")
        if self.lambda_bits < 1:
            raise SizingError(f"lambda_bits must be >= 1, got {self.lambda_bits}")
        s = as_fraction(self.s)
        f = as_fraction(self.f)
        if not (0 <= s < 1):
            raise SizingError(f"s must be in [0, 1), got {self.s}")
        if not (0 < f < 1):
            raise SizingError(f"f must be in (0, 1), got {self.f}")

    @property
    def s_frac(self) -> Fraction:
        return as_fraction(self.s)

    @property
    def f_frac(self) -> Fraction:
        return as_fraction(self.f)

    def byzantine_count(self, rounding: ByzRounding = "floor") -> int:
        """Assumed number of Byzantine nodes in the population."""
        ns = Fraction(self.n) * self.s_frac
        if rounding == "floor":
            b = math.floor(ns)
        elif rounding == "ceil":
            b = math.ceil(ns)
        elif rounding == "nearest":
            b = math.floor(ns + Fraction(1, 2))
        else:
            raise SizingError(f"unknown byz rounding {rounding!r}")
        if not (0 <= b <= self.n):
            raise SizingError(f"Byzantine count {b} outside [0, {self.n}]")
        return b


@dataclass(frozen=True)
class SizingResult:
    """Minimum shard size and companions.

    ``k`` ignores the ordering-shard subtraction on purpose: it is the
    lower-bound shard count convention used throughout the comparisons.
    """

    m_star: int
    pr_fau_at_m_star: float
    k: int


def _tail_start(m: int, f: Fraction, tail: Tail) -> int:
    mf = Fraction(m) * f
    if tail == "strict":
        return math.floor(mf) + 1
    if tail == "ceil":
        return math.ceil(mf)
    if tail == "above_ceil":
        return math.ceil(mf) + 1
    raise SizingError(f"unknown tail mode {tail!r}")


def _pr_fau_exact(n: int, b: int, xmin: int, m: int) -> Fraction:
    hi = min(m, b)
    if xmin > hi:
        return Fraction(0)
    num = 0
    for x in range(xmin, hi + 1):
        num += math.comb(b, x) * math.comb(n - b, m - x)
    return Fraction(num, math.comb(n, m))


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _pr_fau_log(n: int, b: int, xmin: int, m: int) -> float:
    """Tail probability computed with log-gamma binomials and a log-sum-exp."""
    hi = min(m, b)
    if xmin > hi:
        return 0.0
    denom = _log_comb(n, m)
    logs = []
    for x in range(xmin, hi + 1):
        if m - x > n - b:
            continue
        logs.append(_log_comb(b, x) + _log_comb(n - b, m - x) - denom)
    if not logs:
        return 0.0
    peak = max(logs)
    acc = sum(math.exp(v - peak) for v in logs)
    return math.exp(peak) * acc if peak < 0 else min(1.0, math.exp(peak + math.log(acc)))


def pr_fau(
    params: SizingParams,
    m: int,
    *,
    backend: Backend = "log",
    tail: Tail = "strict",
    byz_rounding: ByzRounding = "floor",
) -> Union[float, Fraction]:
    """Probability that an m-node shard holds more than a fraction f of
    Byzantine members.

    Returns a Fraction on the exact backend and a float on the log backend.
    """
    if not (1 <= m <= params.n):
        raise SizingError(f"shard size m={m} outside [1, {params.n}]")
    b = params.byzantine_count(byz_rounding)
    xmin = _tail_start(m, params.f_frac, tail)
    if backend == "exact":
        return _pr_fau_exact(params.n, b, xmin, m)
    if backend == "log":
        return _pr_fau_log(params.n, b, xmin, m)
    raise SizingError(f"unknown backend {backend!r}")


def pr_liveness(
    params: SizingParams,
    m: int,
    *,
    backend: Backend = "log",
    tail: Tail = "above_ceil",
    byz_rounding: ByzRounding = "floor",
) -> Union[float, Fraction]:
    """Probability a sampled m-node shard keeps liveness, i.e. carries no
    more than ``ceil(m * f_L)`` Byzantine members under the default tail.

    ``params.f`` is read as the liveness threshold here.  Complement of
    :func:`pr_fau` at the same tail, so the two sum to one exactly on the
    exact backend.
    """
    p = pr_fau(params, m, backend=backend, tail=tail, byz_rounding=byz_rounding)
    if backend == "exact":
        return Fraction(1) - p
    return 1.0 - p


def min_shard_size(
    params: SizingParams,
    *,
    backend: Backend = "log",
    tail: Tail = "strict",
    byz_rounding: ByzRounding = "floor",
) -> SizingResult:
    """Smallest m with ``pr_fau(m) <= 2**-lambda``.

    Linear scan from 1 with early exit.  The hypergeometric tail is not
    globally monotone in m (the integer threshold steps produce a sawtooth),
    so the scan takes the first satisfying size, matching the reference
    tables.
    """
    lam = params.lambda_bits
    b = params.byzantine_count(byz_rounding)
    f = params.f_frac
    best: Union[float, Fraction, None] = None
    if backend == "exact":
        bound_num = 1
        for m in range(1, params.n + 1):
            xmin = _tail_start(m, f, tail)
            hi = min(m, b)
            num = 0
            for x in range(xmin, hi + 1):
                num += math.comb(b, x) * math.comb(params.n - b, m - x)
            denom = math.comb(params.n, m)
            # integer comparison: num / denom <= 2**-lam
            if num * (bound_num << lam) <= denom:
                pr = Fraction(num, denom)
                return SizingResult(m, float(pr), params.n // m)
            pr = Fraction(num, denom)
            if best is None or pr < best:
                best = pr
    else:
        bound = 2.0 ** (-lam)
        for m in range(1, params.n + 1):
            xmin = _tail_start(m, f, tail)
            pr = _pr_fau_log(params.n, b, xmin, m)
            if pr <= bound:
                return SizingResult(m, pr, params.n // m)
            if best is None or pr < best:
                best = pr
    raise InfeasibleSizeError(
        f"no shard size up to n={params.n} reaches pr_fau <= 2**-{lam}; "
        f"smallest achieved pr_fau was {float(best) if best is not None else 1.0:.3e}",
        float(best) if best is not None else 1.0,
    )


@dataclass(frozen=True)
class AvailabilityResult:
    """Downtime implied by P-probabilistic liveness.

    The yearly rate is interval-independent; the per-interval figure is the
    expected downtime accumulated over one reconfiguration interval.
    """

    downtime_years_per_year: float
    per_interval_downtime_years: float


def availability_from_liveness(p: float, reconfig_interval_years: float = 1.0) -> AvailabilityResult:
    """Convert liveness probability p into expected downtime.

    The interval length cancels in the yearly rate: (1-p)*k shards are down
    for T years each, amortised over k shards and 1/T intervals per year.
    """
    if not (0.0 <= p <= 1.0):
        raise SizingError(f"probability must be in [0, 1], got {p}")
    if reconfig_interval_years <= 0:
        raise SizingError("reconfig interval must be positive")
    return AvailabilityResult(
        downtime_years_per_year=1.0 - p,
        per_interval_downtime_years=(1.0 - p) * reconfig_interval_years,
    )


def recovery_cost_expectation(p: float, sync_hours: float) -> float:
    """Expected per-shard recovery cost in hours: sync_hours * (1 - p)."""
    if not (0.0 <= p <= 1.0):
        raise SizingError(f"probability must be in [0, 1], got {p}")
    return sync_hours * (1.0 - p)


def bottleneck_ratio(
    k: int,
    block_txs: int = 5000,
    tx_bytes: int = 512,
    digest_bytes: int = 32,
    sig_bytes: int = 96,
) -> Fraction:
    """Per-certificate data handled by the ordering shard over the data
    handled by a processing shard, with k processing shards.

    Ordering side per certificate: (k-1)/8 bytes of aggregated vote bits,
    one execution-block digest, k-1 batch digests, and the round number and
    aggregate signature amortised over k certificates.  Processing side:
    the certificate digests plus the full transaction payload.
    """
    num = (
        Fraction(k - 1, 8)
        + digest_bytes
        + digest_bytes * (k - 1)
        + Fraction(8, k)
        + Fraction(sig_bytes, k)
    )
    den = Fraction(digest_bytes * k + block_txs * tx_bytes)
    return num / den


def bottleneck_shards(
    block_txs: int = 5000,
    tx_bytes: int = 512,
    digest_bytes: int = 32,
    sig_bytes: int = 96,
    k_max: int = 10**7,
) -> int:
    """Smallest shard count k at which the ordering shard handles at least
    a 1/k share of the system's data volume, i.e. stops being under-loaded
    relative to a processing shard.
    """
    if min(block_txs, tx_bytes, digest_bytes, sig_bytes) < 0:
        raise SizingError("byte sizes must be non-negative")
    k = 1
    while bottleneck_ratio(k, block_txs, tx_bytes, digest_bytes, sig_bytes) < Fraction(1, k):
        k += 1
        if k > k_max:
            raise SizingError(f"no bottleneck threshold found up to k={k_max}")
    return k


@dataclass(frozen=True)
class ShardPlan:
    """Joint sizing of the ordering shard and the processing shards."""

    ordering_size: int
    processing_size: int
    shard_count: int
    f_s: Fraction
    f_l: Fraction


def plan_shards(
    n: int,
    s: FractionLike,
    lambda_bits: int,
    f_l_target: FractionLike,
    *,
    epsilon: FractionLike = Fraction(1, 100),
    backend: Backend = "log",
) -> ShardPlan:
    """Size both shard kinds for one deployment.

    The ordering shard runs quorum consensus and is sized at f = 1/3; the
    processing shards are sized at the safety threshold implied by the
    requested liveness threshold, f_S = 1 - f_L - epsilon.
    """
    f_l = as_fraction(f_l_target)
    eps = as_fraction(epsilon)
    f_s = Fraction(1) - f_l - eps
    if not (0 < f_s < 1) or f_s + f_l >= 1:
        raise SizingError(f"infeasible thresholds: f_S={f_s}, f_L={f_l}")
    ordering = min_shard_size(
        SizingParams(n=n, s=s, f=Fraction(1, 3), lambda_bits=lambda_bits), backend=backend
    )
    processing = min_shard_size(
        SizingParams(n=n, s=s, f=f_s, lambda_bits=lambda_bits), backend=backend
    )
    return ShardPlan(
        ordering_size=ordering.m_star,
        processing_size=processing.m_star,
        shard_count=processing.k,
        f_s=f_s,
        f_l=f_l,
    )
