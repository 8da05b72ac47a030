""" The worker/monitor game: utilities, detection probabilities and the honesty deposit bound.

A worker faking ``m`` of ``n`` computations saves ``c_c(n) - c_c(m)`` and is caught when any
of the monitor's ``p`` probes lands on a faked computation. Two detection models are
exposed:

- ``detection_prob_paper``: 1 - (1 - p/n)^m, each fake escaping each probe independently;
- ``detection_prob_exact``: 1 - C(n-m, p) / C(n, p), the probes being distinct.

The exact model dominates the independent one, so the deposit bound derived from the
latter also holds for the protocol as run.
"""
from dataclasses import dataclass, field
from fractions import Fraction
import math
from typing import Callable

from loguru import logger
import numpy as np
import pandas as pd
from scipy.special import gammaln

from .exceptions import DomainError
from .utilities import derive_seed, test_fraction_counts


def linear_cost(c_total, n):
    """ c_c(x) = c * x / n. """
    return lambda x: c_total * x / n


@dataclass(frozen=True)
class GameParams:
    """ Parameters of one stage game.

    Attributes
    ----------
    n: int
        Computations in the stage.
    p: int
        Probes the monitor draws.
    m: int
        Computations the worker fakes.
    B: float
        Worker benefit from the round's result.
    B_prime: float
        Coalition (coordinator and monitor) benefit.
    d: float
        Deposit.
    penalty: float
        Coalition penalty for an undetected fake.
    c_total: float
        Cost c = c_c(n) of honest execution.
    c_c: callable, optional
        Execution cost function, linear in the number of computations by default.
    c_t: callable, optional
        Testing cost function of p, zero by default.
    """
    n: int
    p: int
    m: int = 0
    B: float = 0.0
    B_prime: float = 0.0
    d: float = 0.0
    penalty: float = 0.0
    c_total: float = 1.0
    c_c: Callable = field(default=None, repr=False)
    c_t: Callable = field(default=None, repr=False)

    def __post_init__(self):
        test_fraction_counts(self.n, self.p, self.m)
        if self.d < 0:
            raise DomainError("Deposit must be non-negative.")
        if self.c_c is None:
            object.__setattr__(self, "c_c", linear_cost(self.c_total, self.n))
        if self.c_t is None:
            object.__setattr__(self, "c_t", lambda p: 0.0)

    def with_m(self, m):
        return GameParams(self.n, self.p, m, self.B, self.B_prime, self.d, self.penalty, self.c_total,
                          self.c_c, self.c_t)


@dataclass(frozen=True)
class UtilityOutcome:
    u_uw: float
    u_cstlm: float
    detected: bool


#region Detection probabilities
def detection_prob_paper(n, p, m):
    """ 1 - (1 - p/n)^m. """
    test_fraction_counts(n, p, m)
    return 1.0 - (1.0 - p / n) ** m


def _log_comb(a, b):
    return gammaln(a + 1) - gammaln(b + 1) - gammaln(a - b + 1)


def detection_prob_exact(n, p, m):
    """ 1 - C(n-m, p) / C(n, p), and 1 when p > n - m.

    Evaluated in log space; for n <= 64 the exact rational value is used.
    """
    test_fraction_counts(n, p, m)
    if p > n - m:
        return 1.0
    if n <= 64:
        return float(detection_prob_exact_fraction(n, p, m))
    return float(-np.expm1(_log_comb(n - m, p) - _log_comb(n, p)))


def detection_prob_exact_fraction(n, p, m):
    test_fraction_counts(n, p, m)
    if p > n - m:
        return Fraction(1)
    return 1 - Fraction(math.comb(n - m, p), math.comb(n, p))


def simulate_detection(n, p, m, trials, seed, chunk_elements=2_000_000):
    """ Fraction of trials in which ``p`` distinct uniform probes hit one of ``m`` faked indices.

    Faked indices are taken as ``0..m-1``; probes are uniform, so the choice does not matter.
    Deterministic given ``seed``.
    """
    test_fraction_counts(n, p, m)
    if trials < 1:
        raise DomainError("trials must be >= 1.")
    if m == 0 or p == 0:
        return 0.0
    if p == n:
        return 1.0
    rng = np.random.default_rng(seed)
    chunk = max(1, chunk_elements // n)
    hits, done = 0, 0
    while done < trials:
        size = min(chunk, trials - done)
        keys = rng.random((size, n))
        probes = np.argpartition(keys, p - 1, axis=1)[:, :p]
        hits += int(np.count_nonzero((probes < m).any(axis=1)))
        done += size
    return hits / trials
#endregion


#region Deposit bounds
def min_deposit(c, p):
    """ Smallest deposit making honesty the best response: c / (1 - e^-(p-1)).

    Raises
    ------
    DomainError
        p < 2.
    """
    if p < 2:
        raise DomainError(f"The deposit bound needs at least 2 probes, got {p}.")
    return c / -math.expm1(-(p - 1))


def alternative_min_deposit(c):
    """ Deposit c / (1 - e^-2) from the per-fake bound detection >= (m/n)(1 - e^-2) when p >= 2. """
    return c / -math.expm1(-2)


def theorem_bounds_check(n, p):
    """ Checks the two cases behind the deposit bound for every m in [1, n].

    For m <= floor((1 - 1/p) n) the detection probability exceeds m/n; above it, the
    probability exceeds 1 - e^-(p-1).

    Raises
    ------
    DomainError
        p < 2 or n < p.
    """
    if p < 2 or n < p:
        raise DomainError(f"Need p >= 2 and n >= p, got n={n}, p={p}.")
    m = np.arange(1, n + 1)
    prob = -np.expm1(m * np.log1p(-p / n)) if p < n else np.ones(n)
    threshold = (n * (p - 1)) // p
    low = m <= threshold
    case_one = bool(np.all(prob[low] > m[low] / n))
    case_two = bool(np.all(prob[~low] > -math.expm1(-(p - 1))))
    return case_one and case_two
#endregion


#region Utilities
def utilities(params, detected):
    """ Player utilities for one play of the stage game. """
    paid = params.c_c(params.n) - params.c_c(params.m)
    if detected:
        u_uw = -params.d - paid
    else:
        u_uw = params.B - paid
    if params.m == 0:
        u_cstlm = params.B_prime - params.c_t(params.p)
    elif detected:
        u_cstlm = -params.c_t(params.p) + params.d
    else:
        u_cstlm = -params.penalty - params.c_t(params.p)
    return UtilityOutcome(u_uw=u_uw, u_cstlm=u_cstlm, detected=bool(detected))


def expected_utility_uw(params, prob):
    """ Expected worker utility when faking ``params.m`` is detected with probability ``prob``. """
    caught = utilities(params, True).u_uw
    free = utilities(params, False).u_uw
    return prob * caught + (1 - prob) * free


def _exact_expected_uw(params, prob, m):
    B, d = Fraction(params.B), Fraction(params.d)
    paid = Fraction(params.c_c(params.n)) - Fraction(params.c_c(m))
    return (1 - prob) * B - prob * d - paid


def best_response(params):
    """ The m maximising the worker's expected utility, in exact arithmetic; ties go to the smaller m.

    Detection follows the independent-probe model.
    """
    n, p = params.n, params.p
    escape = 1 - Fraction(p, n)
    survive = Fraction(1)
    best_m, best_u = 0, _exact_expected_uw(params, Fraction(0), 0)
    for m in range(1, n + 1):
        survive *= escape
        u = _exact_expected_uw(params, 1 - survive, m)
        if u > best_u:
            best_m, best_u = m, u
    return best_m


def honesty_report(params):
    """ Whether faking any m >= 1 is worse in expectation than honesty, under both detection models. """
    report = {"hypothesis": params.p >= 2, "deposit_bound": None, "deposit_ok": False,
              "paper": False, "exact": False, "violations": []}
    if params.p < 2:
        return report
    report["deposit_bound"] = min_deposit(params.c_total, params.p)
    report["deposit_ok"] = params.d >= report["deposit_bound"]
    honest = expected_utility_uw(params.with_m(0), 0.0)
    for model, prob_fn in (("paper", detection_prob_paper), ("exact", detection_prob_exact)):
        ok = True
        for m in range(1, params.n + 1):
            u = expected_utility_uw(params.with_m(m), prob_fn(params.n, params.p, m))
            if u > honest:
                ok = False
                report["violations"].append({"model": model, "m": m, "u_uw": u, "honest": honest})
                break
        report[model] = ok
    return report


def honesty_enforced(params):
    """ True iff p >= 2, d meets the deposit bound and no m >= 1 beats honesty in expectation. """
    report = honesty_report(params)
    return bool(report["hypothesis"] and report["deposit_ok"] and report["paper"])
#endregion


#region Tables
def utility_table(params):
    """ Expected worker utility for every m under both detection models. """
    rows = []
    for m in range(params.n + 1):
        q_paper = detection_prob_paper(params.n, params.p, m)
        q_exact = detection_prob_exact(params.n, params.p, m)
        rows.append([m, q_paper, q_exact,
                     expected_utility_uw(params.with_m(m), q_paper),
                     expected_utility_uw(params.with_m(m), q_exact)])
    return pd.DataFrame(columns=["m", "prob_paper", "prob_exact", "u_uw_paper", "u_uw_exact"], data=rows)


def detection_table(grid, trials, seed):
    """ Analytic and simulated detection for each (n, p, m) of ``grid``.

    Each row is simulated with a seed derived from ``seed`` and the row's (n, p, m).
    """
    rows = []
    for n, p, m in grid:
        empirical = simulate_detection(n, p, m, trials, derive_seed(seed, n, p, m))
        bound = min(m / n, -math.expm1(-(p - 1))) if p >= 1 else 0.0
        rows.append([n, p, m, detection_prob_paper(n, p, m), detection_prob_exact(n, p, m), empirical, bound])
    logger.debug(f"Simulated {len(rows)} detection points with {trials} trials each")
    return pd.DataFrame(columns=["n", "p", "m", "prob_paper", "prob_exact", "empirical", "bound"], data=rows)
#endregion
