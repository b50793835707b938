"""Per-unit discrete Markov representation of the outcome process.

States are the unit's distinct observed outcomes. The CDF matrix
Q[j, k] = Lambda(-x_k' beta_i(y^j)) (x_k = (1, y^k)) is monotonized by
sorting each column (fixed previous state) across thresholds; column
first-differences give a column-stochastic transition matrix, from which
ergodic vectors, mobility probabilities and recurrence times follow.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .counterfactual import DistributionEstimate
from .drfit import ST_OK, FitOptions, fit_unit_states_field
from .links import get_link
from .panel import PanelError, ThresholdGrid, UnitDesign

logger = logging.getLogger(__name__)


@dataclass
class UnitMarkovChain:
    """State support, monotonized transition matrix and ergodic vector.

    ``P[j, k]`` is the probability of moving to state j given previous state
    k (columns sum to one). ``flag`` is set when no unique ergodic vector
    exists (reducible chain) or an input fit was missing.
    """

    unit_id: object
    states: np.ndarray  # (K,)
    Q: np.ndarray  # (K, K) monotonized CDF columns
    P: np.ndarray  # (K, K)
    pi: Optional[np.ndarray]
    flag: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.flag is None

    def stationary_cdf(self, y: float) -> float:
        return float(self.pi[self.states <= y].sum())


def build_chain(
    unit_id,
    states: np.ndarray,
    beta_rows: np.ndarray,
    link,
    valid: Optional[np.ndarray] = None,
) -> UnitMarkovChain:
    """Assemble a chain from coefficients at the unit's own states.

    ``beta_rows[j]`` is beta_i evaluated at states[j] for j < K-1 (the top
    state row of the CDF matrix is identically one).
    """
    link = get_link(link)
    states = np.asarray(states, dtype=float)
    K = len(states)
    if K < 2:
        raise PanelError(f"unit {unit_id}: need at least 2 distinct states")
    if valid is not None and not np.all(valid):
        return UnitMarkovChain(unit_id, states, np.empty(0), np.empty(0), None,
                               flag="missing coefficient fits")
    X = np.column_stack([np.ones(K), states])  # x_k = (1, y^k)
    idx = -(beta_rows @ X.T)  # (K-1, K): rows = thresholds j, cols = prev state k
    Q = np.vstack([link.eval(0, idx), np.ones(K)])
    Qs = np.sort(Q, axis=0)  # monotonize each column across thresholds
    P = np.diff(Qs, axis=0, prepend=0.0)
    pi, flag = ergodic(P)
    return UnitMarkovChain(unit_id, states, Qs, P, pi, flag)


def chain_from_unit(unit: UnitDesign, link, opts: FitOptions = FitOptions()) -> UnitMarkovChain:
    """Fit the unit's own-state coefficient path and build its chain."""
    states, betas, st = fit_unit_states_field(unit, link, opts)
    return build_chain(unit.unit_id, states, betas, link, valid=(st == ST_OK))


def chain_from_lookup(
    unit: UnitDesign,
    beta_lookup: Callable[[float], Optional[np.ndarray]],
    link,
) -> UnitMarkovChain:
    """Build a chain from a coefficient accessor (e.g. a counterfactual field)."""
    states = np.unique(unit.y)
    rows, good = [], True
    for y in states[:-1]:
        b = beta_lookup(float(y))
        if b is None:
            good = False
            break
        rows.append(b)
    if not good or len(states) < 2:
        return UnitMarkovChain(unit.unit_id, states, np.empty(0), np.empty(0), None,
                               flag="missing coefficient fits")
    return build_chain(unit.unit_id, states, np.asarray(rows), link)


def ergodic(P: np.ndarray) -> tuple[Optional[np.ndarray], Optional[str]]:
    """Least-squares ergodic vector of a column-stochastic matrix.

    Solves the stacked system (I - P) pi = 0, 1'pi = 1; negative entries
    are clipped to zero and the vector renormalized (logged). Returns
    (None, reason) for reducible chains without a unique solution.
    """
    K = P.shape[0]
    A = np.vstack([np.eye(K) - P, np.ones((1, K))])
    if np.linalg.matrix_rank(A, tol=1e-10) < K:
        return None, "reducible chain: ergodic vector not unique"
    e = np.zeros(K + 1)
    e[K] = 1.0
    pi, *_ = np.linalg.lstsq(A, e, rcond=None)
    if np.any(pi < -1e-10):
        logger.info("ergodic vector had negative entries (min %.2e); clipped", pi.min())
    pi = np.clip(pi, 0.0, None)
    s = pi.sum()
    if s <= 0:
        return None, "degenerate ergodic solution"
    pi = pi / s
    if np.max(np.abs(P @ pi - pi)) > 1e-6:
        return None, "ergodic fixed point failed to converge"
    return pi, None


def stationary_distribution(
    chains: Sequence[UnitMarkovChain], grid: ThresholdGrid, label: str = "F_inf"
) -> DistributionEstimate:
    """Cross-sectional average of per-unit stationary step CDFs."""
    okc = [c for c in chains if c.ok]
    skipped = len(chains) - len(okc)
    if skipped:
        logger.warning("%d unit chain(s) flagged; excluded from the stationary CDF", skipped)
    if not okc:
        raise PanelError("no usable unit chains")
    vals = np.zeros(len(grid))
    for c in okc:
        pos = np.searchsorted(c.states, grid.points, side="right")
        vals += np.concatenate([[0.0], np.cumsum(c.pi)])[pos]
    vals /= len(okc)
    return DistributionEstimate(
        grid=grid, values=vals, n_units=len(okc),
        tail_share=np.zeros(len(grid)), bias_applied=False, label=label,
    )


def jackknife_pi(unit: UnitDesign, link, opts: FitOptions = FitOptions()) -> Optional[np.ndarray]:
    """Half-panel jackknife of the ergodic vector, re-projected to the simplex.

    Chains are rebuilt on each half window over the full-sample state set;
    returns None (caller keeps the uncorrected vector) when either half is
    not identified at some state or a half chain is flagged.
    """
    link = get_link(link)
    full = chain_from_unit(unit, link, opts)
    if not full.ok:
        return None
    T = len(unit.y)
    m = T // 2
    t0 = T - 2 * m
    halves = []
    for (h0, h1) in ((t0, t0 + m), (t0 + m, T)):
        sub = UnitDesign(unit_id=unit.unit_id, X=unit.X[h0:h1], y=unit.y[h0:h1],
                         times=unit.times[h0:h1])
        try:
            states_h, betas_h, st_h = fit_unit_states_field(sub, link, opts)
        except PanelError:
            return None
        if not np.all(st_h == ST_OK):
            return None
        # evaluate the half's step function at the full state set
        def lookup(y, s=states_h, b=betas_h):
            j = int(np.searchsorted(s, y, side="right")) - 1
            if j < 0 or j >= len(b):
                return None
            return b[j]
        ch = chain_from_lookup(unit, lookup, link)
        if not ch.ok:
            return None
        halves.append(ch.pi)
    pi = 2.0 * full.pi - 0.5 * (halves[0] + halves[1])
    pi = np.clip(pi, 0.0, None)
    s = pi.sum()
    return pi / s if s > 0 else None


def mobility(chain: UnitMarkovChain, y_p: float, y_q: float, h: int) -> float:
    """P_i(p, q, h): mass below y_p after h steps, started from the
    stationary distribution restricted below y_q."""
    if not chain.ok:
        raise PanelError(f"unit {chain.unit_id}: chain flagged ({chain.flag})")
    low_q = chain.states < y_q
    if not low_q.any():
        raise PanelError(f"unit {chain.unit_id}: no state below y_q={y_q}")
    mu = np.where(low_q, chain.pi, 0.0)
    mass = mu.sum()
    if mass <= 0:
        raise PanelError(f"unit {chain.unit_id}: no stationary mass below y_q={y_q}")
    nu = mu / mass
    for _ in range(h):
        nu = chain.P @ nu
    return float(nu[chain.states < y_p].sum())


def recurrence(chain: UnitMarkovChain, y_p: float, h_max: int = 50):
    """First-passage above y_p from the conditioned start below it.

    Returns (probs, H): probs[m-1] = Pr(h = m) for m = 1..h_max (mass beyond
    h_max stays in the tail), H the expected recurrence time, +inf when the
    low block is absorbing.
    """
    if not chain.ok:
        raise PanelError(f"unit {chain.unit_id}: chain flagged ({chain.flag})")
    low = chain.states < y_p
    if not low.any():
        raise PanelError(f"unit {chain.unit_id}: no state below y_p={y_p}")
    if low.all():
        return np.zeros(h_max), float("inf")
    mu = np.where(low, chain.pi, 0.0)
    mass = mu.sum()
    if mass <= 0:
        raise PanelError(f"unit {chain.unit_id}: no stationary mass below y_p={y_p}")
    mu = mu[low] / mass
    Pll = chain.P[np.ix_(low, low)]
    probs = np.zeros(h_max)
    nu = mu
    prev = 1.0
    for m in range(1, h_max + 1):
        nu = Pll @ nu
        surv = float(nu.sum())
        probs[m - 1] = prev - surv
        prev = surv
    try:
        u = np.linalg.solve(np.eye(low.sum()) - Pll.T, np.ones(low.sum()))
        H = float(u @ mu)
        if H < 0 or not np.isfinite(H):
            H = float("inf")
    except np.linalg.LinAlgError:
        H = float("inf")
    return probs, H


@dataclass
class MobilitySummary:
    p: float
    q: float
    h: int
    unit_values: np.ndarray
    mean: float
    quantiles: dict


def aggregate_mobility(values: Sequence[float], taus: Sequence[float], p=None, q=None, h=None) -> MobilitySummary:
    """Mean and type-1 empirical quantiles over the included units."""
    vals = np.asarray([v for v in values if np.isfinite(v)], dtype=float)
    if vals.size == 0:
        raise PanelError("no unit qualifies for the mobility aggregate")
    qs = {float(t): float(np.quantile(vals, t, method="inverted_cdf")) for t in taus}
    return MobilitySummary(p=p, q=q, h=h, unit_values=vals, mean=float(vals.mean()), quantiles=qs)
