import numpy as np
import pytest

from hdrpanel.drfit import FitOptions
from hdrpanel.links import get_link
from hdrpanel.markov import (
    aggregate_mobility,
    build_chain,
    chain_from_unit,
    ergodic,
    jackknife_pi,
    mobility,
    recurrence,
    stationary_distribution,
)
from hdrpanel.panel import PanelError, ThresholdGrid, UnitDesign


def chain_from_P(P, states=None):
    """Wrap a column-stochastic matrix as a UnitMarkovChain for the tests."""
    from hdrpanel.markov import UnitMarkovChain

    P = np.asarray(P, dtype=float)
    K = P.shape[0]
    states = np.arange(K, dtype=float) if states is None else np.asarray(states, float)
    pi, flag = ergodic(P)
    return UnitMarkovChain(unit_id=0, states=states, Q=np.cumsum(P, axis=0), P=P,
                           pi=pi, flag=flag)


def dr_consistent_chain(states, betas, link="probit"):
    return build_chain(0, states, np.asarray(betas, float), link)


def test_column_rearrangement_and_differencing():
    # one column with raw CDF values (0.5, 0.3, 1.0) -> sorted -> diffs
    link = get_link("logit")
    states = np.array([0.0, 1.0, 2.0])
    # craft betas so the raw column at state k=0 is (0.5, 0.3)
    b1 = np.array([-link.inverse(0.5), 0.0])
    b2 = np.array([-link.inverse(0.3), 0.0])
    chain = build_chain(0, states, np.vstack([b1, b2]), link)
    assert np.allclose(chain.Q[:, 0], [0.3, 0.5, 1.0])
    assert np.allclose(chain.P[:, 0], [0.3, 0.2, 0.5])


def test_monotone_column_rearrangement_is_identity():
    link = get_link("logit")
    states = np.array([0.0, 1.0])
    b1 = np.array([-link.inverse(0.4), 0.0])
    chain = build_chain(0, states, b1[None, :], link)
    assert np.allclose(chain.Q[:, 0], [0.4, 1.0])


def test_ergodic_symmetric_two_state():
    pi, flag = ergodic(np.array([[0.5, 0.5], [0.5, 0.5]]))
    assert flag is None
    assert np.allclose(pi, [0.5, 0.5])


def test_ergodic_hand_solved():
    # columns [[0.8, 0.4], [0.2, 0.6]]: 0.2 pi1 = 0.4 pi2 -> pi = (2/3, 1/3)
    pi, flag = ergodic(np.array([[0.8, 0.4], [0.2, 0.6]]))
    assert flag is None
    assert np.allclose(pi, [2 / 3, 1 / 3])


def test_ergodic_reducible_flagged():
    pi, flag = ergodic(np.eye(3))
    assert pi is None and "reducible" in flag


def test_chain_recovery_from_simulated_transitions():
    # simulate a 3-state chain consistent with the DR model, refit by DR
    rng = np.random.default_rng(30)
    link = get_link("probit")
    states = np.array([0.5, 1.0, 1.5])
    betas = np.array([[0.8, 0.6], [0.2, 0.3]])  # thresholds at states 0, 1
    truth = dr_consistent_chain(states, betas, link)
    T = 100_000
    y = np.empty(T + 1)
    y[0] = states[1]
    P = truth.P
    for t in range(1, T + 1):
        k = np.searchsorted(states, y[t - 1])
        y[t] = states[rng.choice(3, p=P[:, k])]
    X = np.column_stack([np.ones(T), y[:-1]])
    unit = UnitDesign(unit_id=0, X=X, y=y[1:], times=np.arange(T))
    fitted = chain_from_unit(unit, link, FitOptions(tol=1e-10))
    assert fitted.ok
    assert np.max(np.abs(fitted.P - truth.P)) < 0.02


def test_stationary_distribution_step_cdf():
    chain = chain_from_P(np.array([[0.7, 0.3], [0.3, 0.7]]), states=[1.0, 2.0])
    chain.pi = np.array([0.3, 0.7])
    grid = ThresholdGrid(np.array([0.5, 1.5, 2.5]))
    est = stationary_distribution([chain], grid)
    assert np.allclose(est.values, [0.0, 0.3, 1.0])


def test_stationary_matches_long_path_simulation():
    rng = np.random.default_rng(31)
    link = get_link("probit")
    states = np.array([0.0, 0.7, 1.3, 2.0])
    betas = np.array([[0.9, 0.4], [0.3, 0.25], [-0.4, 0.3]])
    chain = dr_consistent_chain(states, betas, link)
    assert chain.ok
    T = 100_000
    k = 1
    counts = np.zeros(4)
    for _ in range(T):
        k = rng.choice(4, p=chain.P[:, k])
        counts[k] += 1
    emp = np.cumsum(counts / T)
    model = np.cumsum(chain.pi)
    assert np.max(np.abs(emp - model)) < 0.02


def test_mobility_hand_examples():
    P = np.array([[0.9, 0.5], [0.1, 0.5]])
    chain = chain_from_P(P, states=[0.0, 1.0])
    # p = q pick only the low state; start mass concentrated there
    assert mobility(chain, 0.5, 0.5, 1) == pytest.approx(0.9)
    assert mobility(chain, 0.5, 0.5, 2) == pytest.approx(0.86)


def test_mobility_limit_is_stationary_mass():
    P = np.array([[0.9, 0.5], [0.1, 0.5]])
    chain = chain_from_P(P, states=[0.0, 1.0])
    lim = mobility(chain, 0.5, 0.5, 200)
    assert lim == pytest.approx(chain.pi[0], abs=1e-6)
    # independent of the conditioning quantile
    assert mobility(chain, 0.5, 1.5, 200) == pytest.approx(lim, abs=1e-6)


def test_mobility_requires_states_below_q():
    chain = chain_from_P(np.array([[0.5, 0.5], [0.5, 0.5]]), states=[1.0, 2.0])
    with pytest.raises(PanelError):
        mobility(chain, 0.5, 0.5, 1)


def test_recurrence_geometric():
    P = np.array([[0.9, 0.5], [0.1, 0.5]])
    chain = chain_from_P(P, states=[0.0, 1.0])
    probs, H = recurrence(chain, 0.5, h_max=60)
    geometric = 0.9 ** (np.arange(1, 61) - 1) * 0.1
    assert np.allclose(probs, geometric, atol=1e-12)
    assert H == pytest.approx(10.0, abs=1e-9)


def test_recurrence_immediate_exit():
    P = np.array([[0.0, 0.3], [1.0, 0.7]])
    chain = chain_from_P(P, states=[0.0, 1.0])
    probs, H = recurrence(chain, 0.5, h_max=10)
    assert probs[0] == pytest.approx(1.0)
    assert H == pytest.approx(1.0)


def test_recurrence_absorbing_low_state():
    from hdrpanel.markov import UnitMarkovChain

    P = np.array([[1.0, 0.5], [0.0, 0.5]])
    pi = np.array([1.0, 0.0])
    chain = UnitMarkovChain(0, np.array([0.0, 1.0]), np.cumsum(P, 0), P, pi, None)
    probs, H = recurrence(chain, 0.5, h_max=10)
    assert H == np.inf
    assert probs.sum() == pytest.approx(0.0)


def test_aggregate_mobility():
    summ = aggregate_mobility([0.4] * 5, [0.25, 0.5], p=0.1, q=0.1, h=1)
    assert summ.mean == pytest.approx(0.4)
    assert all(v == pytest.approx(0.4) for v in summ.quantiles.values())
    two = aggregate_mobility([0.0, 1.0], [0.5])
    assert two.quantiles[0.5] == 0.0  # type-1 convention
    with pytest.raises(PanelError):
        aggregate_mobility([], [0.5])


def test_aggregate_mobility_lln():
    rng = np.random.default_rng(32)
    vals = rng.beta(2.0, 3.0, size=1000)
    summ = aggregate_mobility(vals, [0.5])
    assert summ.mean == pytest.approx(2 / 5, abs=0.05)


def test_rearrangement_is_l1_contractive_toward_monotone():
    # sorted column weakly closer in L1 to any monotone target (K <= 5)
    rng = np.random.default_rng(33)
    for _ in range(300):
        K = int(rng.integers(2, 6))
        q = rng.random(K)
        m = np.sort(rng.random(K))
        assert np.sum(np.abs(np.sort(q) - m)) <= np.sum(np.abs(q - m)) + 1e-12


def random_dr_chain(rng):
    link = get_link("logit")
    K = int(rng.integers(2, 8))
    states = np.sort(rng.normal(size=K))
    while len(np.unique(states)) < K:
        states = np.sort(rng.normal(size=K))
    betas = rng.normal(scale=0.8, size=(K - 1, 2))
    return build_chain(0, states, betas, link)


def test_randomized_chain_invariants():
    rng = np.random.default_rng(34)
    n_ok = 0
    for _ in range(1000):
        chain = random_dr_chain(rng)
        assert np.allclose(chain.P.sum(axis=0), 1.0, atol=1e-10)
        assert np.all(chain.P >= 0)
        assert np.all(np.diff(chain.Q, axis=0) >= -1e-12)
        assert np.allclose(chain.Q[-1], 1.0)
        if chain.ok:
            n_ok += 1
            assert np.max(np.abs(chain.P @ chain.pi - chain.pi)) < 1e-8
            assert chain.pi.min() >= 0
            assert chain.pi.sum() == pytest.approx(1.0)
    assert n_ok > 950


def test_jackknife_pi_projects_to_simplex():
    rng = np.random.default_rng(35)
    link = get_link("logit")
    states = np.array([0.0, 1.0, 2.0])
    betas = np.array([[0.5, 0.4], [-0.2, 0.3]])
    truth = dr_consistent_chain(states, betas, link)
    T = 400
    y = np.empty(T + 1)
    y[0] = 1.0
    for t in range(1, T + 1):
        k = np.searchsorted(states, y[t - 1])
        y[t] = states[rng.choice(3, p=truth.P[:, k])]
    unit = UnitDesign(unit_id=0, X=np.column_stack([np.ones(T), y[:-1]]), y=y[1:],
                      times=np.arange(T))
    pi = jackknife_pi(unit, link)
    assert pi is not None
    assert pi.min() >= 0 and pi.sum() == pytest.approx(1.0)
    assert np.max(np.abs(pi - truth.pi)) < 0.2


def test_build_chain_needs_two_states():
    with pytest.raises(PanelError):
        build_chain(0, np.array([1.0]), np.zeros((0, 2)), "logit")
