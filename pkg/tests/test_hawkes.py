import math
import warnings

import numpy as np
import pytest
from scipy import stats

from tppkit import autodiff as ad
from tppkit import hawkes
from tppkit.data import Dataset, Event, EventSequence

PARAMS = hawkes.DEFAULT_SYNTHETIC_CONFIG.params()


def _univariate(mu, alpha, beta):
    return hawkes.HawkesParams(mu=[mu], alpha=[[alpha]], beta=[[beta]])


# -- Poisson -------------------------------------------------------------------

def test_poisson_zero_rate_is_empty():
    seq = hawkes.poisson_simulate(hawkes.PoissonParams(rate=[0.0]), 100.0, seed=0)
    assert len(seq) == 0


def test_poisson_law_of_large_numbers():
    seq = hawkes.poisson_simulate(hawkes.PoissonParams(rate=[0.5]), 1e6, seed=1)
    assert abs(len(seq) / 1e6 - 0.5) < 0.002


def test_poisson_moments():
    rng_counts = [len(hawkes.poisson_simulate(hawkes.PoissonParams(rate=[2.0]), 1.0, seed=s))
                  for s in range(10_000)]
    counts = np.array(rng_counts, dtype=float)
    assert abs(counts.mean() - 2.0) < 0.05
    assert abs(counts.var() - 2.0) < 0.15


def test_poisson_inhomogeneous_thinning():
    p = hawkes.PoissonParams(rate_fn=lambda t: np.array([0.5 + 0.5 * math.sin(t)]),
                             dominating_rate=1.0, n_types=1)
    seq = hawkes.poisson_simulate(p, 10_000.0, seed=2)
    # mean rate of 0.5 + 0.5 sin t over a long window is 0.5
    assert abs(len(seq) / 10_000.0 - 0.5) < 0.03


def test_poisson_dominating_rate_violation():
    p = hawkes.PoissonParams(rate_fn=lambda t: np.array([2.0]), dominating_rate=1.0, n_types=1)
    with pytest.raises(hawkes.NumericalError, match="dominating"):
        hawkes.poisson_simulate(p, 100.0, seed=3)


# -- intensity -----------------------------------------------------------------

def test_intensity_empty_history_is_mu():
    empty = EventSequence(events=(), t_end=1.0)
    assert np.allclose(hawkes.hawkes_intensity(PARAMS, empty, 0.5), [0.1, 0.05])


def test_intensity_just_after_event():
    hist = EventSequence(events=(Event(0.0, 0),), t_end=1.0)
    lam = hawkes.hawkes_intensity(PARAMS, hist, 1e-12)
    assert np.allclose(lam, [0.3, 0.05], atol=1e-9)


def test_intensity_at_log2():
    hist = EventSequence(events=(Event(0.0, 0),), t_end=1.0)
    lam = hawkes.hawkes_intensity(PARAMS, hist, math.log(2.0))
    assert abs(lam[0] - 0.2) < 1e-12


def test_intensity_rejects_time_before_history():
    hist = EventSequence(events=(Event(1.0, 0),), t_end=2.0)
    with pytest.raises(ValueError):
        hawkes.hawkes_intensity(PARAMS, hist, 0.5)


def test_intensity_at_least_mu(tiny_hawkes_sequences):
    for seq in tiny_hawkes_sequences:
        lam = hawkes.hawkes_intensity(PARAMS, seq, seq.t_end + 3.0)
        assert np.all(lam >= PARAMS.mu)


# -- simulation ----------------------------------------------------------------

def test_simulate_bit_reproducible():
    a = hawkes.hawkes_simulate(PARAMS, 200.0, seed=42)
    b = hawkes.hawkes_simulate(PARAMS, 200.0, seed=42)
    assert a == b


def test_simulate_zero_alpha_matches_poisson():
    params = hawkes.HawkesParams(mu=[0.4], alpha=[[0.0]], beta=[[1.0]])
    h = hawkes.hawkes_simulate(params, 20_000.0, seed=5)
    p = hawkes.poisson_simulate(hawkes.PoissonParams(rate=[0.4]), 20_000.0, seed=6)
    ks = stats.ks_2samp(np.diff(h.times()), np.diff(p.times()))
    assert ks.pvalue > 0.01


def test_simulate_stationary_rates():
    # single long horizon >= 1e5 / rate per component
    seqs = [hawkes.hawkes_simulate(PARAMS, 50_000.0, seed=s) for s in range(20)]
    marks = np.concatenate([s.marks() for s in seqs])
    exposure = 20 * 50_000.0
    rate0 = np.sum(marks == 0) / exposure
    rate1 = np.sum(marks == 1) / exposure
    assert abs(rate0 - 0.125) / 0.125 < 0.03
    assert abs(rate1 - 1.0 / 12.0) / (1.0 / 12.0) < 0.03


def test_non_stationary_params_warn():
    with pytest.warns(RuntimeWarning, match="spectral radius"):
        hawkes.HawkesParams(mu=[0.1], alpha=[[2.0]], beta=[[1.0]])


# -- likelihood ----------------------------------------------------------------

def test_loglik_poisson_closed_form():
    params = _univariate(0.1, 0.0, 1.0)
    seq = EventSequence(events=(Event(1.0, 0),), t_end=2.0)
    assert abs(hawkes.hawkes_loglik(params, seq) - (math.log(0.1) - 0.2)) < 1e-12


def test_loglik_empty_sequence_is_compensator():
    params = _univariate(0.1, 0.0, 1.0)
    seq = EventSequence(events=(), t_end=10.0)
    assert abs(hawkes.hawkes_loglik(params, seq) - (-1.0)) < 1e-12


def test_loglik_zero_intensity_returns_neg_inf():
    params = _univariate(0.0, 0.1, 1.0)
    seq = EventSequence(events=(Event(1.0, 0),), t_end=2.0)
    assert hawkes.hawkes_loglik(params, seq) == -math.inf


def test_loglik_recursive_matches_brute(tiny_hawkes_sequences):
    for seq in tiny_hawkes_sequences:
        a = hawkes.hawkes_loglik(PARAMS, seq)
        b = hawkes.hawkes_loglik_brute(PARAMS, seq)
        assert abs(a - b) <= 1e-10 * max(1.0, abs(b))


def test_loglik_graph_matches_recursive(tiny_hawkes_sequences):
    batch = hawkes._pad_dataset(tiny_hawkes_sequences)
    total = hawkes.loglik_graph(ad.tensor(PARAMS.mu), ad.tensor(PARAMS.alpha),
                                ad.tensor(PARAMS.beta), batch)
    want = sum(hawkes.hawkes_loglik(PARAMS, s) for s in tiny_hawkes_sequences)
    assert abs(float(total.data) - want) < 1e-9 * max(1.0, abs(want))


def test_loglik_gradient_matches_finite_differences(tiny_hawkes_sequences):
    batch = hawkes._pad_dataset(tiny_hawkes_sequences[:5])
    mu = ad.tensor(PARAMS.mu, requires_grad=True)
    alpha = ad.tensor(PARAMS.alpha + 0.05, requires_grad=True)
    beta = ad.tensor(PARAMS.beta * 1.2, requires_grad=True)

    def fn(mu, alpha, beta):
        return hawkes.loglik_graph(mu, alpha, beta, batch)

    assert ad.grad_check(fn, [mu, alpha, beta], eps=1e-6) < 1e-6


# -- fitting -------------------------------------------------------------------

def test_poisson_mle_closed_form(small_hawkes_dataset):
    rates = hawkes.poisson_mle(small_hawkes_dataset)
    counts = np.zeros(2)
    for s in small_hawkes_dataset.sequences:
        for ev in s.events:
            counts[ev.mark] += 1
    exposure = sum(s.t_end for s in small_hawkes_dataset.sequences)
    assert np.array_equal(rates, counts / exposure)


def test_fit_recovers_parameters_loosely(small_hawkes_dataset):
    # tight 10% recovery at 2,000 sequences is exercised by the acceptance suite
    result = hawkes.hawkes_fit(small_hawkes_dataset, max_iterations=300)
    assert result.converged
    assert np.all(np.abs(result.params.mu - PARAMS.mu) / PARAMS.mu < 0.25)
    diag = np.diag_indices(2)
    assert np.all(np.abs(result.params.alpha[diag] - PARAMS.alpha[diag]) / PARAMS.alpha[diag] < 0.35)


def test_fit_objective_not_worse_than_truth(small_hawkes_dataset):
    result = hawkes.hawkes_fit(small_hawkes_dataset, max_iterations=300)
    truth = sum(hawkes.hawkes_loglik(PARAMS, s) for s in small_hawkes_dataset.sequences)
    n_events = small_hawkes_dataset.n_events
    assert result.loglik >= truth - 1e-6 * n_events


def test_fit_rejects_empty():
    with pytest.raises(ValueError):
        hawkes.hawkes_fit(Dataset(sequences=(), class_count=1))


def test_fit_non_finite_init_raises(small_hawkes_dataset):
    bad = hawkes.HawkesParams(mu=[0.0, 0.0], alpha=np.zeros((2, 2)), beta=np.ones((2, 2)))
    with pytest.raises(hawkes.NumericalError):
        hawkes.hawkes_fit(small_hawkes_dataset, init=bad)


# -- time rescaling ------------------------------------------------------------

def test_rescale_homogeneous_poisson_is_identity():
    params = _univariate(1.0, 0.0, 1.0)
    seq = hawkes.poisson_simulate(hawkes.PoissonParams(rate=[1.0]), 500.0, seed=7)
    increments = hawkes.time_rescale(params, seq)
    gaps = np.diff(np.concatenate([[0.0], seq.times()]))
    assert np.allclose(increments, gaps)


def test_rescale_true_params_pass_ks():
    seqs = [hawkes.hawkes_simulate(PARAMS, 3000.0, seed=s) for s in range(20)]
    increments = np.concatenate([hawkes.time_rescale(PARAMS, s) for s in seqs])
    assert increments.size > 10_000
    assert stats.kstest(increments, "expon").pvalue > 0.01


def test_rescale_wrong_params_rejected():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        wrong = hawkes.HawkesParams(mu=PARAMS.mu * 2.0, alpha=PARAMS.alpha, beta=PARAMS.beta)
    seqs = [hawkes.hawkes_simulate(PARAMS, 3000.0, seed=s) for s in range(20)]
    increments = np.concatenate([hawkes.time_rescale(wrong, s) for s in seqs])
    assert stats.kstest(increments, "expon").pvalue < 0.001


def test_gof_censoring_adjusted_on_short_windows(small_hawkes_dataset):
    # raw pooled increments from short windows are length-biased; the
    # truncated-exponential transform is exact for any window length
    _, p_true, n = hawkes.time_rescale_gof(PARAMS, small_hawkes_dataset.sequences)
    assert p_true > 0.01 and n > 4000
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        wrong = hawkes.HawkesParams(mu=PARAMS.mu * 2.0, alpha=PARAMS.alpha, beta=PARAMS.beta)
    _, p_wrong, _ = hawkes.time_rescale_gof(wrong, small_hawkes_dataset.sequences)
    assert p_wrong < 0.001


# -- generation config ---------------------------------------------------------

def test_generation_config_roundtrip(tmp_path):
    p = tmp_path / "gen.json"
    p.write_text('{"n_sequences": 3, "seed": 5}')
    cfg = hawkes.GenerationConfig.from_json(p)
    assert cfg.n_sequences == 3 and cfg.seed == 5
    assert cfg.mu == (0.1, 0.05)  # defaults fill the rest


def test_generation_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "gen.json"
    p.write_text('{"bogus": 1}')
    with pytest.raises(ValueError, match="bogus"):
        hawkes.GenerationConfig.from_json(p)


def test_generate_dataset_deterministic_and_parallel_safe():
    from dataclasses import replace

    cfg = replace(hawkes.DEFAULT_SYNTHETIC_CONFIG, n_sequences=50, seed=3)
    a = hawkes.generate_dataset(cfg, threads=1)
    b = hawkes.generate_dataset(cfg, threads=2)
    assert a == b


def test_switching_dataset_static_features():
    base = hawkes.GenerationConfig(mu=(0.1, 0.05), alpha=((0.0, 0.0), (0.0, 0.0)),
                                   beta=((1.0, 1.0), (1.0, 1.0)), t_end=30.0,
                                   n_sequences=0, seed=0)
    ds = hawkes.generate_switching_dataset(base, base, 40, seed=9,
                                           informative_static=True, n_noise_features=2)
    assert ds.static_dim == 3
    regimes = {s.static_features[0] for s in ds.sequences}
    assert regimes == {0.0, 1.0}
