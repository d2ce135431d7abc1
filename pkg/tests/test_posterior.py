import numpy as np
import pytest

from emptdm.domain import GridSpec, ObservationSet, make_task, query
from emptdm.harness.runner import pinned_buffer
from emptdm.memory_permanent import GaussianMixtureScore, TinyDenoiser
from emptdm.memory_transient import HModel, train_h
from emptdm.posterior import (PosteriorEnsemble, corrected_tweedie, run_chains,
                              sample_posterior)
from emptdm.schedule import NoiseSchedule, tweedie


def empty(shape):
    return ObservationSet.empty(GridSpec(*shape))


def test_standard_normal_prior_monte_carlo_mean(schedule):
    prior = GaussianMixtureScore(np.zeros((3, 3)), [1.0], 1.0, schedule)
    ens = sample_posterior(prior, HModel((3, 3), schedule.T), empty((3, 3)), P=1000, seed=0)
    assert np.all(np.abs(ens.mean()) < 0.1)
    # deterministic map of x_T: the same draws reproduce the same samples
    again = sample_posterior(prior, None, empty((3, 3)), P=1000, seed=0)
    assert again.samples.tobytes() == ens.samples.tobytes()


@pytest.mark.parametrize("eta", [0.0, 1.0])
def test_same_seed_bit_identical(eta):
    sched = NoiseSchedule.linear(eta=eta)
    prior = TinyDenoiser((4, 4), sched, seed=1)
    a = sample_posterior(prior, None, empty((4, 4)), P=2, seed=42)
    b = sample_posterior(prior, None, empty((4, 4)), P=2, seed=42)
    assert a.samples.tobytes() == b.samples.tobytes()
    c = sample_posterior(prior, None, empty((4, 4)), P=2, seed=43)
    assert not np.array_equal(a.samples, c.samples)


@pytest.mark.parametrize("eta", [0.0, 0.7])
def test_chain_independence(eta):
    sched = NoiseSchedule.linear(eta=eta)
    rng = np.random.default_rng(0)
    prior = GaussianMixtureScore(rng.random((2, 3, 3)), [0.5, 0.5], 0.1, sched)
    full = run_chains(prior, None, empty((3, 3)), seed=8, chains=range(5))
    part = run_chains(prior, None, empty((3, 3)), seed=8, chains=[0, 1, 3, 4])
    assert part.tobytes() == full[[0, 1, 3, 4]].tobytes()
    alone = run_chains(prior, None, empty((3, 3)), seed=8, chains=[2])
    np.testing.assert_allclose(alone[0], full[2], rtol=0, atol=1e-12)


def test_ensemble_validation(schedule):
    prior = GaussianMixtureScore(np.zeros((2, 2)), [1.0], 1.0, schedule)
    with pytest.raises(ValueError):
        sample_posterior(prior, None, empty((2, 2)), P=1)
    with pytest.raises(ValueError):
        PosteriorEnsemble(np.zeros((1, 2, 2)), 0)
    with pytest.raises(ValueError):
        PosteriorEnsemble(np.zeros((3, 4)), 0)


def test_corrected_tweedie_hand_value():
    sched = NoiseSchedule.from_betas([0.75, 0.5])   # alpha_bar[0] = 0.25

    class Const:
        def __init__(self, v):
            self.v = v
            self.schedule = sched

        def predict_eps(self, x, t):
            return np.full_like(x, self.v)

        def __call__(self, *args):
            return np.full((1, 1), self.v)

        def is_null(self):
            return False

    x = np.array([[1.0]])
    got = corrected_tweedie(Const(0.5), Const(0.1), x, empty((1, 1)), 0)
    assert got[0, 0] == pytest.approx((1 - np.sqrt(0.75) * 0.6) / 0.5, abs=1e-12)
    assert got[0, 0] == pytest.approx(0.9608, abs=1e-4)


def test_corrected_tweedie_decomposition(schedule, rng):
    prior = TinyDenoiser((4, 4), schedule, seed=0)
    h = HModel((4, 4), schedule.T, seed=0)
    r = np.random.default_rng(3)
    for k in h.head_keys:
        h.params[k] = 0.2 * r.standard_normal(h.params[k].shape)
    obs = empty((4, 4))
    x = rng.standard_normal((4, 4))
    for t in (0, 9, 29):
        ab = schedule.alpha_bar[t]
        eps = prior.predict_eps(x, t)
        uncond = tweedie(schedule, x, eps, t)
        np.testing.assert_array_equal(corrected_tweedie(prior, None, x, obs, t), uncond)
        h_out = h(x, uncond, obs.values, obs.mask, t)
        want = uncond - np.sqrt(1 - ab) / np.sqrt(ab) * h_out
        np.testing.assert_allclose(corrected_tweedie(prior, h, x, obs, t), want,
                                   rtol=1e-9, atol=1e-12)


def test_no_pixel_replacement_in_sampler(schedule):
    # observations only enter through h; a null h leaves samples unconditional
    prior = GaussianMixtureScore(np.zeros((3, 3)), [1.0], 1.0, schedule)
    content = np.ones((3, 3))
    task = make_task(content, content, GridSpec(3, 3), 9)
    _, obs = query(task, empty((3, 3)), 4)
    a = sample_posterior(prior, None, obs, P=4, seed=1)
    b = sample_posterior(prior, None, empty((3, 3)), P=4, seed=1)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert not np.allclose(a.samples[:, 1, 1], 1.0)


def test_observed_pixel_error_falls_across_em_rounds(schedule):
    rng = np.random.default_rng(4)
    prior = GaussianMixtureScore(rng.random((3, 4, 4)), [1 / 3] * 3, 0.05, schedule)
    content = rng.random((4, 4))
    task = make_task(content, (content > 0.5).astype(int), GridSpec(4, 4), 16)
    obs = empty((4, 4))
    for q in (0, 5, 10, 15):
        _, obs = query(task, obs, q)
    m = obs.mask.astype(bool)
    h = HModel((4, 4), schedule.T, seed=0)
    errs = []
    for k in range(4):
        ens = sample_posterior(prior, h, obs, 32, seed=100 + k)
        errs.append(np.mean(np.abs(ens.samples[:, m] - content[m])))
        h = train_h(h, prior, pinned_buffer(ens.samples, obs), obs, epochs=40, lr=2e-3,
                    seed=k)
    assert all(b <= a for a, b in zip(errs, errs[1:])), errs
