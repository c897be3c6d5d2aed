import numpy as np
import pytest

from sgdiff.core.schedule import NoiseSchedule, build_schedule, cosine_schedule, exp_sigma_schedule
from sgdiff.core.utils import DomainError


def test_cosine_schedule_shape():
    betas, alpha_bars = cosine_schedule(100)
    assert len(betas) == len(alpha_bars) == 101
    assert betas[0] == 0.0 and alpha_bars[0] == 1.0
    assert np.all(betas[1:] > 0) and np.all(betas <= 0.999)
    assert np.all(np.diff(alpha_bars) < 0), "alpha_bar must decrease"
    assert np.allclose(alpha_bars, np.cumprod(1.0 - betas))


def test_sigma_schedule_endpoints():
    sigmas = exp_sigma_schedule(50, 0.005, 0.5)
    assert sigmas[0] == 0.0
    assert sigmas[1] == 0.005 and sigmas[50] == 0.5
    ratios = sigmas[2:] / sigmas[1:-1]
    assert np.allclose(ratios, ratios[0]), "sigma grows geometrically"


def test_schedule_preconditions():
    with pytest.raises(DomainError):
        cosine_schedule(0)
    with pytest.raises(DomainError):
        exp_sigma_schedule(1, 0.005, 0.5)
    with pytest.raises(DomainError):
        exp_sigma_schedule(10, 0.5, 0.5)
    with pytest.raises(DomainError):
        NoiseSchedule(T=10, corrector_gamma=0.0)
    with pytest.raises(DomainError):
        NoiseSchedule(T=10, score_weight=np.ones(3))


def test_noise_schedule_helpers():
    schedule = NoiseSchedule(T=20)
    assert schedule.posterior_std(1) == 0.0
    assert schedule.posterior_std(10) > 0.0
    assert schedule.lam(5) == 1.0
    weighted = schedule.with_score_weight(np.linspace(0.0, 1.0, 21))
    assert weighted.lam(20) == pytest.approx(1.0)
    assert weighted.T == 20 and schedule.score_weight is None


def test_build_schedule_from_section():
    schedule = build_schedule({"T": 30, "gamma": 1e-5, "n_img": 2})
    assert schedule.T == 30
    assert schedule.params() == {"T": 30, "s": 0.008, "sigma_1": 0.005, "sigma_T": 0.5, "gamma": 1e-5, "n_img": 2}
