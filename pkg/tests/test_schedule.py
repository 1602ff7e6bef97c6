import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from skelmotion.schedule import (
    GuidanceConfig,
    NoiseSchedule,
    cfg_combine,
    ddim_step,
    ddim_timesteps,
    make_schedule,
    q_sample,
    recover,
    velocity,
)


@pytest.fixture(scope="module")
def sched():
    return make_schedule()


def _toy_schedule():
    # alpha = 0.8, sigma = 0.6 at t = 1
    alpha = np.array([1.0, 0.8])
    return NoiseSchedule(1, 0.1, 0.2, np.zeros(2), alpha, np.sqrt(1 - alpha**2))


def test_endpoints(sched):
    assert sched.beta[1] == pytest.approx(0.00085, abs=1e-15)
    assert sched.beta[1000] == pytest.approx(0.012, abs=1e-15)
    assert sched.alpha[0] == 1.0 and sched.sigma[0] == 0.0


def test_midpoint_closed_form():
    s = make_schedule(1001)
    assert s.beta[501] == pytest.approx(((math.sqrt(0.00085) + math.sqrt(0.012)) / 2) ** 2, rel=1e-12)


def test_alpha_bar_oracle(sched):
    # independent scalar loop over the closed-form betas
    prod = 1.0
    for t in range(1, 501):
        b = (math.sqrt(0.00085) + (t - 1) / 999 * (math.sqrt(0.012) - math.sqrt(0.00085))) ** 2
        prod *= 1 - b
    assert sched.alpha[500] ** 2 == pytest.approx(prod, rel=1e-12)


def test_invariants(sched):
    assert np.all(np.diff(sched.beta[1:]) > 0)
    assert np.all(np.diff(sched.alpha) < 0)
    assert np.all(np.diff(sched.sigma) > 0)
    assert np.abs(sched.alpha**2 + sched.sigma**2 - 1).max() < 1e-12


@pytest.mark.parametrize("args", [(1000, 0.012, 0.00085), (1, 0.001, 0.01), (1000, 0.0, 0.01), (1000, 0.1, 1.0)])
def test_invalid_schedule(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_hand_arithmetic():
    s = _toy_schedule()
    x, eps = torch.tensor(1.0, dtype=torch.float64), torch.tensor(2.0, dtype=torch.float64)
    assert float(q_sample(x, eps, 1, s)) == pytest.approx(2.0)
    assert float(velocity(x, eps, 1, s)) == pytest.approx(1.0)
    xh, eh = recover(torch.tensor(2.0, dtype=torch.float64), torch.tensor(1.0, dtype=torch.float64), 1, s)
    assert (float(xh), float(eh)) == pytest.approx((1.0, 2.0))


def test_boundary_conventions(sched):
    x, eps = torch.randn(5), torch.randn(5)
    assert torch.equal(q_sample(x, eps, 0, sched), x)
    assert torch.equal(velocity(x, eps, 0, sched), eps)
    assert torch.equal(velocity(torch.zeros(3), torch.zeros(3), 500, sched), torch.zeros(3))
    with pytest.raises(ValueError):
        q_sample(x, eps, 1001, sched)
    with pytest.raises(ValueError):
        velocity(x, eps, -1, sched)


@given(st.integers(1, 1000), st.floats(-5, 5), st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_q_sample_linear(t, a, seed):
    s = make_schedule()
    g = torch.Generator().manual_seed(seed)
    x, eps = torch.randn(6, generator=g, dtype=torch.float64), torch.randn(6, generator=g, dtype=torch.float64)
    assert torch.allclose(q_sample(a * x, a * eps, t, s), a * q_sample(x, eps, t, s), atol=1e-12)


@given(st.integers(1, 1000), st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_recover_round_trip(t, seed):
    s = make_schedule()
    g = torch.Generator().manual_seed(seed)
    x, eps = torch.randn(4, 3, generator=g), torch.randn(4, 3, generator=g)
    xh, eh = recover(q_sample(x, eps, t, s), velocity(x, eps, t, s), t, s)
    assert (xh - x).abs().max() < 1e-5
    assert (eh - eps).abs().max() < 1e-5


def test_batched_timesteps(sched):
    x, eps = torch.randn(3, 2, 2), torch.randn(3, 2, 2)
    t = torch.tensor([1, 500, 1000])
    batched = q_sample(x, eps, t, sched)
    for i in range(3):
        assert torch.allclose(batched[i], q_sample(x[i], eps[i], int(t[i]), sched))


def test_ddim_oracle_step(sched):
    x, eps = torch.randn(8, dtype=torch.float64), torch.randn(8, dtype=torch.float64)
    z = q_sample(x, eps, 700, sched)
    nxt = ddim_step(z, velocity(x, eps, 700, sched), 700, 680, sched)
    assert torch.allclose(nxt, q_sample(x, eps, 680, sched), atol=1e-12)
    final = ddim_step(z, velocity(x, eps, 700, sched), 700, 0, sched)
    assert torch.allclose(final, x, atol=1e-12)
    assert torch.equal(ddim_step(z, x, 700, 0, sched), ddim_step(z, x, 700, 0, sched))
    with pytest.raises(ValueError, match="t_prev < t"):
        ddim_step(z, x, 500, 500, sched)


def test_cfg_combine():
    vu, vc = torch.randn(10), torch.randn(10)
    assert torch.equal(cfg_combine(vu, vc, 1.0), vc)
    assert torch.equal(cfg_combine(vu, vc, 0.0), vu)
    assert float(cfg_combine(torch.tensor(0.0), torch.tensor(1.0), 7.5)) == 7.5
    assert torch.allclose(cfg_combine(vu, vc, 3.0), vu + 3.0 * (vc - vu), atol=1e-6)
    with pytest.raises(ValueError, match="shape"):
        cfg_combine(vu, vc[:5], 1.0)


@given(st.floats(0, 20), st.integers(0, 2**31 - 1))
@settings(max_examples=50)
def test_cfg_identical_inputs(w, seed):
    v = torch.randn(7, generator=torch.Generator().manual_seed(seed))
    assert torch.allclose(cfg_combine(v, v, w), v, atol=1e-6)


def test_ddim_timesteps():
    ts = ddim_timesteps(1000, 50)
    assert len(ts) == 50 and ts[0] == 1000 and ts[-1] == 20
    assert set(np.diff(ts)) == {-20}
    assert ddim_timesteps(10, 10) == list(range(10, 0, -1))
    assert ddim_timesteps(1000, 1) == [1000]
    for bad in (0, 1001):
        with pytest.raises(ValueError):
            ddim_timesteps(1000, bad)


def test_guidance_defaults():
    g = GuidanceConfig()
    assert g.w == 7.5 and g.p_uncond == 0.1
    with pytest.raises(ValueError):
        GuidanceConfig(w=-1)
    with pytest.raises(ValueError):
        GuidanceConfig(p_uncond=1.5)
