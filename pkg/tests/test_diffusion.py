import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ratd.config import DiffusionConfig, NetworkConfig, TrainingConfig
from ratd.diffusion import (ConditionedData, DiffusionModel, eps_to_x0, fit, forward_perturb, load_model,
                            make_schedule, predict_target_adapter, sample, save_model, training_loss,
                            x0_to_eps)
from ratd.errors import ConfigError


def schedule_oracle(T, b0=1e-4, b1=0.5):
    """Scalar loops, one step at a time, straight from the definitions."""
    if T == 1:
        betas = [b0]
    else:
        betas = [(math.sqrt(b0) + (math.sqrt(b1) - math.sqrt(b0)) * i / (T - 1)) ** 2 for i in range(T)]
    ab, prev, bt2, gam = [], 1.0, [], []
    for b in betas:
        cur = prev * (1 - b)
        v = b * (1 - prev) / (1 - cur)
        bt2.append(v)
        var = v if v > 0 else b
        gam.append(prev * b * b / (2 * var * (1 - cur) ** 2))
        ab.append(cur)
        prev = cur
    return np.array(betas), np.array(ab), np.array(bt2), np.array(gam)


@pytest.mark.parametrize("T", [1, 3, 100])
def test_schedule_matches_scalar_oracle(T):
    s = make_schedule(T)
    beta, ab, bt2, gam = schedule_oracle(T)
    np.testing.assert_allclose(s.beta, beta, rtol=1e-14, atol=0)
    np.testing.assert_allclose(s.alpha_bar, ab, rtol=1e-13, atol=0)
    np.testing.assert_allclose(s.beta_tilde_sq, bt2, rtol=1e-12, atol=0)
    np.testing.assert_allclose(s.gamma, gam, rtol=1e-12, atol=0)
    assert s.beta_tilde_sq[0] == 0.0
    assert np.all(np.isfinite(s.gamma))
    assert np.all(np.diff(s.alpha_bar) < 0) and np.all(s.alpha_bar > 0)


def test_schedule_T3_frozen_values():
    # frozen from schedule_oracle(3)
    s = make_schedule(3)
    np.testing.assert_allclose(s.beta, [1e-4, 0.1285605339059, 0.5], rtol=1e-11)
    np.testing.assert_allclose(s.alpha_bar, [0.9999, 0.871352322147, 0.435676161074], rtol=1e-11)
    np.testing.assert_allclose(s.beta_tilde_sq, [0.0, 9.993226154714e-05, 0.1139839122314], rtol=1e-11)
    # gamma_1 = beta_1^2 / (2 beta_1 beta_1^2) = 1 / (2 beta_1) = 5000
    np.testing.assert_allclose(s.gamma, [5000.0, 4996.11341605, 3.000567862648], rtol=1e-11)


def test_linear_schedule_and_bad_bounds():
    s = make_schedule(5, 0.1, 0.5, "linear")
    np.testing.assert_allclose(s.beta, [0.1, 0.2, 0.3, 0.4, 0.5])
    with pytest.raises(ValueError):
        make_schedule(5, 0.5, 0.1)
    with pytest.raises(ValueError):
        make_schedule(0)


def test_forward_marginal_monte_carlo():
    """Iterating the one-step kernel reproduces the closed-form marginal."""
    s = make_schedule(20)
    rng = np.random.default_rng(0)
    n, x0, t = 10_000, 1.5, 12
    x = np.full(n, x0)
    for b in s.beta[:t]:
        x = np.sqrt(1 - b) * x + np.sqrt(b) * rng.standard_normal(n)
    mean, var = np.sqrt(s.alpha_bar[t - 1]) * x0, 1 - s.alpha_bar[t - 1]
    se_mean = np.sqrt(var / n)
    se_var = var * np.sqrt(2 / (n - 1))
    assert abs(x.mean() - mean) < 3 * se_mean
    assert abs(x.var(ddof=1) - var) < 3 * se_var
    # closed form matches on the same draw
    z = rng.standard_normal(n)
    closed = forward_perturb(np.full(n, x0), np.full(n, t), z, s)
    np.testing.assert_allclose(closed, mean + np.sqrt(var) * z)


def test_forward_at_T_nearly_forgets_x0():
    s = make_schedule(100)
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=5000)
    xt = forward_perturb(x0, np.full(5000, 100), rng.normal(size=5000), s)
    assert abs(np.corrcoef(x0, xt)[0, 1]) < 0.05


def test_forward_rejects_bad_step():
    s = make_schedule(10)
    with pytest.raises(ValueError):
        forward_perturb(np.zeros(2), np.array([0, 1]), np.zeros(2), s)
    with pytest.raises(ValueError):
        forward_perturb(np.zeros(2), np.array([11, 1]), np.zeros(2), s)


def test_training_loss_cases():
    s = make_schedule(10)
    x = torch.randn(4, 3, 2)
    t = torch.tensor([1, 2, 3, 4])
    assert training_loss(x, x, t, s).item() == 0.0
    assert training_loss(x, x + 1, t, s).item() == pytest.approx(1.0)
    g = training_loss(x, x + 1, t, s, "gamma").item()
    assert g == pytest.approx(float(np.mean(s.gamma[:4])), rel=1e-6)
    with pytest.raises(ValueError):
        training_loss(x, x[:, :2], t, s)
    with pytest.raises(Exception):
        training_loss(x, x * float("nan"), t, s)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.integers(0, 1000))
def test_epsilon_adapter_round_trip(t, seed):
    s = make_schedule(50)
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(3, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 4, generator=g, dtype=torch.float64)
    tt = torch.full((3,), t)
    xt = forward_perturb(x0, tt, eps, s)
    torch.testing.assert_close(x0_to_eps(xt, x0, tt, s), eps, rtol=1e-6, atol=1e-6)
    torch.testing.assert_close(eps_to_x0(xt, eps, tt, s), x0, rtol=1e-6, atol=1e-6)
    f = predict_target_adapter("epsilon", s)
    torch.testing.assert_close(f(eps, xt, tt), x0, rtol=1e-6, atol=1e-6)
    assert predict_target_adapter("x0", s)(x0, xt, tt) is x0


def _tiny(target="x0", k=1, T=8):
    net = NetworkConfig(channels=8, num_blocks=1, heads=2, ff_dim=8, step_embed_dim=8, time_embed_dim=8,
                        feature_embed_dim=4)
    torch.manual_seed(0)
    return DiffusionModel(net, DiffusionConfig(T=T, target=target), d=2, l=6, h=3, k=k)


def _data(n=12, k=1, seed=0):
    rng = np.random.default_rng(seed)
    base = np.sin(np.arange(9) / 2)[None, :, None] + 0.1 * rng.normal(size=(n, 9, 2))
    return ConditionedData(base[:, :6].astype(np.float32), base[:, 6:].astype(np.float32),
                           np.tile(np.arange(9, dtype=np.float32), (n, 1)),
                           rng.normal(size=(n, k, 3, 2)).astype(np.float32))


def test_sampler_follows_posterior_mean_without_noise():
    m = _tiny()
    d = _data(2)
    out = sample(m, d.history, d.refs, d.positions, 1, noise_fn=lambda shape: torch.zeros(shape))
    # replay by hand
    sch = m.schedule
    x = torch.zeros(2, 3, 2)
    h, r, p = (torch.as_tensor(a) for a in (d.history, d.refs, d.positions))
    with torch.no_grad():
        for t in range(sch.T, 0, -1):
            x0 = m.predict_x0(x, torch.full((2,), t), h, p, r)
            x = sch.posterior_coef_x0[t - 1] * x0 + sch.posterior_coef_xt[t - 1] * x
    np.testing.assert_allclose(out[:, 0], x.numpy(), rtol=1e-5, atol=1e-6)


def test_sampler_shapes_and_errors():
    m = _tiny()
    d = _data(3)
    out = sample(m, d.history, d.refs, d.positions, 4, generator=torch.Generator().manual_seed(0))
    assert out.shape == (3, 4, 3, 2)
    again = sample(m, d.history, d.refs, d.positions, 4, generator=torch.Generator().manual_seed(0))
    assert np.array_equal(out, again)
    with pytest.raises(ValueError):
        sample(m, d.history, d.refs, d.positions, 0)


def test_epsilon_model_is_transparent_to_sampler():
    m = _tiny("epsilon")
    d = _data(2)
    out = sample(m, d.history, d.refs, d.positions, 2)
    assert out.shape == (2, 2, 3, 2) and np.isfinite(out).all()


def test_fit_reduces_loss_and_is_deterministic():
    cfg = TrainingConfig(batch_size=4, max_epochs=6, patience=10)
    runs = []
    for _ in range(2):
        m = _tiny()
        res = fit(m, _data(16), _data(8, seed=1), cfg, seed=3)
        runs.append((res, [p.detach().clone() for p in m.parameters()]))
    (a, pa), (b, pb) = runs
    assert [h["val_loss"] for h in a.history] == [h["val_loss"] for h in b.history]
    assert all(torch.equal(x, y) for x, y in zip(pa, pb))
    assert min(h["val_loss"] for h in a.history[1:]) < a.history[0]["val_loss"]


def test_fit_gamma_with_epsilon_rejected_and_max_steps():
    with pytest.raises(ConfigError):
        fit(_tiny("epsilon"), _data(4), None, TrainingConfig(), weighting="gamma")
    res = fit(_tiny(), _data(16), None, TrainingConfig(batch_size=4, max_steps=3))
    assert res.steps == 3


def test_checkpoint_round_trip(tmp_path):
    m = _tiny()
    save_model(m, tmp_path / "m.bin", {"fingerprint": "abc"})
    back, meta = load_model(tmp_path / "m.bin")
    assert meta["fingerprint"] == "abc"
    d = _data(2)
    a = sample(m, d.history, d.refs, d.positions, 2)
    b = sample(back, d.history, d.refs, d.positions, 2)
    assert np.array_equal(a, b)


def test_adapter_transparency_identical_trajectories():
    """An epsilon-mode network whose implied x0 matches an x0-mode network samples identically."""
    x0_model = _tiny("x0").double()
    eps_model = _tiny("epsilon").double()
    for p in x0_model.parameters():
        if torch.count_nonzero(p) == 0:
            torch.nn.init.normal_(p, std=0.3)

    def eps_raw(x_t, t, history, positions, refs):
        return x0_to_eps(x_t, x0_model.raw(x_t, t, history, positions, refs), t, eps_model.schedule)

    eps_model.raw = eps_raw
    d = _data(3)
    a = sample(x0_model, d.history, d.refs, d.positions, 2, generator=torch.Generator().manual_seed(1))
    b = sample(eps_model, d.history, d.refs, d.positions, 2, generator=torch.Generator().manual_seed(1))
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)
