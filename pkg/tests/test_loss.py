import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from endocss.loss import SanCEConfig, ce_loss, noise_multipliers, san_scale, sance_grad, sance_loss


def _t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_ce_uniform_ln2():
    loss, _ = ce_loss(_t([[[[0.0, 0.0]]]]), torch.tensor([[[0]]]))
    assert float(loss) == pytest.approx(math.log(2), abs=1e-12)


def test_ce_closed_form():
    loss, _ = ce_loss(_t([[[[2.0, 0.0]]]]), torch.tensor([[[0]]]))
    expected = -math.log(math.exp(2) / (math.exp(2) + 1))
    assert float(loss) == pytest.approx(expected, abs=1e-12)
    assert float(loss) == pytest.approx(0.1269, abs=1e-4)


def test_ce_all_ignored(caplog):
    logits = _t(np.zeros((1, 2, 2, 3))).requires_grad_()
    loss, per = ce_loss(logits, torch.full((1, 2, 2), 255))
    assert float(loss.detach()) == 0.0 and torch.all(per == 0)
    loss.backward()
    assert "ignore_index" in caplog.text


def test_ce_bad_target():
    with pytest.raises(ValueError):
        ce_loss(_t(np.zeros((1, 1, 1, 3))), torch.tensor([[[3]]]))


def test_ce_ignores_pixels():
    logits = _t(np.random.default_rng(0).normal(size=(1, 2, 2, 3)))
    t = torch.tensor([[[0, 1], [255, 2]]])
    loss, per = ce_loss(logits, t)
    assert per[0, 1, 0] == 0
    assert float(loss) == pytest.approx(float(per.sum() / 3))


def test_scale_identity_cases():
    x = _t(np.random.default_rng(1).normal(size=(3, 2, 2, 4)))
    assert torch.equal(san_scale(x, SanCEConfig(sigma=0.5, cur_step=0), np.random.default_rng(0)), x)
    assert torch.equal(san_scale(x, SanCEConfig(mu=0, sigma=0, cur_step=5), np.random.default_rng(0)), x)


def test_scale_pinned_xi():
    x = _t(np.random.default_rng(2).normal(size=(1, 2, 2, 3)))
    cfg = SanCEConfig(sigma=0.1, cur_step=2)
    assert noise_multipliers(1, cfg, xi=[0.5])[0] == pytest.approx(1.1)
    assert torch.allclose(san_scale(x, cfg, xi=[0.5]), x * 1.1)
    assert noise_multipliers(1, cfg, xi=[-0.5])[0] == pytest.approx(1.1)


def test_sance_equals_ce_at_step0():
    x = _t(np.random.default_rng(3).normal(size=(2, 4, 4, 3)))
    y = torch.as_tensor(np.random.default_rng(4).integers(0, 3, (2, 4, 4)))
    assert float(sance_loss(x, y, SanCEConfig(cur_step=0))) == float(ce_loss(x, y)[0])


def test_sharpening_lowers_loss_on_correct_pixel():
    x = _t([[[[2.0, 0.5, -1.0]]]])
    y = torch.tensor([[[0]]])
    ce = float(ce_loss(x, y)[0])
    scaled = float(sance_loss(x, y, SanCEConfig(sigma=0.1, cur_step=2), xi=[1.0]))
    assert scaled < ce


def test_at_task_indexing():
    assert SanCEConfig().at_task(2).cur_step == 2
    assert SanCEConfig(step_indexing="one").at_task(0).cur_step == 1
    with pytest.raises(ValueError):
        SanCEConfig(sigma=-1)


def test_grad_matches_autograd():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 3, 4))
    y = rng.integers(0, 4, (2, 3, 3))
    y[0, 0, 0] = 255
    cfg = SanCEConfig(sigma=0.2, cur_step=3)
    xi = rng.standard_normal(2)
    xt = _t(x).requires_grad_()
    sance_loss(xt, torch.as_tensor(y), cfg, xi=xi).backward()
    assert np.allclose(xt.grad.numpy(), sance_grad(x, y, cfg, xi), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10), st.floats(0, 1), st.floats(0, 2), st.integers(0, 2**31))
def test_multiplier_at_least_one(step, mu, sigma, seed):
    lam = noise_multipliers(8, SanCEConfig(mu=mu, sigma=sigma, cur_step=step), np.random.default_rng(seed))
    assert np.all(lam >= 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_scaling_keeps_argmax(step, seed):
    rng = np.random.default_rng(seed)
    x = _t(rng.normal(size=(4, 3, 3, 5)))
    out = san_scale(x, SanCEConfig(sigma=0.3, cur_step=step), rng)
    assert torch.equal(out.argmax(-1), x.argmax(-1))
