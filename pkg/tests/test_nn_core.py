# 文件: tests/test_nn_core.py
import pytest
import torch

import nn_core
from errors import DataError, NumericalError, ShapeError


def _rand(*shape, seed=0):
    generator = nn_core.seeded_generator(seed)
    return torch.randn(*shape, dtype=nn_core.DTYPE, generator=generator).requires_grad_(True)


class TestPrimitives:
    def test_identity_kernel_conv(self):
        x = _rand(2, 3, 7).detach()
        kernel = torch.eye(3, dtype=nn_core.DTYPE).unsqueeze(-1)
        out = nn_core.conv1d_causal_dilated(x, kernel, dilation=1)
        torch.testing.assert_close(out, x)

    def test_identity_dense(self):
        x = _rand(4, 5).detach()
        out = nn_core.dense(x, torch.eye(5, dtype=nn_core.DTYPE), torch.zeros(5, dtype=nn_core.DTYPE))
        torch.testing.assert_close(out, x)

    def test_mse_gradient(self):
        x = torch.tensor([3.0], dtype=nn_core.DTYPE, requires_grad=True)
        loss = nn_core.mse(x, torch.zeros(1, dtype=nn_core.DTYPE))
        nn_core.backward(loss)
        assert x.grad.item() == pytest.approx(6.0)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError) as info:
            nn_core.add(torch.zeros(2, 3), torch.zeros(3, 2))
        assert info.value.left_shape == (2, 3)
        assert info.value.right_shape == (3, 2)

    def test_backward_requires_scalar(self):
        x = _rand(3)
        with pytest.raises(ShapeError):
            nn_core.backward(x * 2)

    def test_invalid_dilation(self):
        with pytest.raises(DataError):
            nn_core.conv1d_causal_dilated(torch.zeros(1, 1, 4), torch.zeros(1, 1, 2), dilation=0)

    def test_gaussian_sample_collapses_to_mean(self):
        mean = _rand(3, 4).detach()
        logvar = torch.full_like(mean, -40.0)
        out = nn_core.gaussian_sample(mean, logvar, torch.ones_like(mean))
        assert torch.max(torch.abs(out - mean)).item() < 1e-8

    @pytest.mark.parametrize('dilation', [1, 2, 3])
    def test_causality(self, dilation):
        x = _rand(1, 2, 12).detach()
        kernel = _rand(3, 2, 3, seed=1).detach()
        base = nn_core.conv1d_causal_dilated(x, kernel, dilation=dilation)
        t = 6
        perturbed = x.clone()
        perturbed[:, :, t] += 10.0
        out = nn_core.conv1d_causal_dilated(perturbed, kernel, dilation=dilation)
        torch.testing.assert_close(out[:, :, :t], base[:, :, :t], rtol=0, atol=0)
        assert not torch.allclose(out[:, :, t], base[:, :, t])


class TestGradients:
    @pytest.mark.parametrize('fn, shapes', [
        (lambda x, w, b: nn_core.dense(x, w, b), [(3, 4), (2, 4), (2,)]),
        (lambda x, k: nn_core.conv1d_causal_dilated(x, k, dilation=2), [(2, 3, 8), (2, 3, 3)]),
        (lambda x: nn_core.softplus(x), [(5,)]),
        (lambda x: nn_core.tanh(x) * nn_core.sigmoid(x), [(5,)]),
        (lambda x, y: nn_core.mse(x, y), [(3, 2), (3, 2)]),
        (lambda m, lv, n: nn_core.gaussian_sample(m, lv, n), [(2, 3), (2, 3), (2, 3)]),
        (lambda m, lv: nn_core.kl_standard_normal(m, lv), [(4, 3), (4, 3)]),
        (lambda a, b: nn_core.concat([a, b], dim=0), [(2, 3), (1, 3)]),
        (lambda x: nn_core.bce_with_logits(x, 1.0), [(6,)]),
    ])
    def test_gradcheck(self, fn, shapes):
        inputs = tuple(_rand(*shape, seed=i) for i, shape in enumerate(shapes))
        assert torch.autograd.gradcheck(fn, inputs, eps=1e-5, atol=1e-8, rtol=1e-4)


class TestAdam:
    def _single(self, value=1.0):
        p = torch.nn.Parameter(torch.tensor([value], dtype=nn_core.DTYPE))
        params = nn_core.ParameterSet({'p': p})
        return p, params

    def _step(self, p, params, optimizer, grad):
        p.grad = torch.tensor([grad], dtype=nn_core.DTYPE)
        return nn_core.adam_step(params, optimizer)

    def test_first_step_moves_by_lr(self):
        p, params = self._single()
        optimizer = nn_core.make_adam(params, 1e-4)
        assert self._step(p, params, optimizer, 1.0) == 1
        assert p.item() == pytest.approx(1.0 - 1e-4, abs=1e-11)

    def test_zero_gradient_is_fixed_point(self):
        p, params = self._single()
        optimizer = nn_core.make_adam(params, 1e-2)
        for _ in range(3):
            self._step(p, params, optimizer, 0.0)
        assert p.item() == 1.0

    def test_non_finite_gradient_aborts(self):
        p, params = self._single()
        optimizer = nn_core.make_adam(params, 1e-3)
        with pytest.raises(NumericalError):
            self._step(p, params, optimizer, float('nan'))
        assert p.item() == 1.0
        assert len(optimizer.state) == 0

    def test_deterministic(self):
        def run():
            module = nn_core.uniform_fan_in_(nn_core.TCNEncoder(2, 3, hidden=4), nn_core.seeded_generator(3))
            params = nn_core.ParameterSet.from_modules(encoder=module)
            optimizer = nn_core.make_adam(params, 1e-3)
            x = torch.randn(5, 2, 6, dtype=nn_core.DTYPE, generator=nn_core.seeded_generator(4))
            for _ in range(10):
                params.zero_grad()
                nn_core.backward(module(x).pow(2).mean())
                nn_core.adam_step(params, optimizer)
            return params.snapshot()

        first, second = run(), run()
        for name in first:
            assert torch.equal(first[name], second[name])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        module = nn_core.uniform_fan_in_(nn_core.TCNEncoder(2, 3, hidden=4), nn_core.seeded_generator(0))
        params = nn_core.ParameterSet.from_modules(encoder=module)
        path = nn_core.save_checkpoint(str(tmp_path / 'm.pt'), params, seed=11, step=5)
        payload = nn_core.load_checkpoint(path)
        assert payload['seed'] == 11 and payload['step'] == 5
        for name, tensor in params:
            assert torch.equal(payload['tensors'][name], tensor.detach())

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(DataError):
            nn_core.load_checkpoint(str(tmp_path / 'none.pt'))
