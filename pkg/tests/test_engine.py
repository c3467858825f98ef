import io
import math

import numpy as np
import pytest
import torch

from unlearnlab import engine as E


def central_diff(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + h
        up = float(f(x))
        flat[i] = old - h
        down = float(f(x))
        flat[i] = old
        g.view(-1)[i] = (up - down) / (2 * h)
    return g


def test_softmax_symmetric():
    out = E.softmax(E.tensor([0.0, 0.0]))
    assert torch.allclose(out, torch.tensor([0.5, 0.5]))


def test_softmax_mask_excludes_entries():
    out = E.softmax(E.tensor([1.0, 5.0, 2.0]), torch.tensor([True, False, True]))
    assert float(out[1]) == 0.0
    assert math.isclose(float(out.sum()), 1.0)


def test_layer_norm_constant_vector_is_zero():
    x = E.tensor([3.0, 3.0, 3.0, 3.0])
    out = E.layer_norm(x, torch.ones(4), torch.zeros(4))
    assert torch.equal(out, torch.zeros(4))


def test_cross_entropy_uniform():
    logits = E.tensor([[math.log(0.25)] * 4])
    for t in range(4):
        assert math.isclose(float(E.cross_entropy(logits, torch.tensor([t]))), math.log(4), rel_tol=1e-12)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(E.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        E.matmul(torch.zeros(2, 3), torch.zeros(4, 5))
    with pytest.raises(E.ShapeError):
        E.add(torch.zeros(3), torch.zeros(4))


def test_non_finite_input_rejected():
    with pytest.raises(E.NonFiniteError):
        E.softmax(torch.tensor([0.0, float("nan")]))
    with pytest.raises(E.NonFiniteError):
        E.tensor([1.0, float("inf")])


def test_backward_square():
    x = E.tensor(3.0, requires_grad=True)
    E.backward(x * x)
    assert float(x.grad) == 6.0


def test_backward_product():
    x = E.tensor(2.0, requires_grad=True)
    y = E.tensor(5.0, requires_grad=True)
    E.backward(E.mul(x, y))
    assert (float(x.grad), float(y.grad)) == (5.0, 2.0)


def test_backward_rejects_non_scalar():
    x = E.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(E.ShapeError):
        E.backward(x * 2)


def test_fan_out_accumulates():
    x = E.tensor(1.5, requires_grad=True)
    E.backward(E.add(E.mul(x, x), E.mul(x, E.tensor(4.0))))
    assert math.isclose(float(x.grad), 2 * 1.5 + 4.0)


@pytest.mark.parametrize("seed", range(5))
def test_two_layer_net_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    # 12 parameters: W1 (2x3), W2 (3x2)
    w1 = E.tensor(rng.normal(size=(2, 3)), requires_grad=True)
    w2 = E.tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = E.tensor(rng.normal(size=(4, 2)))
    target = torch.as_tensor(rng.integers(0, 2, size=4))
    gain, bias = torch.ones(3), torch.zeros(3)

    def loss_fn():
        h = E.gelu(E.layer_norm(E.matmul(x, w1), gain, bias))
        return E.cross_entropy(E.matmul(h, w2), target) + 0.1 * E.l2_norm(E.relu(w1))

    E.backward(loss_fn())
    with torch.no_grad():
        for w in (w1, w2):
            num = central_diff(lambda _: loss_fn(), w.data)
            rel = (w.grad - num).abs() / (num.abs().clamp_min(1e-6))
            assert float(rel.max()) < 1e-4


def test_capture_registers_and_returns_gradients():
    cap = E.ActivationCapture({"h"})
    x = E.tensor([1.0, -2.0], requires_grad=True)
    h = cap.record("h", E.mul(x, E.tensor(3.0)))
    ignored = cap.record("other", h)
    assert "other" not in cap.values and ignored is h
    loss = (h * h).sum()
    (g,) = E.grad_wrt_activation(loss, cap, ["h"])
    np.testing.assert_allclose(g, 2 * h.detach().numpy())


def test_capture_unregistered_site_rejected():
    cap = E.ActivationCapture()
    x = E.tensor([1.0], requires_grad=True)
    with pytest.raises(E.EngineError, match="not registered"):
        E.grad_wrt_activation((x * 2).sum(), cap, ["h"])


def test_capture_frozen_input_becomes_leaf():
    cap = E.ActivationCapture({"h"})
    h = cap.record("h", torch.tensor([2.0, 3.0]))
    (g,) = E.grad_wrt_activation((h ** 2).sum(), cap, ["h"])
    np.testing.assert_allclose(g, [4.0, 6.0])


def test_tensor_io_round_trip():
    t = torch.randn(3, 4, 2, dtype=torch.float64)
    buf = io.BytesIO()
    E.write_tensor(buf, t)
    buf.seek(0)
    assert torch.equal(E.read_tensor(buf), t)
    assert len(E.tensor_bytes(t)) == 4 + 3 * 8 + t.numel() * 8


def test_tensor_io_truncated():
    raw = E.tensor_bytes(torch.ones(5))
    with pytest.raises(E.EngineError):
        E.read_tensor(io.BytesIO(raw[:-3]))
