import numpy as np
import pytest

from srlab.linalg import DimensionError
from srlab.net import (
    Knob,
    LayerQuantConfig,
    MlpModel,
    backward_linear,
    forward_linear,
    grad_approx,
    loss_and_true_grad,
    loss_only,
    quantize_weights,
)
from srlab.quant import QuantGrid, QuantizationDomainError, Rounding, ThresholdStream

U1 = QuantGrid.uniform(1.0)
RTN1 = Knob(U1, Rounding.RTN)
OFF = LayerQuantConfig()


def fd_grad(model, x, y, h=1e-4):
    out = []
    for i, w in enumerate(model.weights):
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            ws = [v.copy() for v in model.weights]
            ws[i][idx] += h
            up = loss_only(model.with_weights(ws), x, y)
            ws[i][idx] -= 2 * h
            dn = loss_only(model.with_weights(ws), x, y)
            g[idx] = (up - dn) / (2 * h)
        out.append(g)
    return out


@pytest.fixture
def small_mlp():
    rng = np.random.default_rng(0)
    model = MlpModel.init([3, 5, 2], seed=1)
    x = rng.standard_normal((6, 3))
    y = rng.standard_normal((6, 2))
    return model, x, y


# -- single layer ---------------------------------------------------------------


def test_forward_identity_is_matmul():
    rng = np.random.default_rng(0)
    a, w = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    out, cache = forward_linear(a, w, OFF, None)
    assert np.array_equal(out, a @ w)
    assert np.array_equal(cache.a_in, a) and np.array_equal(cache.w, w)


def test_forward_examples():
    out, _ = forward_linear(np.array([[0.7]]), np.array([[1.0]]), LayerQuantConfig(fwd_w=RTN1), None)
    assert out[0, 0] == 0.7
    out, _ = forward_linear(np.array([[0.7]]), np.array([[1.0]]), LayerQuantConfig(fwd_act=RTN1), None)
    assert out[0, 0] == 1.0


def test_forward_shape_mismatch():
    with pytest.raises(DimensionError):
        forward_linear(np.ones((2, 3)), np.ones((2, 2)), OFF, None)


def test_backward_example():
    _, cache = forward_linear(np.array([[0.7]]), np.array([[0.4]]), OFF, None)
    g_in, g_w = backward_linear(cache, np.array([[1.0]]), LayerQuantConfig(bwd_act=RTN1), None)
    assert g_w[0, 0] == 1.0
    assert g_in[0, 0] == 0.4


def test_backward_errors():
    _, cache = forward_linear(np.ones((2, 3)), np.ones((3, 4)), OFF, None)
    with pytest.raises(DimensionError):
        backward_linear(cache, np.ones((2, 3)), OFF, None)
    with pytest.raises(ValueError, match="cache"):
        backward_linear(None, np.ones((2, 4)), OFF, None)


def test_backward_sr_unbiased():
    rng = np.random.default_rng(2)
    a, w, g = rng.uniform(-2, 2, (3, 2)), rng.uniform(-2, 2, (2, 2)), rng.uniform(-2, 2, (3, 2))
    _, cache = forward_linear(a, w, OFF, None)
    cfg = LayerQuantConfig(bwd_act=Knob(U1, Rounding.SR), bwd_grad=Knob(U1, Rounding.SR))
    s = ThresholdStream.prng(0)
    trials = 20000
    gw = np.stack([backward_linear(cache, g, cfg, s)[1] for _ in range(trials)])
    se = gw.std(axis=0, ddof=1) / np.sqrt(trials)
    assert np.all(np.abs(gw.mean(axis=0) - a.T @ g) <= 4 * se)


def test_threshold_draw_order():
    # forward: A_in then W; backward: A_in, W, then the upstream gradient
    a = np.full((1, 2), 0.5)
    w = np.full((2, 1), 0.5)
    sr = Knob(U1, Rounding.SR)
    cfg = LayerQuantConfig(sr, sr, sr, sr, sr)
    model = MlpModel([w], activation="none")
    est, _ = grad_approx(model, a, np.zeros((1, 1)), cfg, ThresholdStream.prng(3))
    eps = ThresholdStream.prng(3).draw(4 + 5)

    def q(e, shape):
        return np.where(e <= 0.5, 1.0, 0.0).reshape(shape)

    a_f, w_f = q(eps[0:2], (1, 2)), q(eps[2:4], (2, 1))
    out = a_f @ w_f
    seed_grad = 2.0 * out
    a_b, w_b = q(eps[4:6], (1, 2)), q(eps[6:8], (2, 1))
    g_b = seed_grad  # integer-valued, already on the grid; its threshold is eps[8]
    assert np.array_equal(est.weights_fwd[0], w_f)
    assert np.array_equal(est.weights_bwd[0], w_b)
    assert np.array_equal(est.grads[0], a_b.T @ g_b)


# -- whole network --------------------------------------------------------------


def test_one_layer_mse_analytic_gradient():
    rng = np.random.default_rng(3)
    x, y, w = rng.standard_normal((7, 4)), rng.standard_normal((7, 2)), rng.standard_normal((4, 2))
    est, loss = grad_approx(MlpModel([w], activation="none"), x, y, OFF)
    assert np.allclose(est.grads[0], x.T @ (x @ w - y) * 2 / 7, rtol=1e-12, atol=1e-12)
    assert loss == pytest.approx(np.mean(np.sum((x @ w - y) ** 2, axis=1)))


@pytest.mark.parametrize("loss", ["mse", "xent"])
def test_finite_difference_agreement(loss):
    rng = np.random.default_rng(4)
    for probe in range(10):
        model = MlpModel.init([4, 6, 3], seed=probe, loss=loss)
        x = rng.standard_normal((5, 4))
        y = rng.standard_normal((5, 3)) if loss == "mse" else np.eye(3)[rng.integers(0, 3, 5)]
        est, _ = grad_approx(model, x, y, OFF)
        for g, f in zip(est.grads, fd_grad(model, x, y)):
            scale = np.maximum(np.abs(f), 1e-3)
            assert np.all(np.abs(g - f) / scale <= 1e-5)


def test_weight_only_two_pipeline_equivalence_bitwise(small_mlp):
    model, x, y = small_mlp
    grid = QuantGrid.fp(4, 1)
    cfg = LayerQuantConfig.weight_only(grid, Rounding.SR)
    cfgs = [cfg] * model.n_layers
    w_hat = quantize_weights(model, cfgs, ThresholdStream.prng(7))
    est, loss = grad_approx(model, x, y, cfgs, weights_fwd=w_hat, weights_bwd=w_hat)
    ref_loss, ref = loss_and_true_grad(model.with_weights(w_hat), x, y)
    assert loss == ref_loss
    for g, r in zip(est.grads, ref):
        assert np.array_equal(g, r)


def test_sr_mixed_unbiased_for_weight_only_gradient(small_mlp):
    model, x, y = small_mlp
    grid = QuantGrid.uniform(0.25)
    cfg = LayerQuantConfig.sr_mixed(grid, grid, Rounding.SR)
    w_hat = quantize_weights(model, [cfg] * 2, ThresholdStream.prng(1))
    _, target = loss_and_true_grad(model.with_weights(w_hat), x, y)
    s = ThresholdStream.prng(2)
    trials = 4000
    flat = np.stack([grad_approx(model, x, y, cfg, s, weights_fwd=w_hat, weights_bwd=w_hat)[0].flat for _ in range(trials)])
    tgt = np.concatenate([t.ravel() for t in target])
    se = flat.std(axis=0, ddof=1) / np.sqrt(trials)
    assert np.all(np.abs(flat.mean(axis=0) - tgt) <= 4 * se + 1e-12)


def test_rtn_everywhere_is_biased():
    # inputs in (0, 0.45) all round to zero on a unit grid, so the RTN gradient vanishes
    rng = np.random.default_rng(8)
    x = rng.uniform(0.05, 0.45, (200, 1))
    y = np.ones((200, 1))
    model = MlpModel([np.array([[0.3]])], activation="none")
    per = np.array([grad_approx(model, x[k], y[k], LayerQuantConfig.rtn_all(U1))[0].flat[0] for k in range(200)])
    true = np.array([grad_approx(model, x[k], y[k], OFF)[0].flat[0] for k in range(200)])
    err = per - true
    assert abs(err.mean()) > 10 * err.std(ddof=1) / np.sqrt(err.size)


def test_batched_equals_mean_of_per_sample(small_mlp):
    model, x, y = small_mlp
    cfg = LayerQuantConfig.rtn_all(QuantGrid.fp(4, 2))
    est, _ = grad_approx(model, x, y, cfg)
    per = [grad_approx(model, x[k], y[k], cfg)[0] for k in range(x.shape[0])]
    for i in range(model.n_layers):
        assert np.allclose(est.grads[i], np.mean([p.grads[i] for p in per], axis=0), rtol=1e-12, atol=1e-14)


def test_grad_shapes_match_weights(small_mlp):
    model, x, y = small_mlp
    est, _ = grad_approx(model, x, y, OFF)
    assert [g.shape for g in est.grads] == [w.shape for w in model.weights]


def test_errors_name_the_layer(small_mlp):
    model, x, y = small_mlp
    with pytest.raises(ValueError, match="W1"):
        MlpModel([model.weights[0], np.full((5, 2), np.nan)])
    cfg = [OFF, LayerQuantConfig(fwd_act=RTN1)]
    x_bad = x.copy()
    x_bad[0, 0] = 1e308  # overflows to inf in the hidden layer
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(QuantizationDomainError, match="layer 1: "):
            grad_approx(model.with_weights([model.weights[0] * 1e10, model.weights[1]]), x_bad, y, cfg)


def test_data_shape_errors(small_mlp):
    model, x, y = small_mlp
    with pytest.raises(DimensionError):
        grad_approx(model, x[:, :2], y, OFF)
    with pytest.raises(DimensionError):
        grad_approx(model, x, y[:3], OFF)


def test_model_validation():
    with pytest.raises(DimensionError):
        MlpModel([np.ones((2, 3)), np.ones((2, 1))])
    with pytest.raises(ValueError):
        MlpModel([np.ones((2, 3))], activation="tanh")
    with pytest.raises(ValueError):
        MlpModel([])
    assert MlpModel.init([3, 4, 2], 0).n_params == 20


def test_true_grad_examples(small_mlp):
    model, x, y = small_mlp
    loss1, g1 = loss_and_true_grad(model, x[:1], y[:1])
    est, loss = grad_approx(model, x[0], y[0], OFF)
    assert loss1 == loss and all(np.array_equal(a, b) for a, b in zip(g1, est.grads))
    l_a, g_a = loss_and_true_grad(model, x, y)
    l_b, g_b = loss_and_true_grad(model, np.vstack([x, x]), np.vstack([y, y]))
    assert l_a == pytest.approx(l_b, rel=1e-14)
    assert all(np.allclose(a, b, rtol=1e-13, atol=1e-15) for a, b in zip(g_a, g_b))
    with pytest.raises(ValueError):
        loss_and_true_grad(model, np.zeros((0, 3)), np.zeros((0, 2)))


def test_config_presets():
    g = QuantGrid.fp(4, 1)
    sr_mixed = LayerQuantConfig.sr_mixed(g)
    assert sr_mixed.fwd_act.is_identity
    assert sr_mixed.bwd_act.mode is Rounding.SR and sr_mixed.bwd_grad.mode is Rounding.SR
    assert sr_mixed.fwd_w == sr_mixed.bwd_w
    rtn = LayerQuantConfig.rtn_all(g)
    assert all(k.mode is Rounding.RTN for k in (rtn.fwd_act, rtn.fwd_w, rtn.bwd_act, rtn.bwd_w, rtn.bwd_grad))
    wo = LayerQuantConfig.weight_only(g, Rounding.RTN)
    assert wo.fwd_act.is_identity and wo.bwd_act.is_identity and wo.bwd_grad.is_identity
