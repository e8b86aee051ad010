"""Engine tests: forward arithmetic, gradients vs central finite differences,
SGD/Adam update rules."""

import numpy as np
import pytest

from celm.nn import (AdamState, DenseLayer, DimensionError, DomainError, MlpModel, adam_step,
                     forward, init_mlp, input_grad, loss_and_param_grad, parameter_checksum,
                     sgd_step, softmax)

# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def ce_loss_by_forward(model, x, labels):
    """Independent cross-entropy: forward pass + log-softmax, no backprop code."""
    logits = forward(model, x)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), np.asarray(labels) - 1].mean())


def fd_grad(fn, tensor, h=1e-4):
    """Central finite differences of a scalar function over one tensor."""
    grad = np.zeros_like(tensor)
    flat = tensor.ravel()
    gflat = grad.ravel()
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        f_plus = fn()
        flat[j] = orig - h
        f_minus = fn()
        flat[j] = orig
        gflat[j] = (f_plus - f_minus) / (2 * h)
    return grad


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-10)


def smooth_model_and_batch(seed, dims=(3, 6, 4), batch=4, margin=1e-3):
    """Random model/batch whose hidden pre-activations stay clear of the ReLU
    kink, so finite differences remain valid; returns None for unlucky seeds."""
    rng = np.random.default_rng(seed)
    model = init_mlp(list(dims), rng)
    x = rng.standard_normal((batch, dims[0]))
    labels = rng.integers(1, dims[-1] + 1, size=batch)
    h = x
    for layer in model.layers[:-1]:
        z = h @ layer.weights.T + layer.bias
        if np.abs(z).min() < margin:
            return None
        h = np.maximum(z, 0.0)
    return model, x, labels


def smooth_cases(count, **kwargs):
    cases = []
    seed = 0
    while len(cases) < count:
        case = smooth_model_and_batch(seed, **kwargs)
        if case is not None:
            cases.append(case)
        seed += 1
    return cases


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_forward_identity_weights():
    model = MlpModel([DenseLayer(np.eye(2), np.zeros(2))])
    assert np.array_equal(forward(model, np.array([3.0, -2.0])), [[3.0, -2.0]])


def test_forward_zero_input_propagates_biases():
    w1 = np.array([[1.0, 2.0], [-1.0, 0.0], [0.0, 1.0]])
    b1 = np.array([0.5, -1.0, 2.0])
    w2 = np.array([[1.0, -1.0, 2.0], [0.0, 1.0, 1.0]])
    b2 = np.array([1.0, -3.0])
    model = MlpModel([DenseLayer(w1, b1), DenseLayer(w2, b2)])
    expected = np.maximum(b1, 0.0) @ w2.T + b2
    assert np.allclose(forward(model, np.zeros(2)), [expected])


def test_forward_two_layer_hand_arithmetic():
    # z1 = W1 x + b1, relu, z2 = W2 a + b2 computed by hand for integer weights
    model = MlpModel([
        DenseLayer(np.array([[1.0, 2.0], [-1.0, 0.0], [0.0, 1.0]]), np.array([0.0, 1.0, -1.0])),
        DenseLayer(np.array([[1.0, -1.0, 2.0], [0.0, 1.0, 1.0]]), np.array([1.0, 0.0])),
    ])
    x = np.array([[1.0, 1.0], [0.0, 2.0]])
    # x=[1,1]: z1=[3,0,0] -> relu [3,0,0] -> z2=[3+1, 0]=[4,0]
    # x=[0,2]: z1=[4,1,1] -> relu [4,1,1] -> z2=[4-1+2+1, 1+1]=[6,2]
    assert np.array_equal(forward(model, x), [[4.0, 0.0], [6.0, 2.0]])


def test_forward_is_pure_and_deterministic():
    model, x, _ = smooth_cases(1)[0]
    before = parameter_checksum(model)
    a = forward(model, x)
    b = forward(model, x)
    assert np.array_equal(a, b)
    assert parameter_checksum(model) == before


def test_forward_shape_mismatch():
    model = MlpModel([DenseLayer(np.eye(3), np.zeros(3))])
    with pytest.raises(DimensionError):
        forward(model, np.zeros((2, 4)))


# ---------------------------------------------------------------------------
# loss and parameter gradients
# ---------------------------------------------------------------------------

def test_loss_uniform_logits_is_log_k():
    for k in (2, 5, 10):
        model = MlpModel([DenseLayer(np.zeros((k, 3)), np.zeros(k))])
        loss, _ = loss_and_param_grad(model, np.ones((4, 3)), np.full(4, 1))
        assert loss == pytest.approx(np.log(k), abs=1e-12)


def test_loss_saturates_to_zero_for_confident_correct_logit():
    model = MlpModel([DenseLayer(np.zeros((3, 2)), np.array([50.0, 0.0, 0.0]))])
    loss, _ = loss_and_param_grad(model, np.zeros((2, 2)), np.array([1, 1]))
    assert 0.0 <= loss < 1e-20


def test_loss_nonnegative():
    for model, x, labels in smooth_cases(5):
        loss, _ = loss_and_param_grad(model, x, labels)
        assert loss >= 0.0


def test_label_out_of_range():
    model = MlpModel([DenseLayer(np.eye(3), np.zeros(3))])
    with pytest.raises(DomainError):
        loss_and_param_grad(model, np.zeros((1, 3)), np.array([0]))
    with pytest.raises(DomainError):
        loss_and_param_grad(model, np.zeros((1, 3)), np.array([4]))


def test_param_grads_match_finite_differences():
    for model, x, labels in smooth_cases(5):
        _, grads = loss_and_param_grad(model, x, labels)
        for p, g in zip(model.parameters(), grads):
            fd = fd_grad(lambda: ce_loss_by_forward(model, x, labels), p)
            assert rel_err(g, fd) < 1e-4


# ---------------------------------------------------------------------------
# input gradients
# ---------------------------------------------------------------------------

def test_input_grad_linear_model_analytic():
    w = np.array([[1.0, -2.0, 0.5], [0.0, 1.0, 3.0]])
    model = MlpModel([DenseLayer(w, np.zeros(2))])
    x = np.array([[0.3, -0.7, 1.1]])
    lam = 0.25
    for c in (1, 2):
        assert np.allclose(input_grad(model, x, c, lam), w[c - 1] - 2 * lam * x, atol=1e-14)


def test_input_grad_stationary_point():
    w = np.array([[1.0, 0.0], [0.0, -2.0]])
    model = MlpModel([DenseLayer(w, np.zeros(2))])
    lam = 0.001
    x_star = w[0] / (2 * lam)
    assert np.allclose(input_grad(model, x_star, 1, lam), 0.0, atol=1e-10)


def test_input_grad_matches_finite_differences():
    lam = 0.001
    for model, x, _ in smooth_cases(5):
        for c in range(1, model.output_dim + 1):
            g = input_grad(model, x, c, lam)

            def objective():
                s = forward(model, x)[:, c - 1]
                return float((s - lam * (x * x).sum(axis=1)).sum())

            fd = fd_grad(objective, x)
            assert rel_err(g, fd) < 1e-4


def test_input_grad_rejects_negative_reg():
    model = MlpModel([DenseLayer(np.eye(2), np.zeros(2))])
    with pytest.raises(DomainError):
        input_grad(model, np.zeros(2), 1, -0.1)


# ---------------------------------------------------------------------------
# optimizer steps
# ---------------------------------------------------------------------------

def test_sgd_step_arithmetic():
    p = [np.array([1.0])]
    sgd_step(p, [np.array([2.0])], 0.1)
    assert p[0][0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_zero_grad_is_identity():
    p = [np.array([1.5, -2.0])]
    before = p[0].copy()
    sgd_step(p, [np.zeros(2)], 0.7)
    assert np.array_equal(p[0], before)


def test_adam_first_step_hand_oracle():
    # After one step with gradient g: m_hat = g, v_hat = g^2, so the update is
    # lr * g / (|g| + eps): a sign-like move of magnitude ~lr.
    g = np.array([0.3, -2.0, 0.0])
    x = np.zeros(3)
    state = AdamState.like(x, learning_rate=0.05)
    x1 = adam_step(state, x, g)
    expected = 0.05 * g / (np.abs(g) + state.eps)
    assert np.allclose(x1, expected, atol=1e-15)
    assert state.step_count == 1


def test_adam_zero_grad_never_moves():
    x = np.array([1.0, -3.0])
    state = AdamState.like(x, learning_rate=0.1)
    for _ in range(25):
        x = adam_step(state, x, np.zeros(2))
    assert np.array_equal(x, [1.0, -3.0])


def test_adam_constant_gradient_matches_scalar_simulation():
    # Independent scalar re-implementation of bias-corrected Adam.
    lr, b1, b2, eps, g = 0.01, 0.9, 0.999, 1e-8, 2.5
    x_ref, m, v = 0.0, 0.0, 0.0
    trajectory = []
    for t in range(1, 51):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x_ref += lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        trajectory.append(x_ref)

    x = np.array([0.0])
    state = AdamState.like(x, learning_rate=lr)
    for t in range(50):
        x = adam_step(state, x, np.array([g]))
        assert x[0] == pytest.approx(trajectory[t], rel=1e-12)
    diffs = np.diff([0.0] + trajectory)
    assert (diffs > 0).all()  # monotone along the gradient direction


def test_init_mlp_fan_in_bounds_and_determinism():
    dims = [7, 5, 3]
    m1 = init_mlp(dims, np.random.default_rng(42))
    m2 = init_mlp(dims, np.random.default_rng(42))
    assert parameter_checksum(m1) == parameter_checksum(m2)
    for layer, fan_in in zip(m1.layers, dims):
        bound = np.sqrt(1.0 / fan_in)
        assert np.abs(layer.weights).max() <= bound
        assert np.abs(layer.bias).max() <= bound


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    p = softmax(rng.standard_normal((6, 4)) * 30)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.isfinite(p).all()
