import numpy as np
import pytest

from ftrl_steering.errors import ConfigError, NumericError, ShapeError
from ftrl_steering.nn_core import (
    Activation,
    AdamState,
    DdpgHyperparams,
    DenseLayer,
    MlpSpec,
    ModelParams,
    adam_init,
    adam_step,
    flatten,
    init_params,
    mlp_backward,
    mlp_forward,
    soft_update,
    unflatten,
    zeros_like,
)


def params_from(*layers):
    return ModelParams(tuple(DenseLayer(np.array(w, float), np.array(b, float)) for w, b in layers))


def test_spec_shapes_and_param_count():
    spec = MlpSpec((60, 128, 128, 128, 1))
    assert spec.input_size == 60
    assert spec.output_size == 1
    assert spec.shapes == [(128, 60), (128, 128), (128, 128), (1, 128)]
    assert spec.param_count == 128 * 61 + 2 * 128 * 129 + 129


def test_spec_rejects_single_layer():
    with pytest.raises(ShapeError):
        MlpSpec((3,))


def test_spec_rejects_unsupported_activations():
    with pytest.raises(ShapeError):
        MlpSpec((3, 2), hidden_activation=Activation.TANH)
    with pytest.raises(ShapeError):
        MlpSpec((3, 2), output_activation=Activation.RELU)


def test_forward_identity_network():
    spec = MlpSpec((2, 2), output_activation=Activation.LINEAR)
    params = params_from(([[1, 0], [0, 1]], [0, 0]))
    out, _ = mlp_forward(params, spec, np.array([3.0, -4.0]))
    assert out.tolist() == [3.0, -4.0]


def test_forward_tanh_output_stays_in_range(rng):
    spec = MlpSpec((4, 8, 1), output_activation=Activation.TANH)
    params = init_params(spec, rng)
    out, _ = mlp_forward(params, spec, rng.normal(scale=100.0, size=(50, 4)))
    assert out.shape == (50, 1)
    assert np.all(np.abs(out) <= 1.0)


def test_forward_rejects_wrong_input_size(rng):
    spec = MlpSpec((3, 2))
    params = init_params(spec, rng)
    with pytest.raises(ShapeError):
        mlp_forward(params, spec, np.zeros(4))


def test_forward_rejects_params_of_another_spec(rng):
    params = init_params(MlpSpec((3, 2)), rng)
    with pytest.raises(ShapeError):
        mlp_forward(params, MlpSpec((3, 4, 2)), np.zeros(3))


def test_init_params_within_fan_in_bound(rng):
    spec = MlpSpec((25, 4, 1))
    params = init_params(spec, rng)
    assert np.all(np.abs(params.layers[0].weight) <= 1 / 5)
    assert np.all(np.abs(params.layers[1].weight) <= 1 / 2)


@pytest.mark.parametrize("output", [Activation.LINEAR, Activation.TANH])
def test_backward_matches_finite_differences(rng, output):
    spec = MlpSpec((3, 5, 4, 2), output_activation=output)
    params = init_params(spec, rng)
    x = rng.normal(size=(4, 3))
    upstream = rng.normal(size=(4, 2))

    def loss(vector):
        out, _ = mlp_forward(unflatten(vector, spec), spec, x)
        return float(np.sum(out * upstream))

    _, cache = mlp_forward(params, spec, x)
    grads, _ = mlp_backward(params, cache, upstream)
    theta = flatten(params)
    h = 1e-6
    numeric = np.array(
        [
            (loss(theta + h * np.eye(theta.size)[i]) - loss(theta - h * np.eye(theta.size)[i])) / (2 * h)
            for i in range(theta.size)
        ]
    )
    analytic = flatten(grads)
    # entry-wise; entries below 1e-3 in magnitude are compared against 1e-3
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    assert np.all(np.abs(analytic - numeric) / scale < 1e-5)


def test_backward_input_gradient(rng):
    spec = MlpSpec((3, 4, 1), output_activation=Activation.TANH)
    params = init_params(spec, rng)
    x = rng.normal(size=3)
    _, cache = mlp_forward(params, spec, x)
    _, input_grad = mlp_backward(params, cache, np.ones(1))
    h = 1e-6
    for i in range(3):
        e = np.eye(3)[i] * h
        numeric = (mlp_forward(params, spec, x + e)[0][0] - mlp_forward(params, spec, x - e)[0][0]) / (2 * h)
        assert input_grad[i] == pytest.approx(numeric, rel=1e-5, abs=1e-9)


def test_backward_sums_over_batch(rng):
    spec = MlpSpec((2, 3, 1))
    params = init_params(spec, rng)
    x = rng.normal(size=(2, 2))
    _, cache = mlp_forward(params, spec, x)
    batched, _ = mlp_backward(params, cache, np.ones((2, 1)))
    singles = []
    for row in x:
        _, c = mlp_forward(params, spec, row)
        singles.append(flatten(mlp_backward(params, c, np.ones(1))[0]))
    assert np.allclose(flatten(batched), singles[0] + singles[1], rtol=0, atol=1e-12)


def test_backward_rejects_mismatched_gradient(rng):
    spec = MlpSpec((2, 1))
    params = init_params(spec, rng)
    _, cache = mlp_forward(params, spec, np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        mlp_backward(params, cache, np.zeros((2, 1)))


def test_adam_first_step_moves_by_learning_rate():
    params = params_from(([[1.0, -1.0]], [0.5]))
    grads = params_from(([[2.0, -3.0]], [0.0]))
    new, state = adam_step(params, grads, adam_init(params, 1e-3))
    assert state.step == 1
    # bias-corrected first step is lr * sign(g)
    assert new.layers[0].weight[0, 0] == pytest.approx(1.0 - 1e-3)
    assert new.layers[0].weight[0, 1] == pytest.approx(-1.0 + 1e-3)
    assert new.layers[0].bias[0] == 0.5


def test_adam_rejects_non_finite_gradient():
    params = params_from(([[1.0]], [0.0]), ([[1.0]], [0.0]))
    grads = params_from(([[1.0]], [0.0]), ([[np.nan]], [0.0]))
    with pytest.raises(NumericError, match="layer 1"):
        adam_step(params, grads, adam_init(params, 1e-3))


def test_adam_state_validation():
    params = params_from(([[1.0]], [0.0]))
    with pytest.raises(ConfigError):
        AdamState(zeros_like(params), zeros_like(params), beta1=1.0)


@pytest.mark.parametrize("tau", [0.0, 0.02, 1.0])
def test_soft_update(rng, tau):
    spec = MlpSpec((3, 2))
    target, source = init_params(spec, rng), init_params(spec, rng)
    blended = soft_update(target, source, tau)
    expected = (1 - tau) * flatten(target) + tau * flatten(source)
    assert np.allclose(flatten(blended), expected, rtol=0, atol=1e-15)
    if tau == 0.0:
        assert blended.bitwise_equal(target)
    if tau == 1.0:
        assert blended.bitwise_equal(source)


def test_soft_update_rejects_out_of_range_tau(rng):
    params = init_params(MlpSpec((2, 1)), rng)
    with pytest.raises(ConfigError):
        soft_update(params, params, 1.5)


def test_flatten_order():
    params = params_from(([[1, 2], [3, 4]], [5, 6]), ([[7, 8]], [9]))
    assert flatten(params).tolist() == [1, 2, 3, 4, 5, 6, 7, 8, 9]
    assert unflatten(flatten(params), MlpSpec((2, 2, 1))).bitwise_equal(params)


def test_unflatten_rejects_wrong_length():
    with pytest.raises(ShapeError):
        unflatten(np.zeros(5), MlpSpec((2, 2)))


def test_model_params_reject_disagreeing_bias():
    with pytest.raises(ShapeError):
        params_from(([[1, 2]], [1, 2]))


def test_hyperparam_defaults():
    hp = DdpgHyperparams()
    assert (hp.gamma, hp.tau, hp.actor_lr, hp.critic_lr) == (0.99, 0.02, 1e-4, 1e-4)
    assert (hp.buffer_capacity, hp.batch_size) == (2500, 32)


def test_hyperparams_reject_batch_larger_than_buffer():
    with pytest.raises(ConfigError, match="ddpg.batch_size"):
        DdpgHyperparams(batch_size=64, buffer_capacity=32)


def test_forward_matches_naive_matmul(rng):
    spec = MlpSpec((3, 4, 2), output_activation=Activation.LINEAR)
    params = init_params(spec, rng)
    x = rng.normal(size=3)
    (w1, b1), (w2, b2) = params.layers
    hidden = [max(0.0, sum(w1[j, i] * x[i] for i in range(3)) + b1[j]) for j in range(4)]
    expected = [sum(w2[k, j] * hidden[j] for j in range(4)) + b2[k] for k in range(2)]
    out, _ = mlp_forward(params, spec, x)
    assert np.allclose(out, expected, rtol=0, atol=1e-12)


def test_backward_by_hand():
    spec = MlpSpec((1, 1), output_activation=Activation.LINEAR)
    params = params_from(([[2.0]], [0.0]))
    _, cache = mlp_forward(params, spec, np.array([3.0]))
    grads, input_grad = mlp_backward(params, cache, np.ones(1))
    assert grads.layers[0].weight.tolist() == [[3.0]]
    assert grads.layers[0].bias.tolist() == [1.0]
    assert input_grad.tolist() == [2.0]


def test_zero_output_gradient_gives_zero_gradients(rng):
    spec = MlpSpec((4, 8, 1))
    params = init_params(spec, rng)
    _, cache = mlp_forward(params, spec, rng.normal(size=4))
    grads, input_grad = mlp_backward(params, cache, np.zeros(1))
    assert not flatten(grads).any()
    assert not input_grad.any()


def test_adam_two_steps_follow_recurrence():
    params = params_from(([[1.0, -2.0]], [0.5]))
    grads = params_from(([[0.3, -1.2]], [2.0]))
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    state = adam_init(params, lr)
    current = params
    for _ in range(2):
        current, state = adam_step(current, grads, state)

    expected = []
    for p, g in zip(flatten(params), flatten(grads)):
        m = v = 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p = p - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
        expected.append(p)
    assert state.step == 2
    assert np.allclose(flatten(current), expected, rtol=0, atol=1e-12)


def test_soft_update_is_affine(rng):
    spec = MlpSpec((3, 4, 1))
    target, source = init_params(spec, rng), init_params(spec, rng)
    forward = flatten(soft_update(target, source, 0.3))
    backward = flatten(soft_update(source, target, 0.3))
    assert np.allclose(forward + backward, flatten(target) + flatten(source), rtol=0, atol=1e-12)
