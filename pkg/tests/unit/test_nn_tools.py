import numpy as np
import pytest

from tools.gradcheck_tools import check_layers
from tools.nn_tools import (
    ConvSpec,
    DenseSpec,
    LayerParams,
    adam_step,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_forward,
    init_params,
    orthogonal_matrix,
    parameter_names,
    relu_backward,
    relu_forward,
)
from utils.error_handling import ValidationError


def test_identity_kernel_reproduces_the_input(rng):
    x = rng.standard_normal((2, 1, 6, 5))
    weight = np.zeros((1, 1, 3, 3))
    weight[0, 0, 1, 1] = 1.0
    out, _ = conv2d_forward(x, weight, np.zeros(1))
    assert np.array_equal(out, x)


def test_zero_sum_kernel_kills_constants_in_the_interior():
    x = np.full((1, 1, 7, 7), 2.5)
    weight = np.array([[[[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]]]])
    out, _ = conv2d_forward(x, weight, np.zeros(1))
    assert np.max(np.abs(out[0, 0, 1:-1, 1:-1])) < 1e-14
    # zero padding makes the border respond
    assert out[0, 0, 0, 0] > 0


def test_conv_bias_and_channel_checks(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    weight = np.zeros((3, 2, 3, 3))
    out, _ = conv2d_forward(x, weight, np.array([1.0, 2.0, 3.0]))
    assert out.shape == (1, 3, 4, 4)
    assert np.all(out[0, 2] == 3.0)
    with pytest.raises(ValidationError):
        conv2d_forward(x, np.zeros((3, 1, 3, 3)), np.zeros(3))
    with pytest.raises(ValidationError):
        conv2d_forward(x, np.zeros((3, 2, 5, 5)), np.zeros(3))


def test_conv_input_gradient_is_the_transposed_convolution(rng):
    x = rng.standard_normal((1, 2, 5, 4))
    weight = rng.standard_normal((3, 2, 3, 3))
    g = rng.standard_normal((1, 3, 5, 4))
    out, cache = conv2d_forward(x, weight, np.zeros(3))
    gx, _, _ = conv2d_backward(g, cache)
    assert np.vdot(out, g) == pytest.approx(np.vdot(x, gx), rel=1e-12)


def test_batchnorm_training_output_is_normalized(rng):
    x = 3.0 + 2.0 * rng.standard_normal((4, 3, 6, 6))
    out, _ = batchnorm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=True)
    assert np.max(np.abs(out.mean(axis=(0, 2, 3)))) < 1e-12
    assert np.allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)


def test_batchnorm_updates_running_statistics(rng):
    x = rng.standard_normal((2, 1, 4, 4)) + 1.0
    running_mean, running_var = np.zeros(1), np.ones(1)
    batchnorm_forward(x, np.ones(1), np.zeros(1), running_mean, running_var, training=True)
    count = x.size
    assert running_mean[0] == pytest.approx(0.1 * x.mean())
    assert running_var[0] == pytest.approx(0.9 + 0.1 * x.var() * count / (count - 1))


def test_batchnorm_inference_is_deterministic(rng):
    x = rng.standard_normal((2, 2, 4, 4))
    running_mean = np.array([0.3, -0.1])
    running_var = np.array([2.0, 0.5])
    first, _ = batchnorm_forward(x, np.ones(2), np.zeros(2), running_mean, running_var, training=False)
    second, _ = batchnorm_forward(x, np.ones(2), np.zeros(2), running_mean, running_var, training=False)
    assert np.array_equal(first, second)
    assert np.array_equal(running_mean, [0.3, -0.1])
    assert np.array_equal(running_var, [2.0, 0.5])


def test_batchnorm_rejects_an_empty_batch():
    with pytest.raises(ValidationError):
        batchnorm_forward(np.zeros((0, 1, 4, 4)), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), training=True)


def test_relu_and_its_gradient():
    out, mask = relu_forward(np.array([-1.0, 0.0, 2.0]))
    assert out.tolist() == [0.0, 0.0, 2.0]
    assert relu_backward(np.ones(3), mask).tolist() == [0.0, 0.0, 1.0]
    with pytest.raises(ValidationError):
        relu_backward(np.ones(2), mask)


def test_dense_layer_starts_as_all_ones():
    params = init_params([DenseSpec("mlp.fc1", 3, 2)], seed=0)
    assert np.all(params["mlp.fc1.weight"] == 1.0)
    assert np.all(params["mlp.fc1.bias"] == 0.0)
    out, _ = dense_forward(np.array([[1.0, 2.0, 3.0]]), params["mlp.fc1.weight"], params["mlp.fc1.bias"])
    assert out.tolist() == [[6.0, 6.0]]
    with pytest.raises(ValidationError):
        dense_forward(np.ones((1, 4)), params["mlp.fc1.weight"], params["mlp.fc1.bias"])


def test_orthogonal_init_for_wide_and_tall_layers():
    params = init_params([ConvSpec("a", 2, 4), ConvSpec("b", 1, 32, batch_norm=True)], seed=5)
    wide = params["a.weight"].reshape(4, -1)
    tall = params["b.weight"].reshape(32, -1)
    assert np.linalg.norm(wide @ wide.T - np.eye(4)) < 1e-10
    assert np.linalg.norm(tall.T @ tall - np.eye(9)) < 1e-10
    assert np.all(params["b.bn_scale"] == 1.0)
    assert np.all(params["b.running_var"] == 1.0)


def test_same_seed_gives_identical_initialization():
    specs = [ConvSpec("c1", 1, 8, batch_norm=True), ConvSpec("c2", 8, 1)]
    first = init_params(specs, seed=3)
    second = init_params(specs, seed=3)
    third = init_params(specs, seed=4)
    for name in parameter_names(specs):
        assert np.array_equal(first[name], second[name])
    assert not np.array_equal(first["c1.weight"], third["c1.weight"])


def test_orthogonal_matrix_is_sign_normalized(rng):
    q = orthogonal_matrix(6, 3, rng)
    assert np.allclose(q.T @ q, np.eye(3), atol=1e-12)


def test_adam_leaves_parameters_without_gradient_unchanged():
    params = LayerParams()
    params.add("w", np.array([1.0, -2.0]))
    params.zero_grad()
    adam_step(params, lr=0.1)
    assert params["w"].tolist() == [1.0, -2.0]
    assert params.step == 1


def test_adam_moves_by_the_learning_rate_under_a_constant_gradient():
    params = LayerParams()
    params.add("w", np.zeros(3))
    for _ in range(1000):
        params.params["w"].grad = np.array([1.0, -4.0, 0.25])
        adam_step(params, lr=1e-3)
    expected = np.array([-1.0, 1.0, -1.0])
    assert np.allclose(params["w"], expected, rtol=1e-2)


def test_adam_is_deterministic():
    def run():
        params = LayerParams()
        params.add("w", np.linspace(-1.0, 1.0, 5))
        for step in range(20):
            params.params["w"].grad = np.sin(params["w"] + step)
            adam_step(params, lr=1e-2)
        return params["w"]

    assert np.array_equal(run(), run())


def test_state_tensors_round_trip():
    specs = [ConvSpec("c", 1, 2, batch_norm=True), DenseSpec("fc", 2, 1)]
    params = init_params(specs, seed=1)
    params.zero_grad()
    for _, param in params.items():
        param.grad += 0.5
    adam_step(params)
    tensors = params.state_tensors(prefix="net.")
    assert "net.c.weight.adam_m" in tensors
    assert tensors["net.adam_step"][0] == 1.0

    restored = init_params(specs, seed=9)
    restored.load_state_tensors(tensors, prefix="net.")
    assert restored.step == 1
    for name, param in params.items():
        assert np.array_equal(restored[name], param.value)
        assert np.array_equal(restored.params[name].m, param.m)
    assert np.array_equal(restored["c.running_mean"], params["c.running_mean"])


def test_missing_checkpoint_tensor_is_reported():
    params = init_params([DenseSpec("fc", 2, 1)], seed=0)
    tensors = params.state_tensors()
    del tensors["fc.bias"]
    with pytest.raises(ValidationError):
        init_params([DenseSpec("fc", 2, 1)], seed=0).load_state_tensors(tensors)


def test_copy_is_independent():
    params = init_params([DenseSpec("fc", 2, 1)], seed=0)
    clone = params.copy()
    clone.params["fc.weight"].value[0, 0] = 5.0
    assert params["fc.weight"][0, 0] == 1.0


def test_layer_gradients_match_finite_differences():
    for result in check_layers(seed=0):
        assert result.passed, f"{result.suite}: {result.max_rel_error:.2e}"
