import numpy as np
import pytest

import autodiff as ad

H = 1e-6


def numeric_gradient(build, arrays, index):
    """Central differences of ``build`` with respect to ``arrays[index]``"""
    target = arrays[index]
    grad = np.zeros_like(target)
    for position in np.ndindex(target.shape):
        original = target[position]
        target[position] = original + H
        upper = float(build(*[ad.Tensor(a) for a in arrays]).data)
        target[position] = original - H
        lower = float(build(*[ad.Tensor(a) for a in arrays]).data)
        target[position] = original
        grad[position] = (upper - lower) / (2 * H)
    return grad


def check_gradients(build, *arrays):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    params = [ad.parameter(a.copy()) for a in arrays]
    build(*params).backward()
    for index, param in enumerate(params):
        expected = numeric_gradient(build, arrays, index)
        np.testing.assert_allclose(param.grad, expected, rtol=1e-5, atol=1e-7)


def weighted(out, seed=0):
    """Scalar loss with distinct weights per output element"""
    weights = np.random.default_rng(seed).normal(size=out.shape)
    return ad.tensor_sum(out * weights)


def test_broadcast_arithmetic(rng):
    check_gradients(lambda a, b: weighted(a * b + b - a * 2.0), rng.normal(size=(3, 4)), rng.normal(size=(4,)))


def test_batched_matmul(rng):
    check_gradients(lambda a, b: weighted(a @ b), rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))


def test_reused_node_accumulates():
    x = ad.parameter(np.array([3.0]))
    (x * x + x).backward()
    assert x.grad.tolist() == [7.0]


def test_log_softmax(rng):
    check_gradients(lambda a: weighted(ad.log_softmax(a, axis=-1)), rng.normal(size=(2, 3, 6)))


def test_sigmoids(rng):
    check_gradients(lambda a: weighted(ad.sigmoid(a) + ad.log_sigmoid(a) + ad.log_sigmoid(-a)), rng.normal(size=(5,)))


def test_elu_exp_log(rng):
    values = rng.normal(size=(4, 3))
    check_gradients(lambda a: weighted(ad.elu(a) + ad.exp(a * 0.5)), values)
    check_gradients(lambda a: weighted(ad.log(a)), np.abs(values) + 0.5)


def test_shapes_and_indexing(rng):
    def build(a, b):
        joined = ad.concat([a, b], axis=-1)
        picked = joined[..., 2]
        return weighted(ad.reshape(joined, (2, -1))) + weighted(picked, seed=1) + weighted(
            ad.tensor_sum(joined, axis=1), seed=2)

    check_gradients(build, rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 3)))


def test_clamp_min_blocks_gradient_below_floor():
    x = ad.parameter(np.array([-5.0, 1.0]))
    ad.tensor_sum(ad.clamp_min(x, -2.0)).backward()

    assert x.grad.tolist() == [0.0, 1.0]


@pytest.mark.parametrize('reverse', [False, True])
def test_gru_sequence(rng, reverse):
    hidden = 3
    check_gradients(lambda x, w: weighted(ad.gru_sequence(x, w, reverse=reverse)),
                    rng.normal(size=(2, 5, 3 * hidden)), rng.normal(scale=0.5, size=(hidden, 3 * hidden)))


def test_gru_runs_in_the_requested_direction(rng):
    x = rng.normal(size=(1, 4, 6))
    w = rng.normal(size=(2, 6))
    forward = ad.gru_sequence(ad.Tensor(x), ad.Tensor(w)).data
    backward = ad.gru_sequence(ad.Tensor(x[:, ::-1]), ad.Tensor(w), reverse=True).data

    np.testing.assert_allclose(forward, backward[:, ::-1])


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        ad.parameter(np.ones(3)).backward()
