import numpy as np
import pytest
from scipy.special import softmax as scipy_softmax

from rchc import autodiff as ad
from rchc.autodiff import SGD, ComputeGraph, ParamGroup, Tensor, no_grad, sgd_step
from rchc.errors import ContractError, NumericInputError
from rchc.gradcheck import DEFAULT_TOLERANCE, check_gradients

INSTANCES = 20


def _param(rng, *shape, low=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, 2.0, size=shape)
    return Tensor(data, requires_grad=True)


# --- softmax ---

def test_softmax_examples():
    assert np.allclose(ad.softmax(Tensor([[0.0, 0.0, 0.0, 0.0]])).data, 0.25, atol=1e-15)
    assert np.allclose(ad.softmax(Tensor([[1000.0, 0.0]])).data, [[1.0, 0.0]], atol=1e-12)

    direct = np.exp(np.array([1.0, 2.0, 3.0]) - 3.0)
    assert np.allclose(ad.softmax(Tensor([[1.0, 2.0, 3.0]])).data[0], direct / direct.sum(), rtol=1e-14)


def test_softmax_rows_sum_to_one(rng):
    logits = rng.uniform(-1e3, 1e3, size=(200, 7))
    probs = ad.softmax(Tensor(logits)).data
    assert np.all(probs >= 0.0)
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-12
    assert np.allclose(probs, scipy_softmax(logits, axis=1), atol=1e-12)


def test_softmax_rejects_bad_input():
    with pytest.raises(NumericInputError):
        ad.softmax(Tensor([[np.nan, 0.0]]))
    with pytest.raises(NumericInputError):
        ad.softmax(Tensor([[np.inf, 0.0]]))
    with pytest.raises(ContractError):
        ad.softmax(Tensor([[1.0], [2.0]]))


# --- backward ---

def test_backward_examples():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.sum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))

    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.mean(x * x).backward()
    assert np.allclose(x.grad, [1.0, 2.0])


def test_backward_needs_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()
    with pytest.raises(ContractError):
        ad.sum(Tensor([1.0, 2.0])).backward()


def test_backward_refreshes_gradients():
    x = Tensor([1.0, -3.0], requires_grad=True)
    ad.sum(x * x).backward()
    first = x.grad.copy()
    ad.sum(x * x).backward()
    assert np.array_equal(x.grad, first)


def test_graph_is_topologically_ordered(rng):
    w = _param(rng, 3, 2)
    x = Tensor(rng.normal(size=(4, 3)))
    loss = ad.mean(ad.relu(ad.matmul(x, w)))
    graph = ComputeGraph.from_root(loss)
    position = {id(node): i for i, node in enumerate(graph.nodes)}
    for node in graph.nodes:
        for parent in node._parents:
            assert position[id(parent)] < position[id(node)]
    assert graph.nodes[-1] is loss
    assert graph.leaves() == [w]


def test_no_grad_stops_recording():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = ad.sum(x * x)
    assert not y.requires_grad
    assert y._parents == ()
    assert ad.sum(x * x).requires_grad


# --- finite differences ---

def _assert_close(errors):
    assert max(errors) < DEFAULT_TOLERANCE


def test_gradcheck_elementwise(rng):
    for _ in range(INSTANCES):
        a, b = _param(rng, 3, 4), _param(rng, 3, 4)
        weights = Tensor(rng.normal(size=(3, 4)))
        _assert_close(check_gradients(lambda: ad.sum((a + b) * weights), [a, b]))
        _assert_close(check_gradients(lambda: ad.sum(a * b * weights), [a, b]))
        _assert_close(check_gradients(lambda: ad.mean(ad.exp(a) * weights), [a]))
        _assert_close(check_gradients(lambda: ad.sum(2.5 * a - b), [a, b]))


def test_gradcheck_relu_and_log(rng):
    for _ in range(INSTANCES):
        data = rng.normal(size=(4, 3))
        data[np.abs(data) < 0.1] = 0.5
        a = Tensor(data, requires_grad=True)
        weights = Tensor(rng.normal(size=(4, 3)))
        _assert_close(check_gradients(lambda: ad.sum(ad.relu(a) * weights), [a]))

        positive = _param(rng, 4, 3, low=0.5)
        _assert_close(check_gradients(lambda: ad.sum(ad.log(positive) * weights), [positive]))


def test_gradcheck_matmul_softmax_reductions(rng):
    for _ in range(INSTANCES):
        a, b = _param(rng, 5, 3), _param(rng, 3, 4)
        weights, column_weights = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=3))
        _assert_close(check_gradients(lambda: ad.sum(ad.matmul(a, b) * weights), [a, b]))
        _assert_close(check_gradients(lambda: ad.sum(ad.softmax(ad.matmul(a, b)) * weights), [a, b]))
        _assert_close(check_gradients(lambda: ad.sum(ad.mean(a, axis=0) * column_weights), [a]))
        _assert_close(check_gradients(lambda: ad.mean(ad.sum(a * a, axis=1)), [a]))


def test_gradcheck_concat(rng):
    for _ in range(INSTANCES):
        a, b = _param(rng, 4, 2), _param(rng, 4, 3)
        weights = Tensor(rng.normal(size=(4, 5)))
        _assert_close(check_gradients(lambda: ad.sum(ad.concat([a, b]) * weights), [a, b]))


def test_gradcheck_batch_norm(rng):
    for _ in range(INSTANCES):
        x, gamma, beta = _param(rng, 6, 3), _param(rng, 3), _param(rng, 3)
        weights = Tensor(rng.normal(size=(6, 3)))
        _assert_close(check_gradients(lambda: ad.sum(ad.batch_norm(x, gamma, beta) * weights), [x, gamma, beta]))

        mean, var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
        _assert_close(check_gradients(
            lambda: ad.sum(ad.batch_norm(x, gamma, beta, mean, var) * weights), [x, gamma, beta]
        ))


def test_gradcheck_weight_norm_linear(rng):
    for _ in range(INSTANCES):
        x, direction = _param(rng, 5, 4), _param(rng, 3, 4)
        magnitude, bias = _param(rng, 3, low=0.5), _param(rng, 3)
        weights = Tensor(rng.normal(size=(5, 3)))
        _assert_close(check_gradients(
            lambda: ad.sum(ad.weight_norm_linear(x, direction, magnitude, bias) * weights),
            [x, direction, magnitude, bias],
        ))


def test_gradcheck_three_layer_composition(rng):
    for _ in range(INSTANCES):
        x = Tensor(rng.normal(size=(6, 4)))
        w1, w2, w3 = _param(rng, 4, 5), _param(rng, 5, 5), _param(rng, 5, 3)
        targets = Tensor(np.eye(3)[rng.integers(0, 3, size=6)])

        def loss():
            hidden = ad.relu(ad.matmul(ad.relu(ad.matmul(x, w1)), w2))
            log_probs = ad.log(ad.softmax(ad.matmul(hidden, w3)))
            return -ad.mean(ad.sum(log_probs * targets, axis=1))

        _assert_close(check_gradients(loss, [w1, w2, w3]))


def test_backward_is_deterministic(rng):
    x = Tensor(rng.normal(size=(8, 4)))
    w = _param(rng, 4, 3)

    def gradient():
        w.grad = None
        ad.mean(ad.log(ad.softmax(ad.matmul(x, w)))).backward()
        return w.grad.copy()

    assert np.array_equal(gradient(), gradient())


# --- optimizer ---

def test_sgd_step_examples():
    p, g = np.array([1.0, -2.0]), np.array([0.5, 0.25])
    (new,), _ = sgd_step([p], [g], [np.zeros(2)], lr=0.1)
    assert np.allclose(new, p - 0.1 * g)

    (new,), _ = sgd_step([p], [np.zeros(2)], [np.zeros(2)], lr=0.1, momentum=0.9)
    assert np.array_equal(new, p)


def test_sgd_step_momentum_recurrence():
    lr, m, wd = 0.1, 0.9, 1e-3
    p, v = np.array([2.0]), np.array([0.0])
    g1, g2 = np.array([1.0]), np.array([-0.5])

    (p1,), (v1,) = sgd_step([p], [g1], [v], lr, m, wd)
    (p2,), _ = sgd_step([p1], [g2], [v1], lr, m, wd)

    v1_hand = g1 + wd * p
    p1_hand = p - lr * v1_hand
    v2_hand = m * v1_hand + g2 + wd * p1_hand
    assert np.allclose(p2, p1_hand - lr * v2_hand, rtol=0, atol=1e-15)


def test_sgd_step_contracts():
    with pytest.raises(ContractError):
        sgd_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], lr=0.1)
    with pytest.raises(ContractError):
        sgd_step([np.zeros(2)], [np.zeros(2)], [np.zeros(2)], lr=0.0)


def test_sgd_skips_frozen_parameters():
    trained = Tensor([1.0, 1.0], requires_grad=True)
    frozen = Tensor([1.0, 1.0], requires_grad=False)
    optimizer = SGD([ParamGroup("all", [trained, frozen], lr=0.5)], momentum=0.0, weight_decay=0.0)
    ad.sum(trained * frozen).backward()
    optimizer.step()
    assert np.allclose(trained.data, [0.5, 0.5])
    assert np.array_equal(frozen.data, [1.0, 1.0])
