import math

import numpy as np
import pytest

import omniscale.tensor as T
from omniscale.errors import DegenerateBatchError, InvalidArgumentError
from omniscale.optim import Adam, AdamState, ReduceLROnPlateau, adam_step
from omniscale.tensor import Parameter, Tensor

from gradcheck import check

GRAD_TOL = 1e-4


def naive_conv(x, w):
    """Direct loops over the stated padding rule."""
    B, C, L = x.shape
    O, _, k = w.shape
    left = (k - 1) // 2
    out = np.zeros((B, O, L))
    for b in range(B):
        for o in range(O):
            for t in range(L):
                acc = 0.0
                for c in range(C):
                    for j in range(k):
                        s = t - left + j
                        if 0 <= s < L:
                            acc += w[o, c, j] * x[b, c, s]
                out[b, o, t] = acc
    return out


def _dot(t, r):
    # scalar sum(t * r) as a graph op, via linear on the flattened tensor
    flat = _reshape(t, (1, t.data.size))
    return T.linear(flat, Tensor(r.reshape(-1, 1)))


def _reshape(t, shape):
    def backward(g):
        t._accumulate(g.reshape(t.shape))

    return T._result(t.data.reshape(shape), (t,), backward, "reshape")


# -- forward examples -------------------------------------------------------

def test_conv_identity_kernel():
    out = T.conv1d(Tensor([[[1.0, 2.0, 3.0]]]), Tensor([[[0.0, 1.0, 0.0]]]), 3)
    np.testing.assert_array_equal(out.data, [[[1, 2, 3]]])


def test_conv_even_kernel_pads_right():
    out = T.conv1d(Tensor([[[1.0, 2.0, 3.0]]]), Tensor([[[1.0, 1.0]]]), 2)
    np.testing.assert_array_equal(out.data, [[[3, 5, 3]]])


@pytest.mark.parametrize("k", range(1, 51))
def test_conv_same_length(k, rng):
    x = rng.standard_normal((2, 2, 17))
    w = rng.standard_normal((3, 2, k))
    out = T.conv1d(Tensor(x), Tensor(w))
    assert out.shape == (2, 3, 17)
    np.testing.assert_allclose(out.data, naive_conv(x, w), atol=1e-11)


def test_conv_paths_agree(rng, monkeypatch):
    x = rng.standard_normal((3, 4, 40))
    ws = [Tensor(rng.standard_normal((2, 4, k)), requires_grad=True) for k in (1, 2, 5, 11, 30)]
    xt = Tensor(x, requires_grad=True)
    g = rng.standard_normal((3, 10, 40))

    def run():
        for w in ws:
            w.grad = None
        xt.grad = None
        out = T.multi_conv1d(xt, ws)
        out.backward(g)
        return out.data.copy(), xt.grad.copy(), [w.grad.copy() for w in ws]

    ref = run()
    monkeypatch.setattr(T, "_FFT_MIN_KERNEL", 10**9)
    direct = run()
    monkeypatch.setattr(T, "_CHUNK_ELEMENTS", 64)
    chunked = run()
    monkeypatch.setattr(T, "_FFT_MIN_KERNEL", 1)
    fft = run()
    for other in (direct, chunked, fft):
        np.testing.assert_allclose(other[0], ref[0], atol=1e-11)
        np.testing.assert_allclose(other[1], ref[1], atol=1e-11)
        for a, b in zip(other[2], ref[2]):
            np.testing.assert_allclose(a, b, atol=1e-11)


def test_multi_conv_equals_concat(rng):
    x = Tensor(rng.standard_normal((2, 3, 25)))
    ws = [Tensor(rng.standard_normal((2, 3, k))) for k in (1, 2, 3, 5, 7, 29)]
    fused = T.multi_conv1d(x, ws).data
    separate = np.concatenate([naive_conv(x.data, w.data) for w in ws], axis=1)
    np.testing.assert_allclose(fused, separate, atol=1e-11)


def test_conv_errors():
    with pytest.raises(InvalidArgumentError):
        T.conv1d(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((1, 3, 3))))
    with pytest.raises(InvalidArgumentError):
        T.conv1d(Tensor(np.zeros((1, 1, 0))), Tensor(np.zeros((1, 1, 3))))
    with pytest.raises(InvalidArgumentError):
        T.conv1d(Tensor(np.zeros((1, 1, 5))), Tensor(np.zeros((1, 1, 3))), kernel_size=2)


def test_batchnorm_symmetric_values():
    x = Tensor(np.array([[[-1.0, 1.0]]]))
    out = T.batchnorm1d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1))
    np.testing.assert_allclose(out.data, [[[-1.0, 1.0]]], atol=1e-5)
    np.testing.assert_allclose(out.data, [[[-1 / math.sqrt(1 + 1e-5), 1 / math.sqrt(1 + 1e-5)]]], rtol=1e-14)


def test_batchnorm_zero_gamma(rng):
    x = Tensor(rng.standard_normal((3, 2, 5)))
    out = T.batchnorm1d(x, Tensor(np.zeros(2)), Tensor([0.5, -2.0]), np.zeros(2), np.ones(2))
    np.testing.assert_array_equal(out.data[:, 0], 0.5)
    np.testing.assert_array_equal(out.data[:, 1], -2.0)


def test_batchnorm_running_stats(rng):
    x = rng.standard_normal((4, 2, 6)) * 3 + 1
    rm, rv = np.zeros(2), np.ones(2)
    T.batchnorm1d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1))
    out = T.batchnorm1d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False)
    np.testing.assert_allclose(out.data, (x - rm[None, :, None]) / np.sqrt(rv[None, :, None] + 1e-5))


def test_batchnorm_degenerate():
    with pytest.raises(DegenerateBatchError):
        T.batchnorm1d(Tensor(np.zeros((1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1))


def test_gap_example():
    out = T.global_average_pool(Tensor([[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]]))
    np.testing.assert_array_equal(out.data, [[2.0, 5.0]])


def test_gap_empty():
    with pytest.raises(InvalidArgumentError):
        T.global_average_pool(Tensor(np.zeros((1, 2, 0))))


def test_softmax_xent_ln2():
    loss = T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
    assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)


def test_shape_errors():
    with pytest.raises(InvalidArgumentError):
        T.add(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 3, 3))))
    with pytest.raises(InvalidArgumentError):
        T.concat_channels([Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 2, 4)))])
    with pytest.raises(InvalidArgumentError):
        T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(InvalidArgumentError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_softmax_simplex(rng):
    for _ in range(50):
        p = T.softmax(rng.standard_normal((4, 7)) * 30)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_relu_and_add_forward():
    out = T.add(T.relu(Tensor([[-1.0, 2.0]])), Tensor([[1.0, 1.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 3.0]])


# -- gradient checks --------------------------------------------------------

CONFIGS = list(range(24))


def _config_rng(i):
    return np.random.default_rng(1000 + i)


@pytest.mark.parametrize("i", CONFIGS)
def test_gradcheck_conv1d(i):
    r = _config_rng(i)
    B, C, O, L = r.integers(1, 4), r.integers(1, 4), r.integers(1, 4), r.integers(3, 20)
    k = int(r.integers(1, 30))
    x = Tensor(r.standard_normal((B, C, L)), requires_grad=True)
    w = Tensor(r.standard_normal((O, C, k)), requires_grad=True)
    proj = r.standard_normal((B, O, L))
    assert check(lambda: _dot(T.conv1d(x, w), proj), [x, w]) < GRAD_TOL


@pytest.mark.parametrize("i", CONFIGS)
def test_gradcheck_multi_conv1d(i):
    r = _config_rng(i)
    B, C, L = r.integers(1, 3), r.integers(1, 3), r.integers(4, 30)
    ks = sorted(set(r.integers(1, 32, size=3).tolist()))
    x = Tensor(r.standard_normal((B, C, L)), requires_grad=True)
    ws = [Tensor(r.standard_normal((2, C, k)), requires_grad=True) for k in ks]
    proj = r.standard_normal((B, 2 * len(ks), L))
    assert check(lambda: _dot(T.multi_conv1d(x, ws), proj), [x, *ws]) < GRAD_TOL


@pytest.mark.parametrize("i", CONFIGS)
def test_gradcheck_batchnorm(i):
    r = _config_rng(i)
    B, C, L = r.integers(1, 4), r.integers(1, 4), r.integers(2, 9)
    x = Tensor(r.standard_normal((B, C, L)) * 2 + 1, requires_grad=True)
    gamma = Tensor(r.standard_normal(C), requires_grad=True)
    beta = Tensor(r.standard_normal(C), requires_grad=True)
    proj = r.standard_normal((B, C, L))
    training = bool(i % 3)
    stats = (r.standard_normal(C), r.uniform(0.5, 2, C))

    def loss():
        rm, rv = stats[0].copy(), stats[1].copy()
        return _dot(T.batchnorm1d(x, gamma, beta, rm, rv, training=training), proj)

    assert check(loss, [x, gamma, beta]) < GRAD_TOL


@pytest.mark.parametrize("i", CONFIGS)
def test_gradcheck_relu_add_concat(i):
    r = _config_rng(i)
    B, L = r.integers(1, 4), r.integers(2, 9)
    a = Tensor(r.standard_normal((B, 2, L)), requires_grad=True)
    b = Tensor(r.standard_normal((B, 2, L)), requires_grad=True)
    c = Tensor(r.standard_normal((B, 3, L)), requires_grad=True)
    proj = r.standard_normal((B, 5, L))
    assert check(lambda: _dot(T.concat_channels([T.relu(T.add(a, b)), c]), proj), [a, b, c]) < GRAD_TOL


@pytest.mark.parametrize("i", CONFIGS)
def test_gradcheck_gap_linear_xent(i):
    r = _config_rng(i)
    B, C, L, K = r.integers(1, 5), r.integers(1, 4), r.integers(1, 9), r.integers(2, 5)
    x = Tensor(r.standard_normal((B, C, L)), requires_grad=True)
    w = Tensor(r.standard_normal((C, K)), requires_grad=True)
    bias = Tensor(r.standard_normal(K), requires_grad=True)
    labels = r.integers(0, K, size=B)
    loss = lambda: T.softmax_cross_entropy(T.linear(T.global_average_pool(x), w, bias), labels)
    assert check(loss, [x, w, bias]) < GRAD_TOL


def test_graph_nodes_topological_once(rng):
    x = Tensor(rng.standard_normal((2, 1, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 1, 3)), requires_grad=True)
    h = T.conv1d(x, w)
    y = T.add(T.relu(h), h)  # h feeds two consumers
    nodes = T.graph_nodes(y)
    assert len(nodes) == len({id(n) for n in nodes})
    position = {id(n): i for i, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            assert position[id(p)] < position[id(n)]
    calls = []
    original = h._backward
    h._backward = lambda g: (calls.append(1), original(g))
    y.backward(np.ones(y.shape))
    assert calls == [1]


def test_no_grad_builds_no_graph(rng):
    w = Parameter(rng.standard_normal((1, 1, 3)))
    with T.no_grad():
        out = T.conv1d(Tensor(rng.standard_normal((1, 1, 5))), w)
    assert out._parents == () and not out.requires_grad


def test_determinism(rng):
    x = rng.standard_normal((3, 2, 50))
    w = rng.standard_normal((4, 2, 37))
    a = T.conv1d(Tensor(x), Tensor(w)).data
    b = T.conv1d(Tensor(x.copy()), Tensor(w.copy())).data
    assert np.array_equal(a, b)


# -- Adam -------------------------------------------------------------------

def test_adam_zero_gradient():
    p = [np.array([1.5, -2.0])]
    adam_step(p, [np.zeros(2)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p[0], [1.5, -2.0])


def test_adam_first_step():
    p = [np.array([0.0])]
    adam_step(p, [np.array([1.0])], AdamState(), lr=0.1)
    # bias-corrected m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert p[0][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_opposite_steps():
    lr = 0.1
    p, state = [np.array([0.0])], AdamState()
    adam_step(p, [np.array([1.0])], state, lr=lr)
    adam_step(p, [np.array([-1.0])], state, lr=lr)
    # second step: m_hat = -0.01 / 0.19 = -1/19, v_hat = 1, so net change = -lr * 18/19
    assert p[0][0] == pytest.approx(-lr * 18 / 19, rel=1e-7)


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(InvalidArgumentError):
        adam_step([np.zeros(1)], [np.zeros(1)], AdamState(), lr=0.0)
    with pytest.raises(InvalidArgumentError):
        Adam([], lr=-1)


def test_adam_minimises_quadratic():
    p = Parameter(np.array([3.0, -4.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        p.grad = 2 * p.data
        opt.step()
    assert np.all(np.abs(p.data) < 1e-2)


def test_plateau_schedule():
    opt = Adam([Parameter(np.zeros(1))], lr=1e-3)
    sched = ReduceLROnPlateau(opt, factor=0.5, patience=2, min_lr=3e-4)
    lrs = [sched.step(loss) for loss in [1.0, 1.0, 1.0, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1]]
    assert lrs == [1e-3, 1e-3, 5e-4, 5e-4, 5e-4, 3e-4, 3e-4, 3e-4, 3e-4, 3e-4]
