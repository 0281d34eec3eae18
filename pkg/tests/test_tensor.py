"""Autodiff correctness: oracles, finite differences, graph properties."""

import numpy as np
import pytest

from fadekit import tensor as T
from fadekit.tensor import NonFiniteError, ShapeError, Tensor


def central_diff(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Independent gradient oracle: central finite differences."""
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        saved = flat_x[i]
        flat_x[i] = saved + h
        up = fn(x)
        flat_x[i] = saved - h
        down = fn(x)
        flat_x[i] = saved
        flat_g[i] = (up - down) / (2.0 * h)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, what: str, tol: float = 1e-4):
    scale = np.maximum(1.0, np.abs(numeric))
    worst = np.max(np.abs(analytic - numeric) / scale)
    assert worst < tol, f"{what}: max relative gradient error {worst:.2e}"


def away_from(rng, shape, kink: float = 0.0, min_gap: float = 0.05, spread: float = 1.0):
    """Random values guaranteed at least min_gap from the kink point."""
    raw = rng.uniform(min_gap, spread, size=shape)
    signs = rng.choice([-1.0, 1.0], size=shape)
    return kink + raw * signs


# -- spec'd oracle cases -------------------------------------------------------------


def test_sq_l2_distance_identity_is_zero():
    rng = np.random.default_rng(0)
    for shape in ((3,), (2, 4), (2, 3, 2, 2)):
        v = Tensor(rng.normal(size=shape))
        assert T.sq_l2_distance(v, v).item() == 0.0


def test_relu_definition():
    out = T.relu(Tensor([-1.0, 0.0, 2.0]))
    assert out.data.tolist() == [0.0, 0.0, 2.0]


def test_conv2d_all_ones_kernel_sums_windows():
    # hand-summed 2x2 window grid for a 3x3 input
    x = Tensor(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = T.conv2d(x, w, stride=1, padding=0)
    expected = np.array([[1 + 2 + 4 + 5, 2 + 3 + 5 + 6], [4 + 5 + 7 + 8, 5 + 6 + 8 + 9]], dtype=float)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data[0, 0], expected)
    # direct-summation oracle on a random case
    rng = np.random.default_rng(1)
    xr = rng.normal(size=(1, 2, 4, 5))
    wr = rng.normal(size=(3, 2, 2, 3))
    got = T.conv2d(Tensor(xr), Tensor(wr)).data
    for o in range(3):
        for i in range(3):
            for j in range(3):
                acc = (xr[0, :, i : i + 2, j : j + 3] * wr[o]).sum()
                assert abs(got[0, o, i, j] - acc) < 1e-12


def test_backward_polynomial():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1 = rng.normal(size=(6, 5))
    w2 = rng.normal(size=(5, 3))
    target = rng.normal(size=(2, 3))
    x0 = rng.normal(size=(2, 6))

    def loss_of(x_arr: np.ndarray) -> float:
        x = Tensor(x_arr)
        h = T.relu(T.matmul(x, Tensor(w1)))
        out = T.matmul(h, Tensor(w2))
        return T.sq_l2_distance(out, Tensor(target)).item()

    x = Tensor(x0, requires_grad=True)
    h = T.relu(T.matmul(x, Tensor(w1)))
    loss = T.sq_l2_distance(T.matmul(h, Tensor(w2)), Tensor(target))
    T.backward(loss)
    assert_grad_close(x.grad, central_diff(loss_of, x0.copy()), "two-layer net")


def test_blend_gradient_is_mask():
    rng = np.random.default_rng(3)
    mask = Tensor((rng.random((3, 4)) > 0.5).astype(float))
    x = Tensor(rng.random((3, 4)), requires_grad=True)
    noise = Tensor(rng.random((3, 4)))
    T.backward(T.sum_all(T.elementwise_blend(x, noise, mask)))
    np.testing.assert_array_equal(x.grad, mask.data)


# -- finite-difference sweep over every backward rule --------------------------------


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum_all(T.mul(out, Tensor(weights)))


def op_cases():
    rng = np.random.default_rng(42)
    cases = []

    def case(name, build, *arrays):
        cases.append(pytest.param(build, arrays, id=name))

    a34 = rng.normal(size=(3, 4))
    b34 = rng.normal(size=(3, 4))
    w34 = rng.normal(size=(3, 4))
    case("add", lambda t: _scalarize(T.add(t[0], t[1]), w34), a34, b34)
    case("sub", lambda t: _scalarize(T.sub(t[0], t[1]), w34), a34, b34)
    case("mul", lambda t: _scalarize(T.mul(t[0], t[1]), w34), a34, b34)
    case("scalar_mul", lambda t: _scalarize(T.scalar_mul(t[0], 1.7), w34), a34)
    case("div_scalar", lambda t: _scalarize(T.div_scalar(t[0], t[1]), w34), a34, np.asarray(1.3))

    m_a = rng.normal(size=(3, 4))
    m_b = rng.normal(size=(4, 2))
    w32 = rng.normal(size=(3, 2))
    case("matmul", lambda t: _scalarize(T.matmul(t[0], t[1]), w32), m_a, m_b)

    xc = rng.normal(size=(2, 3, 6, 5))
    wc = rng.normal(size=(4, 3, 3, 3)) * 0.5
    bc = rng.normal(size=(4,))
    wconv = rng.normal(size=(2, 4, 6, 5))
    case(
        "conv2d_pad1",
        lambda t: _scalarize(T.conv2d(t[0], t[1], t[2], stride=1, padding=1), wconv),
        xc, wc, bc,
    )
    xs = rng.normal(size=(2, 2, 7, 6))
    ws = rng.normal(size=(3, 2, 2, 2)) * 0.5
    wconv2 = rng.normal(size=(2, 3, 3, 3))
    case(
        "conv2d_stride2",
        lambda t: _scalarize(T.conv2d(t[0], t[1], stride=2, padding=0), wconv2),
        xs, ws,
    )

    xr = away_from(rng, (3, 5))
    wr = rng.normal(size=(3, 5))
    case("relu", lambda t: _scalarize(T.relu(t[0]), wr), xr)

    xcl = np.concatenate([rng.uniform(0.06, 0.94, size=8), away_from(rng, (8,), 0.5, 0.6, 1.0)])
    wcl = rng.normal(size=(16,))
    case("clamp01", lambda t: _scalarize(T.clamp01(t[0]), wcl), xcl)

    xp = rng.normal(size=(2, 3, 4, 6))
    wp = rng.normal(size=(2, 3, 2, 3))
    case("avg_pool2d", lambda t: _scalarize(T.avg_pool2d(t[0], 2), wp), xp)

    xu = rng.normal(size=(2, 2, 3, 2))
    wu = rng.normal(size=(2, 2, 6, 4))
    case("upsample2x", lambda t: _scalarize(T.upsample2x(t[0]), wu), xu)

    xf = rng.normal(size=(2, 3, 4))
    wf = rng.normal(size=(2, 12))
    case("flatten", lambda t: _scalarize(T.flatten(t[0]), wf), xf)
    wrs = rng.normal(size=(4, 6))
    case("reshape", lambda t: _scalarize(T.reshape(t[0], (4, 6)), wrs), xf)

    case("sum", lambda t: T.sum_all(t[0]), a34)
    case("mean", lambda t: T.mean_all(t[0]), a34)
    case("l2_norm", lambda t: T.l2_norm(t[0]), away_from(rng, (7,)))
    case("sq_l2_distance", lambda t: T.sq_l2_distance(t[0], t[1]), a34, b34)

    la = rng.normal(size=(4, 5))
    lb = la + away_from(rng, (4, 5), 0.0, 0.1, 1.0)
    case("l1_distance", lambda t: T.l1_distance(t[0], t[1]), la, lb)

    logits = rng.normal(size=(4, 5))
    labels = np.array([0, 3, 1, 4])
    case("cross_entropy", lambda t: T.cross_entropy(t[0], labels), logits)

    ba = rng.normal(size=(2, 5))
    bb = rng.normal(size=(2, 5))
    bm = (rng.random((2, 5)) > 0.5).astype(float)
    wbl = rng.normal(size=(2, 5))
    case("elementwise_blend", lambda t: _scalarize(T.elementwise_blend(t[0], t[1], t[2]), wbl), ba, bb, bm)

    xab = rng.normal(size=(3, 4))
    bab = rng.normal(size=(4,))
    case("add_bias", lambda t: _scalarize(T.add_bias(t[0], t[1]), w34), xab, bab)
    return cases


@pytest.mark.parametrize("build,arrays", op_cases())
def test_backward_matches_central_differences(build, arrays):
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(tensors)
    T.backward(loss)
    for k, (tensor, base) in enumerate(zip(tensors, arrays)):
        if tensor.grad is None:
            continue

        def loss_at(perturbed, _k=k):
            probe = [Tensor(a.copy()) for a in arrays]
            probe[_k] = Tensor(perturbed)
            return build(probe).item()

        numeric = central_diff(loss_at, base.copy())
        assert_grad_close(tensor.grad, numeric, f"operand {k}")


# -- graph-level properties -----------------------------------------------------------


def test_backward_linearity():
    rng = np.random.default_rng(5)
    base = rng.normal(size=(4, 3))
    coeff_a, coeff_b = 1.7, -0.4

    def grads(fn):
        x = Tensor(base.copy(), requires_grad=True)
        T.backward(fn(x))
        return x.grad

    g1 = grads(lambda x: T.sum_all(T.mul(x, x)))
    g2 = grads(lambda x: T.l2_norm(x))
    combined = grads(
        lambda x: T.add(
            T.scalar_mul(T.sum_all(T.mul(x, x)), coeff_a), T.scalar_mul(T.l2_norm(x), coeff_b)
        )
    )
    np.testing.assert_allclose(combined, coeff_a * g1 + coeff_b * g2, atol=1e-12)


def test_diamond_graph_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = T.mul(x, x)  # used twice below
    T.backward(T.sum_all(T.add(y, y)))
    np.testing.assert_allclose(x.grad, [8.0])


def test_gradient_accumulates_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum_all(x))
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_determinism_bit_identical():
    def build():
        rng = np.random.default_rng(99)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        out = T.avg_pool2d(T.relu(T.conv2d(x, w, padding=1)), 2)
        T.backward(T.sq_l2_distance(out, Tensor(np.zeros(out.shape))))
        return out.data, x.grad, w.grad

    first = build()
    second = build()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_topological_order_inputs_precede_outputs():
    x = Tensor([1.0], requires_grad=True)
    y = T.mul(x, x)
    z = T.sum_all(T.add(y, y))
    order = T.topo_order(z)
    positions = {id(node): i for i, node in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert positions[id(parent)] < positions[id(node)]


# -- contract violations ---------------------------------------------------------------


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((2, 3, 3, 3))))
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError, match="backward"):
        T.backward(T.relu(x))


def test_non_finite_values_error_not_propagate():
    with pytest.raises(NonFiniteError):
        Tensor([np.inf, 1.0])
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    big = Tensor([1e308])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="scalar_mul"):
        T.scalar_mul(big, 10.0)


def test_pool_requires_divisible_dims():
    with pytest.raises(ShapeError, match="avg_pool2d"):
        T.avg_pool2d(Tensor(np.zeros((1, 1, 5, 4))), 2)


def test_detach_cuts_history():
    x = Tensor([3.0], requires_grad=True)
    y = T.mul(x, x).detach()
    assert y.requires_grad is False and y._parents == ()
    np.testing.assert_array_equal(y.data, [9.0])
