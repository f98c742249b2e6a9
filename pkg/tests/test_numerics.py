import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_fd, cofactor_det, rel_err
from raregen.errors import ContractError, NumericError, SingularMatrixError
from raregen.numerics import AdamState, StepLR, adam_step, backward, grad, lu_logdet, psd_sqrt, steplr, variable
from raregen.numerics import tape as T


def test_square_gradient():
    x = variable(3.0)
    (g,) = grad(x * x, [x])
    assert g == pytest.approx(6.0)


@pytest.mark.parametrize("shape", [(1,), (3,), (2, 4), (2, 3, 5)])
def test_sum_gradient_is_ones(shape):
    x = variable(np.random.default_rng(0).normal(size=shape))
    (g,) = grad(T.sum_(x), [x])
    np.testing.assert_array_equal(g, np.ones(shape))


def test_logistic_gradient_at_zero():
    x = variable(0.0)
    (g,) = grad(T.logistic(x), [x])
    fd = central_fd(lambda v: 0.5 * (1 + np.tanh(0.5 * v)), np.array(0.0))
    assert g == pytest.approx(0.25, abs=1e-12)
    assert abs(g - fd) < 1e-6


def test_non_scalar_output_rejected():
    x = variable(np.ones(3))
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_nan_gradient_names_node():
    x = variable(np.array([0.0, 1.0]))
    with np.errstate(divide="ignore"):
        y = T.sum_(T.log(x))  # d/dx log(0) is inf
        with pytest.raises(NumericError, match="log"):
            backward(y)


def test_shared_subexpression_visited_once():
    x = variable(2.0)
    y = x * x
    z = y + y * y  # dz/dx = 2x + 4x^3
    (g,) = grad(z, [x])
    assert g == pytest.approx(4.0 + 32.0)
    assert len(T.graph_nodes(z)) == 4


def test_constants_record_no_graph():
    c = T.constant(np.ones(3))
    out = T.tanh(c * 2.0)
    assert not out.requires_grad and out.parents == ()


# Each primitive as a scalar function of one array argument, with its numpy twin.
_W = np.random.default_rng(99).normal(size=(4, 3))
PRIMITIVES = {
    "add_broadcast": (lambda x: T.sum_(x + np.arange(4.0)), lambda v: np.sum(v + np.arange(4.0))),
    "sub": (lambda x: T.sum_(2.0 - x), lambda v: np.sum(2.0 - v)),
    "mul": (lambda x: T.sum_(x * x * 1.5), lambda v: np.sum(v * v * 1.5)),
    "div": (lambda x: T.sum_(1.0 / (x * x + 1.0)), lambda v: np.sum(1.0 / (v * v + 1.0))),
    "pow": (lambda x: T.sum_((x * x + 1.0) ** 1.5), lambda v: np.sum((v * v + 1.0) ** 1.5)),
    "exp": (lambda x: T.sum_(T.exp(x)), lambda v: np.sum(np.exp(v))),
    "log": (lambda x: T.sum_(T.log(x * x + 0.5)), lambda v: np.sum(np.log(v * v + 0.5))),
    "tanh": (lambda x: T.sum_(T.tanh(x)), lambda v: np.sum(np.tanh(v))),
    "logistic": (lambda x: T.sum_(T.logistic(x)), lambda v: np.sum(1 / (1 + np.exp(-v)))),
    "log_logistic": (lambda x: T.sum_(T.log_logistic(x)), lambda v: np.sum(-np.log1p(np.exp(-v)))),
    "sqrt": (lambda x: T.sum_(T.sqrt(x * x + 0.1)), lambda v: np.sum(np.sqrt(v * v + 0.1))),
    "softmax": (
        lambda x: T.sum_(T.softmax(x) * np.arange(4.0)),
        lambda v: np.sum(np.exp(v) / np.exp(v).sum() * np.arange(4.0)),
    ),
    "matmul": (
        lambda x: T.sum_(T.tanh(T.reshape(x, (1, 4)) @ _W)),
        lambda v: np.sum(np.tanh(v.reshape(1, 4) @ _W)),
    ),
    "getitem_concat": (
        lambda x: T.sum_(T.concat([x[2:] * 3.0, x[:2] * x[:2]], axis=0)),
        lambda v: np.sum(np.concatenate([v[2:] * 3.0, v[:2] ** 2])),
    ),
    "transpose_mean": (
        lambda x: T.mean(T.transpose(T.reshape(x, (2, 2))) @ T.reshape(x, (2, 2))),
        lambda v: np.mean(v.reshape(2, 2).T @ v.reshape(2, 2)),
    ),
    "maximum": (lambda x: T.sum_(T.square(T.maximum(x, 0.3))), lambda v: np.sum(np.maximum(v, 0.3) ** 2)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    tape_fn, np_fn = PRIMITIVES[name]
    rng = np.random.default_rng(2024)
    for _ in range(100):
        point = rng.uniform(-1.5, 1.5, size=4)
        if name == "maximum":
            point[np.abs(point - 0.3) < 1e-3] += 0.01  # stay off the kink
        x = variable(point)
        (g,) = grad(tape_fn(x), [x])
        assert float(tape_fn(T.constant(point)).value) == pytest.approx(float(np_fn(point)), rel=1e-12)
        assert rel_err(g, central_fd(np_fn, point)) < 1e-4


def test_matmul_batched_broadcast_gradient():
    rng = np.random.default_rng(5)
    w0 = rng.normal(size=(3, 3))
    h0 = rng.normal(size=(5, 3, 2))
    w, h = variable(w0), variable(h0)
    gw, gh = grad(T.sum_(T.tanh(w @ h)), [w, h])
    assert rel_err(gw, central_fd(lambda m: np.tanh(m @ h0).sum(), w0)) < 1e-6
    assert rel_err(gh, central_fd(lambda m: np.tanh(w0 @ m).sum(), h0)) < 1e-6


# -- Adam / StepLR ----------------------------------------------------------------


def test_adam_zero_grad_leaves_params():
    params = [np.array([1.0, -2.0]), np.ones((2, 2))]
    new, state = adam_step(params, [np.zeros(2), np.zeros((2, 2))], AdamState(), lr=0.1)
    for a, b in zip(new, params):
        np.testing.assert_array_equal(a, b)
    assert state.step == 1


def test_adam_first_step_hand_value():
    # m_hat = 1, v_hat = 1 -> update = lr / (1 + eps)
    new, state = adam_step([np.array(0.0)], [np.array(1.0)], AdamState(), lr=0.1)
    assert float(new[0]) == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert state.step == 1


def test_adam_two_steps_reduce_quadratic():
    f = lambda p: float(np.sum((p - 3.0) ** 2))
    p = [np.array([0.0, 1.0])]
    state = AdamState()
    values = [f(p[0])]
    for _ in range(2):
        p, state = adam_step(p, [2 * (p[0] - 3.0)], state, lr=0.5)
        values.append(f(p[0]))
    assert values[2] < values[1] < values[0]
    assert state.step == 2


def test_adam_shape_mismatch():
    with pytest.raises(ContractError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState(), lr=0.1)


@pytest.mark.parametrize(
    "base,step,gamma,epoch,expected",
    [
        (0.02, 50, 0.9, 0, 0.02),
        (0.02, 50, 0.9, 125, 0.02 * 0.9**2),
        (1e-4, 500, 0.1, 1000, 1e-6),
    ],
)
def test_steplr_values(base, step, gamma, epoch, expected):
    assert steplr(StepLR(base, step, gamma), epoch) == pytest.approx(expected, rel=1e-12)


@given(
    st.floats(1e-5, 1.0),
    st.integers(1, 100),
    st.floats(0.01, 1.0),
    st.integers(0, 10_000),
)
def test_steplr_nonincreasing(base, step, gamma, epoch):
    s = StepLR(base, step, gamma)
    assert s(epoch + 1) <= s(epoch)


# -- linear algebra ------------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 3, 6])
def test_logdet_identity(n):
    assert lu_logdet(np.eye(n)) == (1.0, 0.0)


def test_logdet_diag():
    sign, ld = lu_logdet(np.diag([2.0, 3.0]))
    assert sign == 1.0 and ld == pytest.approx(np.log(6.0), rel=1e-12)


def test_logdet_random_vs_cofactor():
    m = np.random.default_rng(7).uniform(-1, 1, size=(5, 5))
    det = cofactor_det(m)
    sign, ld = lu_logdet(m)
    assert sign == np.sign(det)
    assert ld == pytest.approx(np.log(abs(det)), rel=1e-8)


@settings(max_examples=60)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_logdet_matches_cofactor_property(seed, n):
    m = np.random.default_rng(seed).normal(size=(n, n))
    det = cofactor_det(m)
    sign, ld = lu_logdet(m)
    assert sign == np.sign(det)
    assert ld == pytest.approx(np.log(abs(det)), rel=1e-8, abs=1e-9)


def test_logdet_singular():
    with pytest.raises(SingularMatrixError):
        lu_logdet(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_psd_sqrt_examples():
    np.testing.assert_allclose(psd_sqrt(np.eye(3)), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12)
    b = np.random.default_rng(11).normal(size=(3, 3))
    a = b.T @ b
    s = psd_sqrt(a)
    assert np.linalg.norm(s @ s - a) < 1e-6


def test_psd_sqrt_rejects_asymmetric():
    with pytest.raises(ContractError):
        psd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(3)
        x = variable(rng.normal(size=(6, 4)))
        w = rng.normal(size=(4, 4))
        (g,) = grad(T.sum_(T.tanh(x @ w) ** 2.0), [x])
        return g

    assert run().tobytes() == run().tobytes()
