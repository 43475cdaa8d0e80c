import numpy as np
import pytest

from scenediff.autodiff import AdamW, Tensor, backward, grad_check, grad_check_params, load_checkpoint, save_checkpoint
from scenediff.autodiff import nn
from scenediff.autodiff import tensor as T
from scenediff.autodiff.catalogue import CATALOGUE


def test_softmax_uniform():
    out = T.softmax(Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, [1 / 3] * 3)


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor(np.full((2, 5), 3.7)))
    assert np.all(out.data == 0.0)


def test_group_norm_constant_is_zero():
    out = T.group_norm(Tensor(np.full((2, 4, 8), -1.5)), 2)
    assert np.all(out.data == 0.0)


def test_sum_grad():
    x = Tensor(np.arange(4.0), requires_grad=True)
    backward(T.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_square_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(T.sum_(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_unreached_leaf_gets_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    gx, gy = backward(T.sum_(x), [x, y])
    np.testing.assert_array_equal(gy, np.zeros(2))


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ValueError, match=r"add: shape mismatch \(3,\) vs \(4,\)"):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ValueError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    # trailing-axis broadcasting is not allowed
    with pytest.raises(ValueError, match="mul"):
        T.mul(Tensor(np.ones((3, 1))), Tensor(np.ones((3, 4))))


def test_nonfinite_forward_is_error():
    with pytest.raises(FloatingPointError, match="log"):
        T.log(Tensor(np.array([0.0, 1.0])))


def test_grad_check_linear_and_constant():
    a = np.array([1.5, -2.0, 0.25])
    assert grad_check(lambda x: T.sum_(T.mul(x, Tensor(a))), np.ones(3)) < 1e-9
    assert grad_check(lambda x: T.sum_(T.mul(x, Tensor(np.zeros(3)))) + 4.0, np.ones(3)) == 0.0


@pytest.mark.parametrize("name", sorted(CATALOGUE))
@pytest.mark.parametrize("seed", range(5))
def test_catalogue_gradients(name, seed):
    fn, inputs = CATALOGUE[name]
    xs = inputs(np.random.default_rng(seed))
    assert grad_check(fn, xs, eps=1e-5) < 1e-4


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(3).normal(size=(50, 9)) * 10
    s = T.softmax(Tensor(x)).data
    assert np.max(np.abs(s.sum(-1) - 1.0)) < 1e-12


def test_reshape_transpose_roundtrip_bit_exact():
    x = np.random.default_rng(1).normal(size=(2, 3, 4))
    t = Tensor(x)
    back = T.transpose(T.transpose(t, (2, 0, 1)), (1, 2, 0))
    np.testing.assert_array_equal(back.data, x)
    np.testing.assert_array_equal(T.reshape(T.reshape(t, (6, 4)), (2, 3, 4)).data, x)


def test_polar_is_orthonormal():
    m = np.random.default_rng(2).normal(size=(5, 3, 3))
    u = T.polar(Tensor(m)).data
    np.testing.assert_allclose(np.swapaxes(u, -1, -2) @ u, np.broadcast_to(np.eye(3), (5, 3, 3)), atol=1e-12)


def test_attention_block_gradient():
    rng = np.random.default_rng(4)
    mha = nn.MultiHeadAttention(6, 6, heads=2, head_dim=3, rng=rng).astype(np.float64)
    for p in mha.parameters():
        p.data = rng.normal(0, 0.5, p.shape)
    x = rng.normal(size=(4, 6))

    def loss(xt):
        y = mha(xt)
        return T.sum_(y * y)

    assert grad_check(loss, x) < 1e-4
    assert grad_check_params(lambda: loss(Tensor(x)), mha.parameters(), max_coords=None) < 1e-4


def test_adamw_minimises_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = AdamW([x], lr=0.1, weight_decay=0.0, grad_clip=None)
    for _ in range(300):
        opt.zero_grad()
        backward(T.sum_(x * x))
        opt.step()
    assert np.all(np.abs(x.data) < 1e-2)


def test_checkpoint_roundtrip(tmp_path):
    state = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], dtype=np.float32)}
    path = tmp_path / "ck.sde"
    save_checkpoint(path, state)
    raw = path.read_bytes()
    assert raw[:4] == b"SDE1"
    # first record: name length, name, rank, extents
    assert int.from_bytes(raw[4:8], "little") == len("a.weight")
    back = load_checkpoint(path)
    assert list(back) == list(state)
    for k in state:
        np.testing.assert_array_equal(back[k], state[k])
