import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopman_transfer.autodiff import (
    Adam,
    AdamW,
    LayerNorm,
    Parameter,
    Tensor,
    concat,
    dropout,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean,
    mse_loss,
    no_grad,
    relu,
    softmax,
    sum_of_squares,
    tanh,
    tsum,
)
from koopman_transfer.autodiff.checkpoint import (
    checkpoint_bytes,
    load_checkpoint,
    namespaced,
    parse_checkpoint,
    save_checkpoint,
    strip_namespace,
)
from koopman_transfer.errors import DetachedNode, NotScalar, ShapeMismatch
from koopman_transfer.koopman import KoopmanAutoencoder, composite_loss
from koopman_transfer.transfer import SafetyHead, backbone_hidden, head_inputs
from koopman_transfer.transformer import TransformerConfig, TransformerModel

SEEDS = range(20)


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _weights(rng, shape):
    return rng.normal(size=shape)


# every op is pushed to a scalar through a fixed random projection
OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(2, 3), (2, 3)]),
    "mul": (lambda a, b: a * b, [(3, 1), (1, 5)]),
    "matmul": (lambda a, b: matmul(a, b), [(2, 3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    "linear": (lambda x, w, b: linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
    "relu": (lambda a: relu(a), [(4, 5)]),
    "gelu": (lambda a: gelu(a), [(4, 5)]),
    "tanh": (lambda a: tanh(a), [(4, 5)]),
    "softmax": (lambda a: softmax(a, scale=0.7), [(2, 3, 6)]),
    "softmax_masked": (lambda a: softmax(a, mask=np.tril(np.ones((5, 5), bool))), [(2, 5, 5)]),
    "layer_norm": (lambda x, w, b: layer_norm(x, w, b), [(3, 6), (6,), (6,)]),
    "sum_axis": (lambda a: tsum(a, axis=1), [(3, 4, 2)]),
    "mean_axis": (lambda a: mean(a, axis=(0, 2), keepdims=True), [(3, 4, 2)]),
    "sum_of_squares": (lambda a: sum_of_squares(a).reshape(1), [(3, 3)]),
    "reshape_transpose": (lambda a: a.reshape(4, 6).transpose(1, 0), [(2, 3, 4)]),
    "getitem": (lambda a: a[1:, ::2], [(4, 6)]),
    "getitem_fancy": (lambda a: a[np.array([0, 2, 2])], [(3, 4)]),
    "concat": (lambda a, b: concat([a, b], axis=1), [(2, 3), (2, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name, gradcheck):
    fn, shapes = OPS[name]
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        leaves = [leaf(rng, *s) for s in shapes]
        probe = Tensor(_weights(rng, fn(*[Tensor(t.data) for t in leaves]).shape))
        gradcheck(lambda: tsum(fn(*leaves) * probe), leaves)


def test_mse_gradient(gradcheck):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        a, b = leaf(rng, 4, 3), leaf(rng, 4, 3)
        gradcheck(lambda: mse_loss(a, b), [a, b])


def test_dropout_gradient_with_fixed_mask(gradcheck):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        a = leaf(rng, 6, 5)
        gradcheck(lambda: tsum(dropout(a, 0.3, np.random.default_rng(seed)) * 1.5), [a])


def _small_ae(seed):
    rng = np.random.default_rng(seed)
    return KoopmanAutoencoder(rng, embed_dim=6, hidden=7, bandwidth=2)


def test_stage1_loss_gradient(gradcheck):
    for seed in SEEDS:
        model = _small_ae(seed)
        rng = np.random.default_rng(100 + seed)
        s = rng.normal(size=(2, 4, 3))
        s_next = rng.normal(size=(2, 4, 3))
        params = model.parameters()
        gradcheck(lambda: composite_loss(model, s, s_next, 1e4, 1.0, 0.1)[0], params)


def _small_transformer(seed, layers=2):
    cfg = TransformerConfig(embed_dim=4, n_layers=layers, n_heads=2, dropout=0.1, context_length=8, init_std=0.3)
    return TransformerModel(cfg, np.random.default_rng(seed))


def test_stage2_loss_gradient(gradcheck):
    for seed in SEEDS:
        model = _small_transformer(seed)
        w = np.random.default_rng(200 + seed).normal(size=(2, 6, 4))
        model.train()
        loss = lambda: mse_loss(model(Tensor(w[:, :-1]), rng=np.random.default_rng(seed)), w[:, 1:])
        gradcheck(loss, model.parameters())


class _Identity:
    def embed(self, s):
        return np.asarray(s)


def test_stage3_loss_gradient(gradcheck):
    for seed in SEEDS:
        rng = np.random.default_rng(300 + seed)
        cfg = TransformerConfig(embed_dim=3, n_layers=1, n_heads=1, context_length=8, init_std=0.3)
        backbone = TransformerModel(cfg, rng)
        head = SafetyHead(3, 5, 4, rng)
        for layer in (head.fc1, head.fc2, head.fc3):
            # zero biases put dead-ReLU rows exactly on the kink
            layer.bias.data = rng.normal(0.0, 0.5, size=layer.bias.shape)
        ctx, q, y = rng.normal(size=(3, 5, 3)), rng.normal(size=(3, 3)), rng.normal(size=3)
        backbone.eval()

        def loss():
            return mse_loss(head(head_inputs(backbone_hidden(backbone, _Identity(), ctx), q)), y)

        gradcheck(loss, head.parameters() + backbone.parameters())


def test_shared_subexpression_accumulates(gradcheck):
    rng = np.random.default_rng(0)
    a = leaf(rng, 3)
    gradcheck(lambda: tsum(a * a + a), [a])
    a.grad = None
    tsum(a * a + a).backward()
    assert np.allclose(a.grad, 2 * a.data + 1, atol=0, rtol=1e-15)


def test_layernorm_of_constant_is_zero():
    out = layer_norm(Tensor(np.full((2, 5), 3.0)))
    assert np.array_equal(out.data, np.zeros((2, 5)))


def test_softmax_rows_sum_to_one_and_mask_zeroes():
    p = softmax(Tensor(np.random.default_rng(1).normal(size=(4, 4))), mask=np.tril(np.ones((4, 4), bool)))
    assert np.allclose(p.data.sum(-1), 1)
    assert np.all(p.data[np.triu_indices(4, 1)] == 0)


def test_gelu_values():
    assert gelu(Tensor([0.0])).item() == 0.0
    assert abs(gelu(Tensor([1.0])).item() - 0.8413447460685429) < 1e-15


def test_backward_needs_scalar_and_grad():
    with pytest.raises(NotScalar):
        (Tensor(np.ones(3), requires_grad=True) * 2).backward()
    with pytest.raises(DetachedNode):
        tsum(Tensor(np.ones(3))).backward()


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeMismatch):
        mse_loss(Tensor(np.ones(3)), np.ones(4))


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        b = a * 2
    assert not b.requires_grad and b._parents == ()


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-8)


def test_adamw_decays_decoupled():
    p = Parameter(np.array([2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.array([0.0])
    opt.step()
    assert p.data[0] == 2.0 * (1 - 0.05)


def test_layernorm_module_parameters():
    ln = LayerNorm(4)
    assert [n for n, _ in ln.named_parameters()] == ["weight", "bias"]


def test_checkpoint_round_trip(tmp_path):
    tensors = {"A/w": np.arange(6.0).reshape(2, 3), "A/b": np.array([np.pi])}
    save_checkpoint(tmp_path / "x.ckpt", tensors, {"k": 1})
    back, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"k": 1}
    assert all(np.array_equal(back[k], v) for k, v in tensors.items())
    assert checkpoint_bytes(tensors) == checkpoint_bytes(dict(reversed(list(tensors.items()))))
    assert strip_namespace("A", namespaced("A", {"w": 1})) == {"w": 1}
    with pytest.raises(ValueError):
        parse_checkpoint(b"garbage")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31))
def test_linear_matches_numpy(n, k, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(n, k)), rng.normal(size=(k, 3)), rng.normal(size=3)
    assert np.allclose(linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w + b, rtol=1e-13, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 3.0))
def test_softmax_shift_invariant(seed, shift):
    x = np.random.default_rng(seed).normal(size=(3, 7))
    assert np.allclose(softmax(Tensor(x)).data, softmax(Tensor(x + shift)).data, atol=1e-14)
