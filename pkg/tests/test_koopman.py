import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopman_transfer.dataset import fit_normalizer
from koopman_transfer.errors import ShapeMismatch
from koopman_transfer.koopman import (
    KoopmanAutoencoder,
    Stage1Config,
    StructuredKoopman,
    build_autoencoder,
    composite_loss,
    materialize,
    train_stage1,
)


def band_ok(K, bandwidth=2):
    i, j = np.indices(K.shape)
    off = K - np.diag(np.diag(K))
    return np.all(K[np.abs(i - j) > bandwidth] == 0.0) and np.array_equal(off, -off.T)


def test_zero_parameters_give_zero_matrix():
    op = StructuredKoopman(np.zeros(32), [np.zeros(31), np.zeros(30)])
    assert np.array_equal(materialize(op), np.zeros((32, 32)))


def test_unit_diagonal_gives_identity():
    op = StructuredKoopman(np.ones(32), [np.zeros(31), np.zeros(30)])
    assert np.array_equal(materialize(op), np.eye(32))


def test_band_layout():
    rng = np.random.default_rng(3)
    d, s1, s2 = rng.normal(size=32), rng.normal(size=31), rng.normal(size=30)
    K = materialize(StructuredKoopman(d, [s1, s2]))
    assert np.array_equal(np.diag(K), d)
    assert np.array_equal(np.diag(K, 1), s1) and np.array_equal(np.diag(K, -1), -s1)
    assert np.array_equal(np.diag(K, 2), s2) and np.array_equal(np.diag(K, -2), -s2)
    assert band_ok(K)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(1, 3), st.integers(0, 2**31))
def test_structure_for_any_parameters(dim, bandwidth, seed):
    bandwidth = min(bandwidth, dim - 1)
    rng = np.random.default_rng(seed)
    bands = [rng.normal(size=dim - b) for b in range(1, bandwidth + 1)]
    assert band_ok(materialize(StructuredKoopman(rng.normal(size=dim), bands)), bandwidth)


def test_init_ramp_and_bands():
    op = StructuredKoopman.init_structured(32, 2, np.random.default_rng(0))
    d = op.d.data
    assert d[0] == 1.0 and d[31] == 0.0
    assert abs(d[15] - 0.516129) < 1e-6
    for band in op.bands:
        assert np.all((band.data >= 0.0) & (band.data < 0.1))


def test_architecture_shapes():
    model = build_autoencoder(Stage1Config(), 0)
    z = model.encode_array(np.random.default_rng(0).normal(size=(5, 3)))
    assert z.shape == (5, 32)
    # layernorm output: zero mean and unit variance per row (unit scale at init)
    assert np.allclose(z.mean(axis=1), 0, atol=1e-12)
    assert np.allclose(z.var(axis=1), 1, atol=1e-3)
    assert model.enc1.weight.shape == (3, 500) and model.dec2.weight.shape == (500, 3)


def _layernorm(v, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [(x - mu) / (var + eps) ** 0.5 for x in v]


def _hand_loss(model, s, s_next, l0, l1, l2):
    """Scalar re-evaluation with python lists and loops only."""
    W = lambda lin: lin.weight.data.tolist()
    B = lambda lin: lin.bias.data.tolist()

    def affine(x, lin):
        w, b = W(lin), B(lin)
        return [sum(x[i] * w[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]

    relu = lambda v: [max(x, 0.0) for x in v]
    enc = lambda x: _layernorm(affine(relu(affine(x, model.enc1)), model.enc2))
    dec = lambda z: affine(relu(affine(z, model.dec1)), model.dec2)
    dim = model.embed_dim
    d = model.koopman.d.data.tolist()
    K = [[0.0] * dim for _ in range(dim)]
    for i in range(dim):
        K[i][i] = d[i]
    for b, band in enumerate(model.koopman.bands, start=1):
        for i, v in enumerate(band.data.tolist()):
            K[i][i + b] = v
            K[i + b][i] = -v
    rec = dyn = 0.0
    for x, y in zip(s, s_next):
        z = enc(x)
        r = dec(z)
        rec += sum((a - c) ** 2 for a, c in zip(r, x))
        kz = [sum(K[i][j] * z[j] for j in range(dim)) for i in range(dim)]
        p = dec(kz)
        dyn += sum((a - c) ** 2 for a, c in zip(p, y))
    n = 3 * len(s)
    frob = sum(v * v for row in K for v in row)
    return l0 * rec / n + l1 * dyn / n + l2 * frob


def test_composite_loss_matches_hand_evaluation():
    rng = np.random.default_rng(11)
    model = KoopmanAutoencoder(rng, embed_dim=5, hidden=6, bandwidth=2)
    for lin in (model.enc1, model.enc2, model.dec1, model.dec2):
        lin.bias.data = rng.normal(size=lin.bias.shape)
    window = rng.normal(size=(3, 3))
    s, s_next = window[:-1], window[1:]
    loss, _ = composite_loss(model, s, s_next, 1e4, 1.0, 0.1)
    hand = _hand_loss(model, s.tolist(), s_next.tolist(), 1e4, 1.0, 0.1)
    assert abs(loss.item() - hand) <= 1e-10 * max(1.0, abs(hand))


def test_loss_is_linear_in_weights():
    model = KoopmanAutoencoder(np.random.default_rng(2), embed_dim=4, hidden=5)
    s = np.random.default_rng(3).normal(size=(2, 6, 3))
    one = composite_loss(model, s[:, :-1], s[:, 1:], 0.0, 1.0, 0.0)[0].item()
    two = composite_loss(model, s[:, :-1], s[:, 1:], 0.0, 2.0, 0.0)[0].item()
    assert two == pytest.approx(2 * one, rel=1e-15)


def test_loss_shape_mismatch():
    model = KoopmanAutoencoder(np.random.default_rng(2), embed_dim=4, hidden=5)
    with pytest.raises(ShapeMismatch):
        composite_loss(model, np.zeros((2, 3)), np.zeros((3, 3)), 1, 1, 1)


def test_zero_epochs_returns_model_unchanged(tiny_dataset):
    cfg = Stage1Config(epochs=0)
    model = build_autoencoder(cfg, 5)
    before = model.state_dict()
    out, curves = train_stage1(tiny_dataset.train, tiny_dataset.val, cfg, fit_normalizer(tiny_dataset.train), seed=5, model=model)
    assert curves == []
    assert all(np.array_equal(before[k], v) for k, v in out.state_dict().items())


def test_structure_holds_after_every_step(tiny_dataset):
    cfg = Stage1Config(epochs=1, batch=32, hidden=64)
    norm = fit_normalizer(tiny_dataset.train)
    checked = []

    def check(model, step):
        checked.append(band_ok(model.koopman.matrix()))

    train_stage1(tiny_dataset.train, None, cfg, norm, seed=0, max_steps=20, on_step=check)
    assert len(checked) == 4  # 104 windows at batch 32
    assert all(checked)


def test_training_reduces_loss(tiny_dataset):
    cfg = Stage1Config(epochs=4, batch=8, hidden=64)
    norm = fit_normalizer(tiny_dataset.train)
    _, curves = train_stage1(tiny_dataset.train, tiny_dataset.val, cfg, norm, seed=0)
    losses = [c["train_loss"] for c in curves]
    assert losses[-1] < losses[0]
    assert np.allclose([c["lr"] for c in curves], [1e-3 * 0.95**e for e in range(4)])
