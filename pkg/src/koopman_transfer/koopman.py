"""Koopman autoencoder with a banded skew-symmetric operator (stage 1)."""

from dataclasses import dataclass
import logging

import numpy as np

from .autodiff import (
    Adam,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    concat,
    matmul,
    mse_loss,
    no_grad,
    relu,
    sum_of_squares,
)
from .dataset import WindowSpec, stack_windows
from .errors import NonFiniteLoss, ShapeMismatch
from .rng import named_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Stage1Config:
    lr: float = 1e-3
    epochs: int = 300
    batch: int = 512
    lr_decay: float = 0.95
    weight_decay: float = 1e-8
    lambda0: float = 1e4
    lambda1: float = 1.0
    lambda2: float = 0.1
    window_length: int = 64
    stride: int = 16
    val_length: int = 64
    val_stride: int = 32
    embed_dim: int = 32
    hidden: int = 500
    bandwidth: int = 2


def _band_basis(dim, bandwidth):
    """Constant 0/+-1 matrix mapping (diag, band_1, ..., band_b) to vec(K)."""
    n_params = dim + sum(dim - b for b in range(1, bandwidth + 1))
    basis = np.zeros((dim * dim, n_params))
    for k in range(dim):
        basis[k * dim + k, k] = 1.0
    col = dim
    for b in range(1, bandwidth + 1):
        for i in range(dim - b):
            basis[i * dim + i + b, col] = 1.0
            basis[(i + b) * dim + i, col] = -1.0
            col += 1
    return basis


class StructuredKoopman(Module):
    """K = diag(d) + S where S is skew-symmetric and zero beyond ``bandwidth``.

    Entries: S[i, i+b] = bands[b-1][i] and S[i+b, i] = -bands[b-1][i].
    """

    def __init__(self, d, bands):
        self.dim = len(d)
        self.bandwidth = len(bands)
        self.d = Parameter(d)
        self.bands = [Parameter(b) for b in bands]
        for b, band in enumerate(self.bands, start=1):
            if band.shape != (self.dim - b,):
                raise ShapeMismatch(f"band {b} must have {self.dim - b} entries, got {band.shape}")
        self._basis = _band_basis(self.dim, self.bandwidth)

    @classmethod
    def init_structured(cls, dim=32, bandwidth=2, rng=None):
        """Diagonal ramps linearly from 1 to 0; bands drawn from U[0, 0.1)."""
        rng = rng if rng is not None else named_rng(0, "koopman/operator")
        d = 1.0 - np.arange(dim) / (dim - 1)
        bands = [rng.uniform(0.0, 0.1, size=dim - b) for b in range(1, bandwidth + 1)]
        return cls(d, bands)

    @property
    def s1(self):
        return self.bands[0]

    @property
    def s2(self):
        return self.bands[1]

    def materialize(self):
        flat = concat([self.d] + self.bands, axis=0).reshape(-1, 1)
        return matmul(Tensor(self._basis), flat).reshape(self.dim, self.dim)

    def matrix(self):
        with no_grad():
            return self.materialize().data.copy()


def materialize(op):
    return op.matrix()


class KoopmanAutoencoder(Module):
    """Encoder 3 -> hidden -> embed -> LayerNorm, decoder embed -> hidden -> 3."""

    def __init__(self, rng, embed_dim=32, hidden=500, bandwidth=2, operator_rng=None):
        self.embed_dim = embed_dim
        self.enc1 = Linear.kaiming(3, hidden, rng)
        self.enc2 = Linear.kaiming(hidden, embed_dim, rng)
        self.enc_norm = LayerNorm(embed_dim)
        self.dec1 = Linear.kaiming(embed_dim, hidden, rng)
        self.dec2 = Linear.kaiming(hidden, 3, rng)
        self.koopman = StructuredKoopman.init_structured(embed_dim, bandwidth, operator_rng or rng)

    def encode(self, s):
        return self.enc_norm(self.enc2(relu(self.enc1(s))))

    def decode(self, z):
        return self.dec2(relu(self.dec1(z)))

    def advance(self, z, K=None):
        K = self.koopman.materialize() if K is None else K
        return matmul(z, K.T)

    def forward(self, s):
        return self.decode(self.encode(s))

    def encode_array(self, s):
        s = np.asarray(s, dtype=np.float64)
        with no_grad():
            return self.encode(Tensor(s.reshape(-1, 3))).data.reshape(s.shape[:-1] + (self.embed_dim,))

    def decode_array(self, z):
        z = np.asarray(z, dtype=np.float64)
        with no_grad():
            return self.decode(Tensor(z.reshape(-1, self.embed_dim))).data.reshape(z.shape[:-1] + (3,))


def composite_loss(model, inputs, targets, lambda0, lambda1, lambda2):
    """Weighted reconstruction + one-step dynamics + operator-norm loss.

    ``inputs`` holds states s_j and ``targets`` the matching s_{j+1}; both
    have shape (..., 3).  Returns ``(total, parts)`` where ``parts`` maps
    ``recon``, ``dynamics`` and ``operator`` to floats (unweighted).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape != targets.shape or inputs.shape[-1] != 3:
        raise ShapeMismatch(f"inputs {inputs.shape} and targets {targets.shape} must match and end in 3")
    s = inputs.reshape(-1, 3)
    s_next = targets.reshape(-1, 3)
    n = len(s)
    K = model.koopman.materialize()
    z = model.encode(Tensor(s))
    decoded = model.decode(concat([z, model.advance(z, K)], axis=0))
    recon = mse_loss(decoded[:n], s)
    dyn = mse_loss(decoded[n:], s_next)
    reg = sum_of_squares(K)
    total = recon * lambda0 + dyn * lambda1 + reg * lambda2
    parts = {"recon": recon.item(), "dynamics": dyn.item(), "operator": reg.item()}
    return total, parts


def evaluate_loss(model, blocks, cfg, chunk=None):
    """Composite loss over windows ``blocks`` (n, L + 1, 3), averaged per window."""
    chunk = chunk or max(cfg.batch, 1)
    totals, weights = [], []
    with no_grad():
        for i in range(0, len(blocks), chunk):
            b = blocks[i : i + chunk]
            loss, _ = composite_loss(model, b[:, :-1], b[:, 1:], cfg.lambda0, cfg.lambda1, cfg.lambda2)
            totals.append(loss.item())
            weights.append(len(b))
    return float(np.dot(totals, weights) / np.sum(weights)) if weights else float("nan")


def reconstruction_mse(model, states):
    states = np.asarray(states, dtype=np.float64).reshape(-1, 3)
    with no_grad():
        rec = model(Tensor(states)).data
    return float(np.mean((rec - states) ** 2))


def latent_step_mse(model, states):
    """MSE between encode(s_{t+1}) and K encode(s_t) along trajectories (n, T, 3)."""
    states = np.asarray(states, dtype=np.float64)
    z = model.encode_array(states)
    K = model.koopman.matrix()
    pred = z[..., :-1, :] @ K.T
    return float(np.mean((z[..., 1:, :] - pred) ** 2))


def build_autoencoder(cfg, seed):
    return KoopmanAutoencoder(
        named_rng(seed, "koopman/weights"),
        embed_dim=cfg.embed_dim,
        hidden=cfg.hidden,
        bandwidth=cfg.bandwidth,
        operator_rng=named_rng(seed, "koopman/operator"),
    )


def train_stage1(train_trajs, val_trajs, cfg, normalizer, seed=0, model=None, max_steps=None, on_step=None):
    """Train the Koopman autoencoder on normalised windows.

    Returns ``(model, curves)``.  The returned model carries the weights of
    the epoch with the lowest validation loss.  ``max_steps`` stops early
    after that many optimiser steps (used for short structural checks).
    """
    model = model or build_autoencoder(cfg, seed)
    curves = []
    if cfg.epochs == 0:
        return model, curves

    train_blocks = normalizer.apply(stack_windows(train_trajs, WindowSpec(cfg.window_length, cfg.stride))[0])
    val_blocks = None
    if val_trajs:
        val_blocks = normalizer.apply(stack_windows(val_trajs, WindowSpec(cfg.val_length, cfg.val_stride))[0])

    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    best_val, best_state = np.inf, model.state_dict()
    steps = 0
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * cfg.lr_decay**epoch
        order = named_rng(seed, f"stage1/shuffle/{epoch}").permutation(len(train_blocks))
        epoch_loss, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch):
            b = train_blocks[order[i : i + cfg.batch]]
            opt.zero_grad()
            loss, _ = composite_loss(model, b[:, :-1], b[:, 1:], cfg.lambda0, cfg.lambda1, cfg.lambda2)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(epoch, value)
            loss.backward()
            opt.step()
            epoch_loss += value * len(b)
            seen += len(b)
            steps += 1
            if on_step is not None:
                on_step(model, steps)
            if max_steps is not None and steps >= max_steps:
                break
        val = evaluate_loss(model, val_blocks, cfg) if val_blocks is not None else epoch_loss / seen
        curves.append({"epoch": epoch, "train_loss": epoch_loss / seen, "val_loss": val, "lr": opt.lr})
        log.info("stage1 epoch %d train %.6g val %.6g", epoch, epoch_loss / seen, val)
        if val < best_val:
            best_val, best_state = val, model.state_dict()
        if max_steps is not None and steps >= max_steps:
            break
    model.load_state_dict(best_state)
    return model, curves


class KoopmanEmbedder:
    """Frozen encoder/decoder pair acting on raw states via the normaliser."""

    def __init__(self, model, normalizer):
        self.model = model
        self.normalizer = normalizer
        self.dim = model.embed_dim

    def embed(self, s):
        return self.model.encode_array(self.normalizer.apply(s))

    def decode(self, z):
        return self.normalizer.invert(self.model.decode_array(z))
