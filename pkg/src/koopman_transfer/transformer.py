"""Pre-LayerNorm decoder-only transformer over embedding sequences."""

from dataclasses import dataclass
import logging

import numpy as np

from .autodiff import (
    LayerNorm,
    Linear,
    Module,
    Tensor,
    dropout,
    gelu,
    make_optimizer,
    matmul,
    mse_loss,
    no_grad,
    softmax,
)
from .dataset import WindowSpec, stack_windows
from .errors import ContextOverflow, NonFiniteLoss, ShapeMismatch
from .rng import named_rng

log = logging.getLogger(__name__)

ROLLOUT_WINDOWS = ((0, 64), (64, 128), (128, 192), (192, 256))


@dataclass(frozen=True)
class TransformerConfig:
    embed_dim: int = 32
    n_layers: int = 4
    n_heads: int = 4
    dropout: float = 0.1
    context_length: int = 64
    init_std: float = 0.05

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")

    @property
    def ffn_dim(self):
        return 4 * self.embed_dim

    @property
    def head_dim(self):
        return self.embed_dim // self.n_heads


@dataclass(frozen=True)
class Stage2Config:
    lr: float = 1e-4
    epochs: int = 200
    batch: int = 16
    weight_decay: float = 1e-10
    optimizer: str = "adam"
    window_length: int = 64
    stride: int = 64
    val_length: int = 64
    val_stride: int = 64
    rollout_steps: int = 256


def parameter_count(cfg):
    """Closed form for the number of scalars in a model built from ``cfg``."""
    e = cfg.embed_dim
    return cfg.n_layers * (12 * e * e + 13 * e) + e * e + 3 * e


def sinusoidal_table(length, dim):
    """Even channels carry sines, odd channels cosines, with geometric wavelengths."""
    pos = np.arange(length)[:, None]
    pair = np.arange(dim) // 2
    angle = pos / np.power(10000.0, 2.0 * pair / dim)
    return np.where(np.arange(dim) % 2 == 0, np.sin(angle), np.cos(angle))


def causal_mask(t):
    return np.tril(np.ones((t, t), dtype=bool))


class MultiHeadAttention(Module):
    def __init__(self, cfg, rng):
        e = cfg.embed_dim
        self.n_heads, self.head_dim = cfg.n_heads, cfg.head_dim
        self.q = Linear.normal(e, e, rng, cfg.init_std)
        self.k = Linear.normal(e, e, rng, cfg.init_std)
        self.v = Linear.normal(e, e, rng, cfg.init_std)
        self.out = Linear.normal(e, e, rng, cfg.init_std)

    def _split(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x):
        b, t, e = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = matmul(q, k.transpose(0, 1, 3, 2))
        attn = softmax(scores, mask=causal_mask(t), scale=1.0 / np.sqrt(self.head_dim))
        mixed = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, e)
        return self.out(mixed)


class Block(Module):
    def __init__(self, cfg, rng):
        e = cfg.embed_dim
        self.rate = cfg.dropout
        self.ln1 = LayerNorm(e)
        self.attn = MultiHeadAttention(cfg, rng)
        self.ln2 = LayerNorm(e)
        self.ff1 = Linear.normal(e, cfg.ffn_dim, rng, cfg.init_std)
        self.ff2 = Linear.normal(cfg.ffn_dim, e, rng, cfg.init_std)

    def forward(self, x, rng=None):
        x = x + self.attn(self.ln1(x))
        h = self.ff2(gelu(self.ff1(self.ln2(x))))
        return x + dropout(h, self.rate, rng, self.training and rng is not None)


class TransformerModel(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.embed_dim)
        self.proj = Linear.normal(cfg.embed_dim, cfg.embed_dim, rng, cfg.init_std)
        self._pos = sinusoidal_table(cfg.context_length, cfg.embed_dim)

    def hidden(self, seq, rng=None):
        """Final-layernorm hidden states (B, T, E); ``seq`` is (T, E) or (B, T, E)."""
        x = seq if isinstance(seq, Tensor) else Tensor(np.asarray(seq, dtype=np.float64))
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[-1] != self.cfg.embed_dim:
            raise ShapeMismatch(f"expected (B, T, {self.cfg.embed_dim}), got {x.shape}")
        t = x.shape[1]
        if t > self.cfg.context_length:
            raise ContextOverflow(f"sequence length {t} exceeds context {self.cfg.context_length}")
        x = x + self._pos[:t]
        for block in self.blocks:
            x = block(x, rng)
        return self.ln_f(x)

    def forward(self, seq, rng=None):
        squeeze = not isinstance(seq, Tensor) and np.ndim(seq) == 2
        out = self.proj(self.hidden(seq, rng))
        return out.reshape(*out.shape[1:]) if squeeze else out

    def predict(self, seq):
        """Eval-mode forward on arrays, returning arrays."""
        with no_grad():
            return self.forward(seq).data


def build_transformer(cfg, seed):
    return TransformerModel(cfg, named_rng(seed, "transformer/weights"))


def embedding_windows(trajs, embedder, length, stride):
    """Embedded windows (n, length + 1, E) ready for teacher forcing."""
    blocks = stack_windows(trajs, WindowSpec(length, stride))[0]
    return embedder.embed(blocks)


def teacher_forced_loss(model, windows, chunk=256):
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(windows), chunk):
            w = windows[i : i + chunk]
            pred = model.forward(Tensor(w[:, :-1]))
            total += float(np.sum((pred.data - w[:, 1:]) ** 2))
            count += pred.data.size
    return total / count


def pretrain(model, embedder, train_trajs, val_trajs, cfg, seed=0):
    """Teacher-forced next-embedding training; the embedder is only read.

    Returns ``(model, curves)`` holding the weights of the best validation
    epoch (teacher-forced).  Each curve row also carries the autoregressive
    validation MSE in state space over the first ``rollout_steps`` steps.
    """
    train = embedding_windows(train_trajs, embedder, cfg.window_length, cfg.stride)
    val = embedding_windows(val_trajs, embedder, cfg.val_length, cfg.val_stride) if val_trajs else None
    params = model.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, cfg.weight_decay)
    curves = []
    best_val, best_state = np.inf, model.state_dict()
    for epoch in range(cfg.epochs):
        model.train()
        order = named_rng(seed, f"stage2/shuffle/{epoch}").permutation(len(train))
        drop_rng = named_rng(seed, f"stage2/dropout/{epoch}")
        run, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch):
            w = train[order[i : i + cfg.batch]]
            opt.zero_grad()
            loss = mse_loss(model(Tensor(w[:, :-1]), rng=drop_rng), w[:, 1:])
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(epoch, value)
            loss.backward()
            opt.step()
            run += value * len(w)
            seen += len(w)
        model.eval()
        val_loss = teacher_forced_loss(model, val) if val is not None else run / seen
        curves.append({"epoch": epoch, "train_loss": run / seen, "val_loss": val_loss})
        log.info("stage2 epoch %d train %.6g val %.6g", epoch, run / seen, val_loss)
        if val_loss < best_val:
            best_val, best_state = val_loss, model.state_dict()
    if curves:
        model.load_state_dict(best_state)
    model.eval()
    if val_trajs and curves:
        starts = np.stack([t.states[0] for t in val_trajs])
        truth = np.stack([t.states[1 : cfg.rollout_steps + 1] for t in val_trajs])
        pred = rollout(model, embedder, starts, cfg.rollout_steps)
        curves[-1]["val_rollout_mse"] = float(np.mean((pred - truth) ** 2))
    return model, curves


def rollout(model, embedder, s0, steps=256):
    """Autoregressive prediction from single ground-truth states ``s0`` (B, 3) or (3,).

    The context is the most recent ``context_length`` embeddings.  Returns the
    decoded predicted states for steps 1..steps, shape (B, steps, 3).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    s0 = np.asarray(s0, dtype=np.float64)
    single = s0.ndim == 1
    s0 = s0.reshape(-1, 3)
    ctx_len = model.cfg.context_length
    seq = np.empty((len(s0), steps + 1, model.cfg.embed_dim))
    seq[:, 0] = embedder.embed(s0)
    model.eval()
    for t in range(steps):
        lo = max(0, t + 1 - ctx_len)
        seq[:, t + 1] = model.predict(seq[:, lo : t + 1])[:, -1]
    states = embedder.decode(seq[:, 1:])
    return states[0] if single else states


def windowed_mse(pred, truth, windows=ROLLOUT_WINDOWS):
    """Per-trajectory MSE over each step window, averaging steps and coordinates.

    ``pred`` and ``truth`` are (B, T, 3) with index 0 the first predicted step.
    Returns (B, n_windows).
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"{pred.shape} vs {truth.shape}")
    sq = (pred - truth) ** 2
    return np.stack([sq[:, a:b].mean(axis=(1, 2)) for a, b in windows], axis=1)


def evaluate_rollouts(model, embedder, trajs, steps=256):
    """Rollout every trajectory from its first state; returns (B, 4) window MSEs."""
    s0 = np.stack([t.states[0] for t in trajs])
    truth = np.stack([t.states[1 : steps + 1] for t in trajs])
    return windowed_mse(rollout(model, embedder, s0, steps), truth)
