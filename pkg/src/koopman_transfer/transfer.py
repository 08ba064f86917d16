"""Safety-value regression head on top of a pretrained sequence backbone."""

from dataclasses import dataclass
import logging

import numpy as np

from .autodiff import Linear, Module, Tensor, concat, make_optimizer, mse_loss, no_grad, relu
from .dataset import WindowSpec, stack_windows
from .errors import ContextOverflow, MissingLabels, NonFiniteLoss, ShapeMismatch
from .rng import named_rng
from .safety import interpolate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Stage3Config:
    lr: float = 6.83e-3
    epochs: int = 80
    batch: int = 16
    optimizer: str = "adam"
    weight_decay: float = 0.0
    frozen: bool = True
    h1: int = 128
    h2: int = 64
    context: int = 64
    stride: int = 16
    val_stride: int = 32

    def __post_init__(self):
        if min(self.lr, self.batch, self.h1, self.h2, self.context, self.stride, self.val_stride) <= 0 or self.epochs < 0:
            raise ValueError("stage 3 settings must be positive")


class SafetyHead(Module):
    """(embed_dim + 3) -> h1 -> h2 -> 1 with ReLU between the affine maps."""

    def __init__(self, embed_dim, h1, h2, rng):
        self.in_dim = embed_dim + 3
        self.fc1 = Linear.kaiming(self.in_dim, h1, rng)
        self.fc2 = Linear.kaiming(h1, h2, rng)
        self.fc3 = Linear.kaiming(h2, 1, rng)

    def forward(self, x):
        return self.fc3(relu(self.fc2(relu(self.fc1(x))))).reshape(-1)


def head_parameter_count(embed_dim, h1, h2):
    d = embed_dim + 3
    return d * h1 + h1 + h1 * h2 + h2 + h2 + 1


def build_head(embed_dim, cfg, seed):
    return SafetyHead(embed_dim, cfg.h1, cfg.h2, named_rng(seed, "stage3/head"))


@dataclass
class LabeledWindows:
    context: np.ndarray  # (n, L, 3) raw states
    query: np.ndarray  # (n, 3) state right after the context
    target: np.ndarray  # (n,) safety value at the query
    traj_ids: np.ndarray
    starts: np.ndarray

    def __len__(self):
        return len(self.target)

    def subset(self, idx):
        return LabeledWindows(self.context[idx], self.query[idx], self.target[idx], self.traj_ids[idx], self.starts[idx])


def labeled_windows(trajs, grid, context=64, stride=16, mode="trilinear"):
    """History windows with the next state as query, keeping queries inside the region."""
    blocks, ids, starts = stack_windows(trajs, WindowSpec(context, stride))
    query = blocks[:, context]
    target, inside = interpolate(grid, query, mode=mode)
    keep = np.flatnonzero(inside)
    return LabeledWindows(blocks[keep, :context], query[keep], target[keep], np.asarray(ids)[keep], np.asarray(starts)[keep])


def backbone_hidden(backbone, embedder, context, rng=None):
    """Final-position hidden vector (n, E) for raw-state contexts (n, L, 3)."""
    context = np.asarray(context, dtype=np.float64)
    if context.shape[1] > backbone.cfg.context_length:
        raise ContextOverflow(f"context of {context.shape[1]} states exceeds {backbone.cfg.context_length}")
    h = backbone.hidden(Tensor(embedder.embed(context)), rng)
    return h[:, -1, :]


def head_inputs(hidden, query):
    query = query if isinstance(query, Tensor) else Tensor(np.asarray(query, dtype=np.float64))
    return concat([hidden, query], axis=1)


def predict_batch(backbone, embedder, head, context, query, chunk=512):
    backbone.eval()
    out = []
    with no_grad():
        for i in range(0, len(query), chunk):
            h = backbone_hidden(backbone, embedder, context[i : i + chunk])
            out.append(head(head_inputs(h, query[i : i + chunk])).data)
    return np.concatenate(out) if out else np.zeros(0)


def predict_safety(context, query, backbone, embedder, head):
    """Scalar safety prediction for one 64-state history and one query state."""
    context = np.asarray(context, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if context.ndim != 2 or context.shape[1] != 3 or query.shape != (3,):
        raise ShapeMismatch(f"expected (L, 3) context and (3,) query, got {context.shape}, {query.shape}")
    if len(context) != backbone.cfg.context_length:
        raise ContextOverflow(f"context must hold exactly {backbone.cfg.context_length} states")
    if not np.all(np.isfinite(query)):
        raise ValueError("query must be finite")
    return float(predict_batch(backbone, embedder, head, context[None], query[None])[0])


def _hidden_features(backbone, embedder, windows, chunk=512):
    backbone.eval()
    with no_grad():
        parts = [backbone_hidden(backbone, embedder, windows.context[i : i + chunk]).data
                 for i in range(0, len(windows), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, backbone.cfg.embed_dim))


def finetune(backbone, embedder, head, train, val, cfg, seed=0):
    """Fit the head (and the backbone when ``cfg.frozen`` is false) to safety targets.

    The embedder is never touched.  In frozen mode backbone features are
    computed once in eval mode and no backbone parameter receives a
    gradient.  Returns ``(head, curves)`` with the best validation weights
    restored for every trained module.
    """
    if len(train) == 0:
        raise MissingLabels("no labelled training windows")
    backbone.requires_grad_(not cfg.frozen)
    params = head.parameters() + ([] if cfg.frozen else backbone.parameters())
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, cfg.weight_decay)
    feats = _hidden_features(backbone, embedder, train) if cfg.frozen else None
    curves = []
    trained = [head] if cfg.frozen else [head, backbone]
    best_val, best_state = np.inf, [m.state_dict() for m in trained]
    for epoch in range(cfg.epochs):
        order = named_rng(seed, f"stage3/shuffle/{epoch}").permutation(len(train))
        drop_rng = named_rng(seed, f"stage3/dropout/{epoch}")
        if not cfg.frozen:
            backbone.train()
        run, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch):
            idx = order[i : i + cfg.batch]
            opt.zero_grad()
            if cfg.frozen:
                hidden = Tensor(feats[idx])
            else:
                hidden = backbone_hidden(backbone, embedder, train.context[idx], drop_rng)
            loss = mse_loss(head(head_inputs(hidden, train.query[idx])), train.target[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(epoch, value)
            loss.backward()
            opt.step()
            run += value * len(idx)
            seen += len(idx)
        backbone.eval()
        if val is not None and len(val):
            val_loss = float(np.mean((predict_batch(backbone, embedder, head, val.context, val.query) - val.target) ** 2))
        else:
            val_loss = run / seen
        curves.append({"epoch": epoch, "train_loss": run / seen, "val_loss": val_loss})
        log.info("stage3 epoch %d train %.6g val %.6g", epoch, run / seen, val_loss)
        if val_loss < best_val:
            best_val, best_state = val_loss, [m.state_dict() for m in trained]
    for m, state in zip(trained, best_state):
        m.load_state_dict(state)
    backbone.requires_grad_(True)
    backbone.eval()
    return head, curves
