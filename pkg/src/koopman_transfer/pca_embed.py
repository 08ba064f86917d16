"""Baseline embedders: plain 3D PCA and a physics-informed 9D PCA pipeline."""

from dataclasses import dataclass

import numpy as np

from .chaos_sim import LorenzParams, lorenz_deriv
from .errors import RankDeficient

RANK_TOL = 1e-12


def jacobi_eigh(a, tol=1e-15, max_sweeps=100):
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Returns ``(values, vectors)`` with eigenvectors as columns, sorted by
    descending eigenvalue.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    v = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
                v = v @ rot
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], v[:, order]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance_ratio: np.ndarray
    explained_variance: np.ndarray
    spectrum_ratio: np.ndarray = None  # ratios for all d axes, kept for diagnostics

    @property
    def k(self):
        return self.components.shape[0]

    def transform(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (x - self.mean) @ self.components.T

    def inverse_transform(self, z):
        return np.asarray(z, dtype=np.float64) @ self.components + self.mean

    def state_dict(self):
        return {
            "mean": self.mean,
            "components": self.components,
            "explained_variance_ratio": self.explained_variance_ratio,
            "explained_variance": self.explained_variance,
            "spectrum_ratio": self.spectrum_ratio,
        }

    @classmethod
    def from_state(cls, state):
        keys = ("mean", "components", "explained_variance_ratio", "explained_variance", "spectrum_ratio")
        return cls(**{k: np.asarray(state[k], dtype=np.float64) for k in keys})

    @classmethod
    def identity(cls, d=3):
        return cls(np.zeros(d), np.eye(d), np.full(d, 1.0 / d), np.ones(d), np.full(d, 1.0 / d))


def fit_pca(x, k, allow_deficient=False):
    """Principal axes of ``x`` (n, d) by descending covariance eigenvalue.

    Raises RankDeficient when fewer than ``k`` directions carry variance,
    unless ``allow_deficient`` keeps the null directions as extra axes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("fit_pca expects an (n, d) array")
    n, d = x.shape
    if k > d or n <= k:
        raise ValueError(f"need n > k and k <= d, got n={n}, d={d}, k={k}")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / (n - 1)
    values, vectors = jacobi_eigh(cov)
    values = np.clip(values, 0.0, None)
    total = values.sum()
    rank = int(np.sum(values > RANK_TOL * max(total, 1e-300)))
    if rank < k and not allow_deficient:
        raise RankDeficient(rank, k)
    comps = vectors[:, :k].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    ratio = values / total
    return PcaModel(mean, comps, ratio[:k].copy(), values[:k].copy(), ratio)


def pi_features(s, pca1, p=LorenzParams()):
    """Nine physics-informed features for states ``s`` (..., 3).

    PCA coordinates, the Lorenz vector field rotated into the same basis, and
    the polar angle (as sin, cos) and radius in the first two PCA coordinates.
    """
    s = np.asarray(s, dtype=np.float64)
    z = pca1.transform(s)
    dz = lorenz_deriv(s, p) @ pca1.components.T
    angle = np.arctan2(z[..., 1], z[..., 0])  # numpy returns 0 for atan2(0, 0)
    radius = np.sqrt(z[..., 0] ** 2 + z[..., 1] ** 2)
    return np.concatenate(
        [z, dz, np.sin(angle)[..., None], np.cos(angle)[..., None], radius[..., None]], axis=-1
    )


@dataclass(frozen=True)
class PiEmbedder:
    pca1: PcaModel
    pca2: PcaModel
    params: LorenzParams = LorenzParams()

    dim = 9

    def embed(self, s):
        return self.pca2.transform(pi_features(s, self.pca1, self.params))

    def decode(self, e):
        """Back to state space: invert pca2, then pca1 on the first three features."""
        feats = self.pca2.inverse_transform(e)
        return self.pca1.inverse_transform(feats[..., :3])

    def state_dict(self):
        out = {f"PCA1/{k}": v for k, v in self.pca1.state_dict().items()}
        out.update({f"PCA2/{k}": v for k, v in self.pca2.state_dict().items()})
        return out

    @classmethod
    def from_state(cls, state, params=LorenzParams()):
        strip = lambda ns: {k.split("/", 1)[1]: v for k, v in state.items() if k.startswith(ns + "/")}
        return cls(PcaModel.from_state(strip("PCA1")), PcaModel.from_state(strip("PCA2")), params)


@dataclass(frozen=True)
class StandardEmbedder:
    pca: PcaModel

    dim = 3

    def embed(self, s):
        return embed_standard(s, self.pca)

    def decode(self, e):
        return self.pca.inverse_transform(e)

    def state_dict(self):
        return {f"PCA1/{k}": v for k, v in self.pca.state_dict().items()}

    @classmethod
    def from_state(cls, state):
        return cls(PcaModel.from_state({k.split("/", 1)[1]: v for k, v in state.items() if k.startswith("PCA1/")}))


def _stack_states(trajs):
    if not trajs:
        raise ValueError("empty training split")
    return np.concatenate([t.states for t in trajs], axis=0)


def fit_pi_pipeline(train_trajs, params=LorenzParams()):
    states = _stack_states(train_trajs)
    pca1 = fit_pca(states, 3)
    # the first vector-field component is affine in the state, so the nine
    # features span only eight directions; the ninth axis carries no variance
    pca2 = fit_pca(pi_features(states, pca1, params), 9, allow_deficient=True)
    return PiEmbedder(pca1, pca2, params)


def fit_standard(train_trajs):
    return StandardEmbedder(fit_pca(_stack_states(train_trajs), 3))


def embed_standard(s, pca):
    return pca.transform(s)
