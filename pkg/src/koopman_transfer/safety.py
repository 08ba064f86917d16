"""Ground-truth safety function on a lattice over a box-shaped region.

The update is

    U_{k+1}(q_i) = max_xi min_j max(|F(q_i, xi) - q_j|, U_k(q_j))

where F is the time-tau flow plus additive noise and q_j ranges over the
lattice nodes.  Starting from zero the iterates are non-decreasing and take
values in a finite set, so they reach a fixed point in finitely many steps.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import csv
import itertools
import logging
import struct
from pathlib import Path

import numpy as np

from .chaos_sim import DEFAULT_PARAMS, IntegratorConfig, flow_map_batch
from .errors import NotConverged, ShapeMismatch

log = logging.getLogger(__name__)

FIELD_MAGIC = b"KTSAFE1\0"


@dataclass(frozen=True)
class SafetyRegion:
    x_lo: float = 0.0
    x_hi: float = 50.0
    y_lo: float = -50.0
    y_hi: float = 50.0
    z_lo: float = -50.0
    z_hi: float = 50.0

    def __post_init__(self):
        for a in "xyz":
            if not getattr(self, f"{a}_lo") < getattr(self, f"{a}_hi"):
                raise ValueError(f"region: {a}_lo must be below {a}_hi")

    @property
    def lo(self):
        return np.array([self.x_lo, self.y_lo, self.z_lo])

    @property
    def hi(self):
        return np.array([self.x_hi, self.y_hi, self.z_hi])

    def contains(self, s):
        s = np.asarray(s, dtype=np.float64)
        return np.all((s >= self.lo) & (s <= self.hi), axis=-1)


@dataclass
class SafetyGrid:
    """Axis-aligned lattice; node index is (ix * ny + iy) * nz + iz."""

    region: SafetyRegion
    res: tuple
    axes: tuple
    U: np.ndarray

    @property
    def shape(self):
        return tuple(self.res)

    @property
    def n_nodes(self):
        return int(np.prod(self.res))

    @property
    def spacing(self):
        return np.array([ax[1] - ax[0] for ax in self.axes])

    @property
    def nodes(self):
        gx, gy, gz = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def node_index(self, ix, iy, iz):
        nx, ny, nz = self.res
        return (np.asarray(ix) * ny + iy) * nz + iz


def build_grid(region=SafetyRegion(), res=(30, 30, 30)):
    res = tuple(int(n) for n in res)
    if len(res) != 3 or min(res) < 2:
        raise ValueError("every grid resolution must be at least 2")
    lo, hi = region.lo, region.hi
    axes = tuple(lo[a] + np.arange(res[a]) * ((hi[a] - lo[a]) / (res[a] - 1)) for a in range(3))
    for a in range(3):
        axes[a][-1] = hi[a]
    return SafetyGrid(region, res, axes, np.zeros(int(np.prod(res))))


@dataclass(frozen=True)
class NoiseModel:
    """Per-axis bound on the additive disturbance, sampled at its extreme points."""

    bound: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.bound) != 3 or min(self.bound) < 0:
            raise ValueError("noise bound must be three non-negative numbers")

    @property
    def samples(self):
        out = [np.zeros(3)]
        for a in range(3):
            if self.bound[a] > 0:
                for sign in (1.0, -1.0):
                    e = np.zeros(3)
                    e[a] = sign * self.bound[a]
                    out.append(e)
        return np.array(out)


@dataclass(frozen=True)
class SculptConfig:
    tau: float = 0.1
    tol: float = 1e-6
    max_iter: int = 1000
    pruning: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class SafetyResult:
    U: np.ndarray
    deltas: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self):
        return len(self.deltas)


def _dist(px, py, pz, nx, ny, nz):
    # shared by both minimisers so they round identically
    dx, dy, dz = px - nx, py - ny, pz - nz
    return np.sqrt((dx * dx + dy * dy) + dz * dz)


def min_over_nodes_naive(points, grid, U, chunk=256):
    """min_j max(|p - q_j|, U_j) for each row of ``points`` by full scan."""
    nodes = grid.nodes
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk]
        d = _dist(p[:, 0:1], p[:, 1:2], p[:, 2:3], nodes[:, 0], nodes[:, 1], nodes[:, 2])
        out[s : s + chunk] = np.maximum(d, U).min(axis=1)
    return out


def min_over_nodes_pruned(points, grid, U, chunk=4096):
    """Same values as the full scan, visiting only nodes that can still win.

    The nearest lattice node gives an upper bound ``ub`` on the minimum.
    Any node farther than ``ub`` along one axis has value above ``ub`` and
    is skipped, so only an index box around the nearest node is searched.
    Points whose box is too large for the current radius are retried with
    a doubled radius, falling back to the full scan.
    """
    points = np.asarray(points, dtype=np.float64)
    res = np.array(grid.res)
    lo, h = grid.region.lo, grid.spacing
    centre = np.clip(np.rint((points - lo) / h), 0, res - 1).astype(np.int64)
    ax, ay, az = grid.axes
    c_idx = grid.node_index(centre[:, 0], centre[:, 1], centre[:, 2])
    d0 = _dist(points[:, 0], points[:, 1], points[:, 2], ax[centre[:, 0]], ay[centre[:, 1]], az[centre[:, 2]])
    ub = np.maximum(d0, U[c_idx])
    need = (np.ceil(ub[:, None] / h) + 1).max(axis=1)
    out = np.empty(len(points))
    done = np.zeros(len(points), dtype=bool)
    r = 1
    while not done.all():
        if 2 * r + 1 >= res.max():
            rest = np.flatnonzero(~done)
            out[rest] = min_over_nodes_naive(points[rest], grid, U)
            break
        sel = np.flatnonzero(~done & (need <= r))
        if len(sel):
            offs = np.array(list(itertools.product(range(-r, r + 1), repeat=3)))
            per = max(1, chunk * 27 // len(offs))
            for s in range(0, len(sel), per):
                idx = sel[s : s + per]
                box = np.clip(centre[idx, None, :] + offs[None], 0, res - 1)
                p = points[idx]
                d = _dist(p[:, 0:1], p[:, 1:2], p[:, 2:3], ax[box[..., 0]], ay[box[..., 1]], az[box[..., 2]])
                j = grid.node_index(box[..., 0], box[..., 1], box[..., 2])
                out[idx] = np.maximum(d, U[j]).min(axis=1)
            done[sel] = True
        r *= 2
    return out


def flow_images(grid, noise=NoiseModel(), tau=0.1, integ=IntegratorConfig(), params=DEFAULT_PARAMS):
    """F(q_i, xi) for every noise sample and node, shape (n_samples, n_nodes, 3)."""
    base = flow_map_batch(grid.nodes, tau, integ, params)
    return np.stack([base + xi for xi in noise.samples])


def sculpt_iteration(U, grid, images, pruning=True, threads=1):
    """One application of the max-min-max update given precomputed ``images``."""
    U = np.asarray(U, dtype=np.float64)
    if U.shape != (grid.n_nodes,):
        raise ShapeMismatch(f"U has shape {U.shape}, grid has {grid.n_nodes} nodes")
    images = np.asarray(images, dtype=np.float64).reshape(-1, grid.n_nodes, 3)
    minimise = min_over_nodes_pruned if pruning else min_over_nodes_naive
    if threads > 1:
        flat = images.reshape(-1, 3)
        parts = np.array_split(np.arange(len(flat)), threads)
        with ThreadPoolExecutor(threads) as pool:
            vals = np.concatenate(list(pool.map(lambda ix: minimise(flat[ix], grid, U), parts)))
        vals = vals.reshape(images.shape[:2])
    else:
        vals = np.stack([minimise(img, grid, U) for img in images])
    return vals.max(axis=0)


def compute_safety(grid, noise=NoiseModel(), cfg=SculptConfig(), U0=None, integ=IntegratorConfig(),
                   params=DEFAULT_PARAMS, images=None):
    """Iterate the update to a fixed point (sup-norm change below ``cfg.tol``).

    Raises NotConverged, carrying the partial SafetyResult, when
    ``cfg.max_iter`` iterations are not enough.
    """
    if images is None:
        images = flow_images(grid, noise, cfg.tau, integ, params)
    U = np.zeros(grid.n_nodes) if U0 is None else np.broadcast_to(np.asarray(U0, dtype=np.float64), (grid.n_nodes,)).copy()
    result = SafetyResult(U)
    for k in range(cfg.max_iter):
        new = sculpt_iteration(U, grid, images, cfg.pruning, cfg.threads)
        delta = float(np.max(np.abs(new - U)))
        U = new
        result.U = U
        result.deltas.append(delta)
        log.debug("sculpt iteration %d delta %.3g", k, delta)
        if delta < cfg.tol:
            result.converged = True
            break
    grid.U = result.U
    if not result.converged:
        raise NotConverged(result)
    return result


# ------------------------------------------------------------------ labelling


def interpolate(grid, points, U=None, mode="trilinear"):
    """U at ``points`` (n, 3) inside the region; NaN outside."""
    U = grid.U if U is None else U
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = grid.region.contains(points)
    out = np.full(len(points), np.nan)
    if not inside.any():
        return out, inside
    p = points[inside]
    res = np.array(grid.res)
    f = (p - grid.region.lo) / grid.spacing
    field3 = U.reshape(grid.res)
    if mode == "nearest":
        i = np.clip(np.rint(f), 0, res - 1).astype(np.int64)
        out[inside] = field3[i[:, 0], i[:, 1], i[:, 2]]
        return out, inside
    if mode != "trilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    i0 = np.clip(np.floor(f), 0, res - 2).astype(np.int64)
    t = np.clip(f - i0, 0.0, 1.0)
    val = np.zeros(len(p))
    for cx, cy, cz in itertools.product((0, 1), repeat=3):
        w = (t[:, 0] if cx else 1 - t[:, 0]) * (t[:, 1] if cy else 1 - t[:, 1]) * (t[:, 2] if cz else 1 - t[:, 2])
        val += w * field3[i0[:, 0] + cx, i0[:, 1] + cy, i0[:, 2] + cz]
    out[inside] = val
    return out, inside


@dataclass
class TrajectoryLabels:
    in_region: np.ndarray
    u: np.ndarray

    @property
    def droppable(self):
        return not self.in_region.any()


def label_states(traj, grid, mode="trilinear"):
    states = traj.states if hasattr(traj, "states") else np.asarray(traj)
    u, inside = interpolate(grid, states, mode=mode)
    return TrajectoryLabels(inside, u)


# ---------------------------------------------------------------- persistence


def save_field_csv(path, grid):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nodes = grid.nodes
    idx = np.array(list(itertools.product(*(range(n) for n in grid.res))))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ix", "iy", "iz", "x", "y", "z", "u"])
        for (i, j, k), q, u in zip(idx, nodes, grid.U):
            w.writerow([i, j, k, repr(float(q[0])), repr(float(q[1])), repr(float(q[2])), repr(float(u))])


def load_field_csv(path, region=SafetyRegion()):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    res = tuple(max(int(r[k]) for r in rows) + 1 for k in ("ix", "iy", "iz"))
    grid = build_grid(region, res)
    U = np.empty(grid.n_nodes)
    for r in rows:
        U[grid.node_index(int(r["ix"]), int(r["iy"]), int(r["iz"]))] = float(r["u"])
    grid.U = U
    return grid


def field_bytes(grid):
    head = struct.pack("<3I", *grid.res) + np.asarray(
        [grid.region.x_lo, grid.region.x_hi, grid.region.y_lo, grid.region.y_hi, grid.region.z_lo, grid.region.z_hi],
        dtype="<f8").tobytes()
    return FIELD_MAGIC + head + np.asarray(grid.U, dtype="<f8").tobytes()


def save_field_binary(path, grid):
    Path(path).write_bytes(field_bytes(grid))


def load_field_binary(path):
    raw = Path(path).read_bytes()
    if raw[:8] != FIELD_MAGIC:
        raise ValueError("not a safety field file")
    res = struct.unpack("<3I", raw[8:20])
    b = np.frombuffer(raw[20:68], dtype="<f8")
    grid = build_grid(SafetyRegion(*b), res)
    grid.U = np.frombuffer(raw[68:], dtype="<f8").astype(np.float64)
    return grid


def save_iteration_log(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "sup_delta"])
        for i, d in enumerate(result.deltas, start=1):
            w.writerow([i, repr(float(d))])
