"""Trajectory splits, windowing, normalisation and on-disk persistence."""

from dataclasses import dataclass, field, asdict
import csv
import hashlib
import struct
from pathlib import Path

import numpy as np

from .chaos_sim import DEFAULT_PARAMS, IntegratorConfig, integrate_batch
from .errors import DegenerateAxis, StepSizeUnderflow, WindowTooLong
from .rng import derive_seed, named_rng

SPLITS = ("train", "val", "test")
BINARY_MAGIC = b"LZTRJ1"


@dataclass(frozen=True)
class InitSampler:
    """Uniform box for initial conditions followed by a burn-in onto the attractor."""

    lo: tuple = (-20.0, -25.0, 5.0)
    hi: tuple = (20.0, 25.0, 45.0)
    burn_in: float = 10.0


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 2048
    len_train: int = 256
    n_val: int = 64
    len_val: int = 1024
    n_test: int = 256
    len_test: int = 1024
    dt: float = 0.01
    init_sampler: InitSampler = field(default_factory=InitSampler)
    master_seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "len_train", "n_val", "len_val", "n_test", "len_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def split_shape(self, split):
        return {
            "train": (self.n_train, self.len_train),
            "val": (self.n_val, self.len_val),
            "test": (self.n_test, self.len_test),
        }[split]


@dataclass
class Trajectory:
    states: np.ndarray
    dt: float
    seed: int
    split: str
    traj_id: int = 0

    @property
    def n_steps(self):
        return len(self.states) - 1


@dataclass
class Dataset:
    spec: DatasetSpec
    train: list
    val: list
    test: list

    def split(self, name):
        return getattr(self, name)

    def states(self, name):
        """All trajectories of a split stacked as (n_traj, n_states, 3)."""
        return np.stack([t.states for t in self.split(name)])


def split_seeds(spec, split):
    n, _ = spec.split_shape(split)
    return [derive_seed(spec.master_seed, f"dataset/{split}", i) for i in range(n)]


def initial_state(seed, sampler):
    rng = named_rng(seed, "dataset/init")
    return rng.uniform(sampler.lo, sampler.hi)


def generate_split(spec, split, cfg=None, p=DEFAULT_PARAMS):
    cfg = cfg or IntegratorConfig(dt_sample=spec.dt)
    n, length = spec.split_shape(split)
    seeds = split_seeds(spec, split)
    s0 = np.stack([initial_state(s, spec.init_sampler) for s in seeds])
    n_burn = int(round(spec.init_sampler.burn_in / spec.dt))
    try:
        raw = integrate_batch(s0, n_burn + length, cfg, p, seeds=seeds)
    except StepSizeUnderflow as exc:
        raise StepSizeUnderflow(exc.t, exc.h, exc.seed) from exc
    return [
        Trajectory(states=raw[i, n_burn:].copy(), dt=spec.dt, seed=seeds[i], split=split, traj_id=i)
        for i in range(n)
    ]


def generate_splits(spec, cfg=None, p=DEFAULT_PARAMS):
    """Generate the train/val/test trajectories described by ``spec``."""
    parts = {s: generate_split(spec, s, cfg, p) for s in SPLITS}
    all_seeds = [t.seed for s in SPLITS for t in parts[s]]
    if len(set(all_seeds)) != len(all_seeds):
        raise RuntimeError("derived trajectory seeds collided; choose another master seed")
    return Dataset(spec=spec, **parts)


# --------------------------------------------------------------------------- windows


@dataclass(frozen=True)
class WindowSpec:
    length: int
    stride: int

    def __post_init__(self):
        if self.length < 1 or self.stride < 1:
            raise ValueError("window length and stride must be >= 1")


@dataclass
class Window:
    traj_id: int
    start: int
    inputs: np.ndarray
    targets: np.ndarray


def window_starts(n_steps, w):
    if w.length > n_steps:
        raise WindowTooLong(f"window length {w.length} exceeds trajectory of {n_steps} steps")
    count = (n_steps - w.length) // w.stride + 1
    return np.arange(count) * w.stride


def window(traj, w):
    """Cut a trajectory into (input, target) windows shifted by one step."""
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj)
    tid = traj.traj_id if isinstance(traj, Trajectory) else 0
    out = []
    for s in window_starts(len(states) - 1, w):
        out.append(Window(tid, int(s), states[s : s + w.length], states[s + 1 : s + w.length + 1]))
    return out


def stack_windows(trajs, w):
    """Stack windows of many trajectories into one array.

    Returns ``(blocks, traj_ids, starts)`` where ``blocks`` has shape
    (n_windows, length + 1, 3); inputs are ``blocks[:, :-1]`` and targets are
    ``blocks[:, 1:]``.
    """
    blocks, ids, starts = [], [], []
    for t in trajs:
        for s in window_starts(t.n_steps, w):
            blocks.append(t.states[s : s + w.length + 1])
            ids.append(t.traj_id)
            starts.append(s)
    if not blocks:
        return np.empty((0, w.length + 1, 3)), np.empty(0, dtype=int), np.empty(0, dtype=int)
    return np.stack(blocks), np.array(ids), np.array(starts)


# ------------------------------------------------------------------------ normalizer


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    enabled: bool = True

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.enabled and np.any(self.std <= 0):
            raise DegenerateAxis("normaliser std must be positive")

    def apply(self, s):
        s = np.asarray(s, dtype=np.float64)
        return (s - self.mean) / self.std if self.enabled else s

    def invert(self, s):
        s = np.asarray(s, dtype=np.float64)
        return s * self.std + self.mean if self.enabled else s

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.ones(3), enabled=False)


def fit_normalizer(train, enabled=True):
    if not train:
        raise ValueError("cannot fit a normaliser on an empty split")
    states = np.concatenate([t.states for t in train])
    mean = states.mean(axis=0)
    std = states.std(axis=0)
    if np.any(std < 1e-12):
        raise DegenerateAxis(f"degenerate axis, std={std}")
    return Normalizer(mean, std, enabled)


# ----------------------------------------------------------------------- persistence


def write_split_csv(path, trajs):
    with open(path, "w", newline="") as fh:
        fh.write("traj_id,step,x,y,z\n")
        for t in trajs:
            for k, (x, y, z) in enumerate(t.states.tolist()):
                fh.write(f"{t.traj_id},{k},{x!r},{y!r},{z!r}\n")


def read_split_csv(path, split, dt, seeds=None):
    rows = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(int(rec["traj_id"]), []).append(
                (int(rec["step"]), float(rec["x"]), float(rec["y"]), float(rec["z"]))
            )
    trajs = []
    for tid in sorted(rows):
        recs = sorted(rows[tid])
        states = np.array([r[1:] for r in recs], dtype=np.float64)
        seed = seeds[tid] if seeds is not None else -1
        trajs.append(Trajectory(states=states, dt=dt, seed=seed, split=split, traj_id=tid))
    return trajs


def write_split_binary(path, trajs):
    arr = np.stack([t.states for t in trajs]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_split_binary(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(BINARY_MAGIC))
        if magic != BINARY_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        n, m = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(n, m, 3).astype(np.float64)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _flat_spec(spec):
    d = asdict(spec)
    sampler = d.pop("init_sampler")
    d["init_lo"] = ",".join(repr(float(v)) for v in sampler["lo"])
    d["init_hi"] = ",".join(repr(float(v)) for v in sampler["hi"])
    d["init_burn_in"] = sampler["burn_in"]
    return d


def save_dataset(ds, directory, normalizer=None, binary=True):
    """Write one CSV (plus optional binary cache) per split and a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v}" for k, v in _flat_spec(ds.spec).items()]
    for split in SPLITS:
        trajs = ds.split(split)
        csv_path = directory / f"{split}.csv"
        write_split_csv(csv_path, trajs)
        lines.append(f"seeds.{split}=" + ",".join(str(t.seed) for t in trajs))
        lines.append(f"sha256.{split}.csv={sha256_file(csv_path)}")
        if binary:
            bin_path = directory / f"{split}.bin"
            write_split_binary(bin_path, trajs)
            lines.append(f"sha256.{split}.bin={sha256_file(bin_path)}")
    if normalizer is not None:
        lines.append("normalizer.enabled=" + str(bool(normalizer.enabled)))
        lines.append("normalizer.mean=" + ",".join(repr(float(v)) for v in normalizer.mean))
        lines.append("normalizer.std=" + ",".join(repr(float(v)) for v in normalizer.std))
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


def load_dataset(directory):
    directory = Path(directory)
    man = read_manifest(directory / "manifest.txt")
    sampler = InitSampler(
        lo=tuple(float(v) for v in man["init_lo"].split(",")),
        hi=tuple(float(v) for v in man["init_hi"].split(",")),
        burn_in=float(man["init_burn_in"]),
    )
    spec = DatasetSpec(
        n_train=int(man["n_train"]), len_train=int(man["len_train"]),
        n_val=int(man["n_val"]), len_val=int(man["len_val"]),
        n_test=int(man["n_test"]), len_test=int(man["len_test"]),
        dt=float(man["dt"]), init_sampler=sampler, master_seed=int(man["master_seed"]),
    )
    parts = {}
    for split in SPLITS:
        seeds = [int(s) for s in man[f"seeds.{split}"].split(",")]
        parts[split] = read_split_csv(directory / f"{split}.csv", split, spec.dt, seeds)
    return Dataset(spec=spec, **parts)


def load_normalizer(directory):
    man = read_manifest(Path(directory) / "manifest.txt")
    if "normalizer.mean" not in man:
        return None
    return Normalizer(
        [float(v) for v in man["normalizer.mean"].split(",")],
        [float(v) for v in man["normalizer.std"].split(",")],
        man["normalizer.enabled"] == "True",
    )
