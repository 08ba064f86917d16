"""Stage orchestration over a run directory.

Layout: ``<out>/<name>/{data, checkpoints, safety, results, manifest}``.
Each stage records its configuration, input hashes and output hashes in
``manifest/<stage>.json``; a stage whose configuration and inputs are
unchanged and whose outputs are intact is skipped.
"""

import csv
from dataclasses import replace
import hashlib
import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import load_checkpoint, save_checkpoint, state_hash
from .autodiff.checkpoint import namespaced, strip_namespace
from .config import BACKBONES, DISPLAY_NAMES, VARIANTS, backbone_of
from .dataset import fit_normalizer, generate_splits, load_dataset, load_normalizer, save_dataset, sha256_file
from .errors import MissingPrerequisite
from .evalstats import error_density, pairwise_table, summarize, trajectory_metrics
from .koopman import KoopmanEmbedder, build_autoencoder, train_stage1
from .pca_embed import PiEmbedder, StandardEmbedder, fit_pi_pipeline, fit_standard
from .safety import (
    NoiseModel,
    build_grid,
    compute_safety,
    load_field_binary,
    save_field_binary,
    save_field_csv,
    save_iteration_log,
)
from .transfer import build_head, finetune, labeled_windows, predict_batch
from .transformer import ROLLOUT_WINDOWS, build_transformer, evaluate_rollouts, pretrain

log = logging.getLogger(__name__)

STAGES = ("simulate", "train-ae", "pretrain", "compute-safety", "finetune", "evaluate", "report")


def fmt(x):
    """Canonical text for a float in result files."""
    return repr(float(x))


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _sha(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


class Run:
    def __init__(self, cfg):
        self.cfg = cfg
        self.root = Path(cfg.out_dir) / cfg.name
        for sub in ("data", "checkpoints", "safety", "results", "manifest"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    # ------------------------------------------------------------ paths

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def require(self, *paths):
        for p in paths:
            if not Path(p).exists():
                raise MissingPrerequisite(str(Path(p).relative_to(self.root)))

    # --------------------------------------------------------- manifests

    def _manifest_path(self, stage):
        return self.path("manifest", f"{stage}.json")

    def _hashes(self, paths):
        return {str(Path(p).relative_to(self.root)): sha256_file(p) for p in sorted(map(str, paths))}

    def _up_to_date(self, stage, settings, inputs):
        path = self._manifest_path(stage)
        if not path.exists():
            return False
        man = json.loads(path.read_text())
        if man.get("config_hash") != _sha(settings) or man.get("inputs") != self._hashes(inputs):
            return False
        for rel, digest in man.get("outputs", {}).items():
            p = self.root / rel
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True

    def _record(self, stage, settings, inputs, outputs, seconds):
        man = {
            "stage": stage,
            "config": settings,
            "config_hash": _sha(settings),
            "inputs": self._hashes(inputs),
            "outputs": self._hashes(outputs),
            "seconds": round(seconds, 3),
            "version": __version__,
        }
        path = self._manifest_path(stage)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)

    def _stage(self, stage, settings, inputs, body):
        """Run ``body()`` (returning output paths) unless the stage is up to date."""
        self.require(*inputs)
        if self._up_to_date(stage, settings, inputs):
            log.info("%s: up to date, skipping", stage)
            return False
        t0 = time.perf_counter()
        outputs = body()
        self._record(stage, settings, inputs, outputs, time.perf_counter() - t0)
        return True

    # ------------------------------------------------------------ loaders

    def dataset(self):
        self.require(self.path("data", "manifest.txt"))
        return load_dataset(self.path("data"))

    def normalizer(self):
        return load_normalizer(self.path("data"))

    def embedder(self, backbone):
        if backbone == "koopman":
            path = self.path("checkpoints", "autoencoder.ckpt")
            self.require(path)
            tensors, _ = load_checkpoint(path)
            model = build_autoencoder(self.cfg.stage1, self.cfg.master_seed)
            model.load_state_dict(strip_namespace("KOOPMAN", tensors))
            return KoopmanEmbedder(model, self.normalizer())
        path = self.path("checkpoints", f"embedder_{backbone}.ckpt")
        self.require(path)
        tensors, _ = load_checkpoint(path)
        return PiEmbedder.from_state(tensors) if backbone == "pca-pi" else StandardEmbedder.from_state(tensors)

    def transformer(self, backbone, variant=None):
        own = variant is not None and not self.cfg.finetune[variant].frozen
        path = self.path("checkpoints", f"transformer_{variant if own else backbone}.ckpt")
        self.require(path)
        tensors, _ = load_checkpoint(path)
        model = build_transformer(self.cfg.backbones[backbone].transformer, self.cfg.master_seed)
        model.load_state_dict(strip_namespace("TRANSFORMER", tensors))
        model.eval()
        return model

    def grid(self):
        path = self.path("safety", "u_field.bin")
        self.require(path)
        return load_field_binary(path)


# ---------------------------------------------------------------- stages


def simulate(run):
    cfg = run.cfg
    spec = replace(cfg.dataset, master_seed=cfg.master_seed)
    settings = {"dataset": run.cfg.to_dict()["dataset"], "master_seed": cfg.master_seed, "normalize": cfg.normalize}

    def body():
        ds = generate_splits(spec)
        norm = fit_normalizer(ds.train, enabled=cfg.normalize)
        save_dataset(ds, run.path("data"), norm, binary=True)
        return [run.path("data", f) for f in ("train.csv", "val.csv", "test.csv", "train.bin", "val.bin", "test.bin", "manifest.txt")]

    return run._stage("simulate", settings, [], body)


def train_ae(run):
    cfg = run.cfg
    inputs = [run.path("data", "manifest.txt")]
    settings = {"stage1": cfg.to_dict()["stage1"], "seed": cfg.master_seed}

    def body():
        ds = run.dataset()
        model, curves = train_stage1(ds.train, ds.val, cfg.stage1, run.normalizer(), seed=cfg.master_seed)
        ckpt = run.path("checkpoints", "autoencoder.ckpt")
        save_checkpoint(ckpt, namespaced("KOOPMAN", model.state_dict()), {"kind": "koopman-autoencoder"})
        out = run.path("results", "curves_stage1.csv")
        write_csv(out, ["epoch", "train_loss", "val_loss", "lr"],
                  [[c["epoch"], fmt(c["train_loss"]), fmt(c["val_loss"]), fmt(c["lr"])] for c in curves])
        return [ckpt, out]

    return run._stage("train-ae", settings, inputs, body)


def _fit_embedder(run, backbone, ds):
    emb = fit_pi_pipeline(ds.train) if backbone == "pca-pi" else fit_standard(ds.train)
    path = run.path("checkpoints", f"embedder_{backbone}.ckpt")
    save_checkpoint(path, emb.state_dict(), {"kind": f"embedder-{backbone}"})
    return emb, path


def pretrain_backbone(run, backbone):
    cfg = run.cfg
    bcfg = cfg.backbones[backbone]
    inputs = [run.path("data", "manifest.txt")]
    if backbone == "koopman":
        inputs.append(run.path("checkpoints", "autoencoder.ckpt"))
    settings = {"backbone": backbone, "config": cfg.to_dict()["backbones"][backbone], "seed": cfg.master_seed}

    def body():
        ds = run.dataset()
        outputs = []
        if backbone == "koopman":
            emb = run.embedder("koopman")
        else:
            emb, path = _fit_embedder(run, backbone, ds)
            outputs.append(path)
        model = build_transformer(bcfg.transformer, cfg.master_seed)
        model, curves = pretrain(model, emb, ds.train, ds.val, bcfg.stage2, seed=cfg.master_seed)
        ckpt = run.path("checkpoints", f"transformer_{backbone}.ckpt")
        save_checkpoint(ckpt, namespaced("TRANSFORMER", model.state_dict()), {"backbone": backbone})
        out = run.path("results", f"curves_stage2_{backbone}.csv")
        write_csv(out, ["epoch", "train_loss", "val_loss", "val_rollout_mse"],
                  [[c["epoch"], fmt(c["train_loss"]), fmt(c["val_loss"]), fmt(c.get("val_rollout_mse", float("nan")))]
                   for c in curves])
        return outputs + [ckpt, out]

    return run._stage(f"pretrain-{backbone}", settings, inputs, body)


def compute_safety_stage(run):
    cfg = run.cfg
    settings = {"safety": cfg.to_dict()["safety"], "threads": cfg.threads}

    def body():
        grid = build_grid(res=cfg.safety.res)
        sculpt = replace(cfg.safety.sculpt, threads=cfg.threads)
        result = compute_safety(grid, NoiseModel(tuple(cfg.safety.noise_bound)), sculpt)
        paths = [run.path("safety", "u_field.csv"), run.path("safety", "u_field.bin"), run.path("safety", "iterations.csv")]
        save_field_csv(paths[0], grid)
        save_field_binary(paths[1], grid)
        save_iteration_log(paths[2], result)
        return paths

    return run._stage("compute-safety", settings, [], body)


def _variant_inputs(run, variant):
    backbone = backbone_of(variant)
    inputs = [run.path("data", "manifest.txt"), run.path("safety", "u_field.bin"),
              run.path("checkpoints", f"transformer_{backbone}.ckpt")]
    inputs.append(run.path("checkpoints", "autoencoder.ckpt") if backbone == "koopman"
                  else run.path("checkpoints", f"embedder_{backbone}.ckpt"))
    return inputs


def _transformer_state(model):
    return namespaced("TRANSFORMER", model.state_dict())


def _embedder_hash(emb):
    return state_hash(emb.model.state_dict() if hasattr(emb, "model") else emb.state_dict())


def finetune_variant(run, variant):
    cfg = run.cfg
    scfg = cfg.finetune[variant]
    backbone = backbone_of(variant)
    settings = {"variant": variant, "config": cfg.to_dict()["finetune"][variant],
                "label_mode": cfg.safety.label_mode, "seed": cfg.master_seed}
    inputs = _variant_inputs(run, variant)

    def body():
        ds = run.dataset()
        grid = run.grid()
        emb = run.embedder(backbone)
        model = run.transformer(backbone)
        train = labeled_windows(ds.train, grid, scfg.context, scfg.stride, cfg.safety.label_mode)
        val = labeled_windows(ds.val, grid, scfg.context, scfg.val_stride, cfg.safety.label_mode)
        head = build_head(model.cfg.embed_dim, scfg, cfg.master_seed)
        before = {"backbone": state_hash(model.state_dict()), "embedder": _embedder_hash(emb)}
        head, curves = finetune(model, emb, head, train, val, scfg, seed=cfg.master_seed)
        after = {"backbone": state_hash(model.state_dict()), "embedder": _embedder_hash(emb)}
        outputs = [run.path("checkpoints", f"head_{variant}.ckpt")]
        save_checkpoint(outputs[0], namespaced("HEAD", head.state_dict()),
                        {"variant": variant, "hashes_before": before, "hashes_after": after})
        if not scfg.frozen:
            outputs.append(run.path("checkpoints", f"transformer_{variant}.ckpt"))
            save_checkpoint(outputs[-1], _transformer_state(model), {"backbone": backbone, "variant": variant})
        out = run.path("results", f"curves_stage3_{variant}.csv")
        write_csv(out, ["epoch", "train_loss", "val_loss"],
                  [[c["epoch"], fmt(c["train_loss"]), fmt(c["val_loss"])] for c in curves])
        return outputs + [out]

    return run._stage(f"finetune-{variant}", settings, inputs, body)


def _load_head(run, variant, embed_dim):
    path = run.path("checkpoints", f"head_{variant}.ckpt")
    run.require(path)
    tensors, _ = load_checkpoint(path)
    head = build_head(embed_dim, run.cfg.finetune[variant], run.cfg.master_seed)
    head.load_state_dict(strip_namespace("HEAD", tensors))
    return head


def evaluate(run, variants=VARIANTS):
    """Per-trajectory test metrics for each variant and rollout windows per backbone."""
    cfg = run.cfg
    settings = {"variants": list(variants), "evaluation": cfg.to_dict()["evaluation"],
                "label_mode": cfg.safety.label_mode, "finetune": {v: cfg.to_dict()["finetune"][v] for v in variants}}
    inputs = sorted({p for v in variants for p in _variant_inputs(run, v)}, key=str)
    inputs += [run.path("checkpoints", f"head_{v}.ckpt") for v in variants]
    inputs += [run.path("checkpoints", "transformer_koopman-unfrozen.ckpt") for v in variants if v == "koopman-unfrozen"]

    def body():
        ds = run.dataset()
        grid = run.grid()
        outputs = []
        for variant in variants:
            backbone = backbone_of(variant)
            scfg = cfg.finetune[variant]
            emb = run.embedder(backbone)
            model = run.transformer(backbone, variant)
            head = _load_head(run, variant, model.cfg.embed_dim)
            test = labeled_windows(ds.test, grid, scfg.context, scfg.val_stride, cfg.safety.label_mode)
            pred = predict_batch(model, emb, head, test.context, test.query)
            rows = [[int(i), int(s), fmt(q[0]), fmt(q[1]), fmt(q[2]), fmt(t), fmt(p)]
                    for i, s, q, t, p in zip(test.traj_ids, test.starts, test.query, test.target, pred)]
            out = run.path("results", f"predictions_{variant}.csv")
            write_csv(out, ["traj_id", "start", "x", "y", "z", "u_true", "u_pred"], rows)
            outputs.append(out)
        for backbone in BACKBONES:
            if not any(backbone_of(v) == backbone for v in variants):
                continue
            emb = run.embedder(backbone)
            model = run.transformer(backbone)
            windows = evaluate_rollouts(model, emb, ds.test, cfg.evaluation.rollout_steps)
            rows = [[t.traj_id, w, fmt(windows[i, w])] for i, t in enumerate(ds.test) for w in range(windows.shape[1])]
            out = run.path("results", f"rollout_{backbone}.csv")
            write_csv(out, ["traj_id", "window", "state_mse"], rows)
            outputs.append(out)
        return outputs

    return run._stage("evaluate", settings, inputs, body)


def load_predictions(run, variant):
    rows = read_csv(run.path("results", f"predictions_{variant}.csv"))
    ids = np.array([int(r["traj_id"]) for r in rows], dtype=np.int64)
    states = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]).reshape(-1, 3)
    y = np.array([float(r["u_true"]) for r in rows])
    yhat = np.array([float(r["u_pred"]) for r in rows])
    return ids, states, y, yhat


def per_trajectory(ids, y, yhat):
    return [trajectory_metrics(t, y[ids == t], yhat[ids == t]) for t in np.unique(ids)]


def report(run, variants=VARIANTS):
    """Summary, pairwise, rollout and density tables under ``results/report``."""
    cfg = run.cfg
    inputs = [run.path("results", f"predictions_{v}.csv") for v in variants]
    backbones = [b for b in BACKBONES if any(backbone_of(v) == b for v in variants)]
    inputs += [run.path("results", f"rollout_{b}.csv") for b in backbones]
    settings = {"variants": list(variants), "evaluation": cfg.to_dict()["evaluation"]}
    rep = run.path("results", "report")

    def body():
        outputs = []
        per_model = {}
        summary_rows, metric_rows = [], []
        for v in variants:
            ids, states, y, yhat = load_predictions(run, v)
            metrics = per_trajectory(ids, y, yhat)
            per_model[DISPLAY_NAMES[v]] = metrics
            s = summarize(metrics)
            summary_rows.append([DISPLAY_NAMES[v], s["n"],
                                 fmt(s["mse"][0] * 1e4), fmt(s["mse"][1] * 1e4),
                                 fmt(s["mae"][0] * 1e2), fmt(s["mae"][1] * 1e2),
                                 fmt(s["r2"][0]), fmt(s["r2"][1])])
            metric_rows += [[DISPLAY_NAMES[v], m.traj_id, m.n_points, fmt(m.mse), fmt(m.mae), fmt(m.r2)] for m in metrics]
            dmap = error_density(states, y, yhat, bins=cfg.evaluation.density_bins)
            tag = v
            grid_rows = [[i, k, fmt(dmap.grid[i][k])] for i in range(len(dmap.grid)) for k in range(len(dmap.grid[i]))
                         if dmap.grid[i][k] != 0]
            write_csv(rep / f"density_{tag}.csv", ["x_bin", "z_bin", "error"], grid_rows)
            marg = [["x", i, fmt(dmap.x_edges[i]), fmt(dmap.x_edges[i + 1]), fmt(val)] for i, val in enumerate(dmap.x_marginal)]
            marg += [["z", k, fmt(dmap.z_edges[k]), fmt(dmap.z_edges[k + 1]), fmt(val)] for k, val in enumerate(dmap.z_marginal)]
            write_csv(rep / f"density_marginals_{tag}.csv", ["axis", "bin", "lo", "hi", "error"], marg)
            quad = [[q["quadrant"], int(q["present"]), q["count"],
                     *(fmt(c) for c in (q["centroid"] or (float("nan"),) * 2)),
                     *(fmt(c) for c in (q["mean_velocity"] or (float("nan"),) * 2))] for q in dmap.quadrants]
            write_csv(rep / f"quadrants_{tag}.csv", ["quadrant", "present", "count", "x", "z", "vx", "vz"], quad)
            outputs += [rep / f"density_{tag}.csv", rep / f"density_marginals_{tag}.csv", rep / f"quadrants_{tag}.csv"]
        write_csv(rep / "summary.csv",
                  ["model", "n_trajectories", "mse_e4_mean", "mse_e4_std", "mae_e2_mean", "mae_e2_std", "r2_mean", "r2_std"],
                  summary_rows)
        write_csv(rep / "metrics.csv", ["model", "traj_id", "n_points", "mse", "mae", "r2"], metric_rows)
        outputs += [rep / "summary.csv", rep / "metrics.csv"]
        if len(variants) >= 2:
            table = pairwise_table(per_model, alpha=cfg.evaluation.alpha, models=[DISPLAY_NAMES[v] for v in variants])
            write_csv(rep / "pairwise.csv", ["model_a", "model_b", "metric", "p_value", "alpha", "significant", "winner"],
                      [[r["model_a"], r["model_b"], r["metric"], fmt(r["p_value"]), fmt(r["alpha"]),
                        int(r["significant"]), r["winner"]] for r in table])
            outputs.append(rep / "pairwise.csv")
        rollout_rows = []
        for b in backbones:
            rows = read_csv(run.path("results", f"rollout_{b}.csv"))
            by_window = {}
            for r in rows:
                by_window.setdefault(int(r["window"]), []).append(float(r["state_mse"]))
            label = {"koopman": "Koopman", "pca-pi": "PCA (PI)", "pca": "PCA"}[b]
            rollout_rows.append([label] + [fmt(np.mean(by_window[w])) for w in sorted(by_window)])
        write_csv(rep / "rollout.csv", ["model"] + [f"steps_{a}_{b}" for a, b in ROLLOUT_WINDOWS], rollout_rows)
        outputs.append(rep / "rollout.csv")
        return outputs

    return run._stage("report", settings, inputs, body)


def run_all(cfg, variants=VARIANTS):
    run = Run(cfg)
    simulate(run)
    train_ae(run)
    for b in BACKBONES:
        if any(backbone_of(v) == b for v in variants):
            pretrain_backbone(run, b)
    compute_safety_stage(run)
    for v in variants:
        finetune_variant(run, v)
    evaluate(run, variants)
    report(run, variants)
    return run
