"""Run configuration: presets, JSON round trip and validation."""

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
import json

from .dataset import DatasetSpec, InitSampler
from .errors import ConfigInvalid
from .koopman import Stage1Config
from .safety import SculptConfig
from .transfer import Stage3Config
from .transformer import Stage2Config, TransformerConfig

VARIANTS = ("koopman-frozen", "koopman-unfrozen", "pca-pi", "pca")
BACKBONES = ("koopman", "pca-pi", "pca")
DISPLAY_NAMES = {
    "koopman-frozen": "Koopman (F)",
    "koopman-unfrozen": "Koopman (U)",
    "pca-pi": "PCA (PI)",
    "pca": "PCA",
}


def backbone_of(variant):
    return "koopman" if variant.startswith("koopman") else variant


@dataclass(frozen=True)
class BackboneConfig:
    transformer: TransformerConfig
    stage2: Stage2Config


@dataclass(frozen=True)
class SafetyConfig:
    res: tuple = (30, 30, 30)
    sculpt: SculptConfig = SculptConfig()
    noise_bound: tuple = (0.0, 0.0, 0.0)
    label_mode: str = "trilinear"


@dataclass(frozen=True)
class EvalConfig:
    alpha: float = 0.05
    density_bins: int = 100
    rollout_steps: int = 256


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    preset: str = "paper"
    master_seed: int = 0
    out_dir: str = "runs"
    threads: int = 1
    normalize: bool = True
    dataset: DatasetSpec = DatasetSpec()
    stage1: Stage1Config = Stage1Config()
    backbones: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    safety: SafetyConfig = SafetyConfig()
    evaluation: EvalConfig = EvalConfig()

    def to_dict(self):
        return _plain(asdict(self))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def paper_config():
    backbones = {
        "koopman": BackboneConfig(TransformerConfig(32, 4, 4), Stage2Config(lr=1e-4, epochs=200, batch=16, weight_decay=1e-10)),
        "pca-pi": BackboneConfig(TransformerConfig(9, 11, 9), Stage2Config(lr=2.15e-3, epochs=300, batch=16, weight_decay=1e-10)),
        "pca": BackboneConfig(TransformerConfig(3, 3, 3), Stage2Config(lr=1e-3, epochs=5, batch=16, weight_decay=0.0)),
    }
    finetune = {
        "koopman-frozen": Stage3Config(lr=6.83e-3, epochs=80, batch=16, optimizer="adam", weight_decay=0.0, frozen=True, h1=128, h2=64),
        "koopman-unfrozen": Stage3Config(lr=1.04e-3, epochs=50, batch=16, optimizer="adamw", weight_decay=0.01, frozen=False, h1=112, h2=64),
        "pca-pi": Stage3Config(lr=7.52e-3, epochs=90, batch=512, optimizer="adamw", weight_decay=1e-10, frozen=True, h1=112, h2=64),
        "pca": Stage3Config(lr=6.89e-3, epochs=90, batch=512, optimizer="adam", weight_decay=0.0, frozen=True, h1=32, h2=32),
    }
    return RunConfig(name="paper", preset="paper", backbones=backbones, finetune=finetune)


def desk_batch(batch):
    # the desk training split is 1/16 of the full one
    return batch if batch <= 16 else max(16, batch // 16)


DESK_STAGE2_EPOCHS = {"koopman": 20, "pca-pi": 12, "pca": 1}
DESK_STAGE3_EPOCHS = {"koopman-frozen": 16, "koopman-unfrozen": 10, "pca-pi": 18, "pca": 18}


def desk_config():
    paper = paper_config()
    backbones = {
        k: replace(b, stage2=replace(b.stage2, epochs=DESK_STAGE2_EPOCHS[k]))
        for k, b in paper.backbones.items()
    }
    finetune = {
        k: replace(c, epochs=DESK_STAGE3_EPOCHS[k], batch=desk_batch(c.batch))
        for k, c in paper.finetune.items()
    }
    return replace(
        paper,
        name="desk",
        preset="desk",
        dataset=DatasetSpec(n_train=128, n_val=16, n_test=32),
        stage1=replace(paper.stage1, epochs=15, batch=desk_batch(paper.stage1.batch)),
        backbones=backbones,
        finetune=finetune,
        safety=replace(paper.safety, res=(12, 12, 12)),
    )


PRESETS = {"paper": paper_config, "desk": desk_config}


def preset_config(name):
    if name not in PRESETS:
        raise ConfigInvalid("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


# ------------------------------------------------------------------ parsing


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigInvalid(path, f"expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigInvalid(f"{path}.{unknown[0]}", "unknown field")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        kwargs[name] = _coerce(getattr(defaults, name), value, f"{path}.{name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(path, str(exc)) from None


def _coerce(default, value, path):
    if is_dataclass(default):
        return _build(type(default), value, path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigInvalid(path, "expected true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(path, "expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(path, "expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigInvalid(path, "expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigInvalid(path, f"expected a list of {len(default)} values")
        return tuple(_coerce(d, v, f"{path}[{i}]") for i, (d, v) in enumerate(zip(default, value)))
    return value


def config_from_dict(data, base=None):
    """Overlay ``data`` (parsed JSON) on ``base`` (default: the preset it names)."""
    if not isinstance(data, dict):
        raise ConfigInvalid("<root>", "configuration must be a JSON object")
    base = base or preset_config(data.get("preset", "paper"))
    merged = base.to_dict()
    _merge(merged, data, "<root>")
    return _from_plain(merged)


def _merge(into, data, path):
    for key, value in data.items():
        if key not in into:
            raise ConfigInvalid(f"{path}.{key}", "unknown field")
        if isinstance(value, dict) and isinstance(into[key], dict):
            _merge(into[key], value, f"{path}.{key}")
        else:
            into[key] = value


def _from_plain(d):
    top = {k: v for k, v in d.items() if k not in ("dataset", "stage1", "backbones", "finetune", "safety", "evaluation")}
    base = _build(RunConfig, top, "<root>")
    dataset = _build(DatasetSpec, d["dataset"], "dataset")
    backbones = {}
    for name, b in d["backbones"].items():
        if name not in BACKBONES:
            raise ConfigInvalid(f"backbones.{name}", "unknown backbone")
        backbones[name] = BackboneConfig(
            _build(TransformerConfig, b["transformer"], f"backbones.{name}.transformer"),
            _build(Stage2Config, b["stage2"], f"backbones.{name}.stage2"),
        )
    finetune = {}
    for name, c in d["finetune"].items():
        if name not in VARIANTS:
            raise ConfigInvalid(f"finetune.{name}", "unknown variant")
        finetune[name] = _build(Stage3Config, c, f"finetune.{name}")
        if finetune[name].optimizer not in ("adam", "adamw"):
            raise ConfigInvalid(f"finetune.{name}.optimizer", "must be adam or adamw")
    safety = _build(SafetyConfig, d["safety"], "safety")
    if safety.label_mode not in ("trilinear", "nearest"):
        raise ConfigInvalid("safety.label_mode", "must be trilinear or nearest")
    cfg = replace(
        base,
        dataset=dataset,
        stage1=_build(Stage1Config, d["stage1"], "stage1"),
        backbones=backbones,
        finetune=finetune,
        safety=safety,
        evaluation=_build(EvalConfig, d["evaluation"], "evaluation"),
    )
    if cfg.preset not in PRESETS:
        raise ConfigInvalid("preset", f"unknown preset {cfg.preset!r}")
    if cfg.threads < 1:
        raise ConfigInvalid("threads", "must be at least 1")
    return cfg


def load_config(path, base=None):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigInvalid("--config", f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigInvalid("--config", f"invalid JSON: {exc}") from None
    return config_from_dict(data, base)


__all__ = [
    "BACKBONES", "DISPLAY_NAMES", "VARIANTS", "BackboneConfig", "EvalConfig", "InitSampler", "RunConfig",
    "SafetyConfig", "backbone_of", "config_from_dict", "desk_config", "load_config", "paper_config",
    "preset_config",
]
