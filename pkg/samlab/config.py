import hashlib
import logging
import math
import os
import sys
from dataclasses import dataclass, fields, replace

from dotenv import dotenv_values, load_dotenv
from dotenv.variables import parse_variables

from samlab.errors import ArgumentError, ConfigError
from samlab.utils.sam_utils import SamConfig, norm_name, parse_norm
from samlab.utils.shift_utils import default_alphas, default_fractions

PRESET_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "presets")


@dataclass(frozen=True)
class LabSettings:
    output_dir: str = "runs"
    log_level: str = "INFO"
    jobs: int = 1
    data_dir: str = "data"
    debug: bool = False


def load_configurations():
    load_dotenv()
    try:
        jobs = int(os.getenv("SAMLAB_JOBS", "1"))
    except ValueError as e:
        raise ConfigError(f"expected an integer, got {os.getenv('SAMLAB_JOBS')!r}", key="SAMLAB_JOBS") from e
    return LabSettings(
        output_dir=os.getenv("SAMLAB_OUTPUT_DIR", "runs"),
        log_level=os.getenv("SAMLAB_LOG_LEVEL", "INFO"),
        jobs=max(1, jobs),
        data_dir=os.getenv("SAMLAB_DATA_DIR", "data"),
        debug=os.getenv("SAMLAB_DEBUG", "").strip().lower() in ("1", "true", "yes", "on"),
    )


def configure_logging(level="INFO"):
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stdout,
    )


# --------------------------------------------------------------
# Value parsers
# --------------------------------------------------------------

def _float(text):
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"expected a finite number, got {text!r}")
    return value


def _int(text):
    return int(text)


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _str(text):
    return text


def _optional_float(text):
    if text.strip().lower() in ("", "none"):
        return None
    return _float(text)


def _optional_int(text):
    if text.strip().lower() in ("", "none"):
        return None
    return _int(text)


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _int_list(text):
    return tuple(int(item) for item in text.split(",") if item.strip())


def _float_list(text):
    """Comma separated numbers, or `low..high:count` for an evenly spaced grid."""
    if ".." in text:
        bounds, _, count = text.partition(":")
        low, _, high = bounds.partition("..")
        count = int(count)
        if count < 2:
            raise ValueError(f"a grid needs at least two points, got {count}")
        values = [round(v, 12) for v in
                  (_float(low) + (_float(high) - _float(low)) * i / (count - 1) for i in range(count))]
        return tuple(values)
    return tuple(_float(item) for item in text.split(",") if item.strip())


def _norm(text):
    try:
        return parse_norm(text)
    except (ArgumentError, ValueError) as e:
        raise ValueError(str(e)) from e


SCHEMA = {
    "model.kind": (_choice("mlp", "rnn"), "mlp"),
    "model.sizes": (_int_list, (20, 64, 64, 2)),
    "model.activation": (_choice("relu", "sigmoid", "tanh"), "relu"),
    "model.seed": (_int, 0),
    "model.embed": (_int, 32),
    "model.hidden": (_int, 64),
    "model.tied": (_bool, False),
    "data.source": (_choice("gaussian", "mnist", "char", "quadratic"), "gaussian"),
    "data.path": (_str, ""),
    "data.seed": (_int, 0),
    "data.limit": (_int, 0),
    "data.classes": (_int, 2),
    "data.dim": (_int, 20),
    "data.per_class": (_int, 200),
    "data.separation": (_float, 3.0),
    "data.shift": (_float, 0.5),
    "data.window": (_int, 32),
    "data.test_fraction": (_float, 0.1),
    "data.mix": (_float, 0.0),
    "data.intensity_bias": (_float, 0.1),
    "data.label_noise": (_float, 0.1),
    "data.instances": (_int, 8),
    "data.shared_hessian": (_bool, True),
    "data.shift_scale": (_float, 0.05),
    "optimizer.name": (_choice("sgd", "adam"), "sgd"),
    "optimizer.lr": (_float, 0.1),
    "optimizer.clip": (_float, 0.0),
    "optimizer.epochs": (_int, 10),
    "optimizer.batch_size": (_int, 32),
    "optimizer.lr_decay": (_float, 1.0),
    "optimizer.decay_every": (_int, 0),
    "sam.K": (_int, 0),
    "sam.epsilon": (_float, 0.0),
    "sam.p": (_norm, 2.0),
    "sam.eta": (_optional_float, None),
    "sam.implementation": (_choice("MULTI_STEP", "SINGLE_STEP"), "MULTI_STEP"),
    "sam.rule": (_choice("FIXED_ONE", "GA_SAM", "ASAM_W", "LAYER_WG", "INV_G", "W_OVER_SQRT_N", "W_NORM"),
                 "FIXED_ONE"),
    "sam.granularity": (_choice("model", "layer", "element"), "layer"),
    "sam.start_epoch": (_int, 0),
    "sam.tau": (_float, 1e-12),
    "output.directory": (_str, ""),
    "output.run_id": (_str, "run"),
    "trial.etas": (_float_list, tuple(default_fractions(100).tolist())),
    "trial.alphas": (_float_list, tuple(default_alphas().tolist())),
    "trial.finetune_epochs": (_int, 3),
    "trial.finetune_lr": (_float, 0.05),
    "trial.finetune_tol": (_float, 1e-4),
    "trial.patience": (_int, 2),
    "trial.base_epochs": (_optional_int, None),
    "eval.p": (_norm, 2.0),
    "eval.epsilons": (_float_list, (0.05, 0.1, 0.2)),
    "eval.steps": (_int, 10),
    "eval.k": (_int, 50),
    "eval.samples": (_int, 512),
    "eval.split": (_choice("train", "test"), "train"),
    "eval.seeds": (_int, 5),
}


@dataclass(frozen=True)
class ModelSection:
    kind: str
    sizes: tuple
    activation: str
    seed: int
    embed: int
    hidden: int
    tied: bool


@dataclass(frozen=True)
class DataSection:
    source: str
    path: str
    seed: int
    limit: int
    classes: int
    dim: int
    per_class: int
    separation: float
    shift: float
    window: int
    test_fraction: float
    mix: float
    intensity_bias: float
    label_noise: float
    instances: int
    shared_hessian: bool
    shift_scale: float


@dataclass(frozen=True)
class OptimizerSection:
    name: str
    lr: float
    clip: float
    epochs: int
    batch_size: int
    lr_decay: float
    decay_every: int


@dataclass(frozen=True)
class OutputSection:
    directory: str
    run_id: str


@dataclass(frozen=True)
class TrialSection:
    etas: tuple
    alphas: tuple
    finetune_epochs: int
    finetune_lr: float
    finetune_tol: float
    patience: int
    base_epochs: int


@dataclass(frozen=True)
class EvalSection:
    p: float
    epsilons: tuple
    steps: int
    k: int
    samples: int
    split: str
    seeds: int


SECTIONS = {
    "model": ModelSection,
    "data": DataSection,
    "optimizer": OptimizerSection,
    "sam": SamConfig,
    "output": OutputSection,
    "trial": TrialSection,
    "eval": EvalSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection
    data: DataSection
    optimizer: OptimizerSection
    sam: SamConfig
    output: OutputSection
    trial: TrialSection
    eval: EvalSection
    path: str = ""

    def values(self):
        flat = {}
        for section in SECTIONS:
            block = getattr(self, section)
            for f in fields(block):
                flat[f"{section}.{f.name}"] = getattr(block, f.name)
        return flat

    def with_overrides(self, seed=None, directory=None, run_id=None):
        model, output = self.model, self.output
        if seed is not None:
            model = replace(model, seed=seed)
        if directory:
            output = replace(output, directory=directory)
        if run_id:
            output = replace(output, run_id=run_id)
        return replace(self, model=model, output=output)


def _render(value):
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return norm_name(value) if math.isinf(value) else repr(value)
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    return "" if value is None else str(value)


def config_digest(cfg):
    """SHA-256 over the canonical key=value rendering of every setting."""
    canonical = "\n".join(f"{key}={_render(value)}" for key, value in sorted(cfg.values().items()))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def parse_values(raw):
    parsed = {key: default for key, (_, default) in SCHEMA.items()}
    for key, text in raw.items():
        if key not in SCHEMA:
            raise ConfigError("unknown key", key=key)
        if text is None:
            raise ConfigError("missing value", key=key)
        parser, _ = SCHEMA[key]
        try:
            parsed[key] = parser(text.strip())
        except (ValueError, TypeError, ZeroDivisionError) as e:
            raise ConfigError(f"cannot parse {text!r}: {e}", key=key) from e
    return parsed


def build_config(parsed, path=""):
    blocks = {}
    for section, cls in SECTIONS.items():
        kwargs = {key.split(".", 1)[1]: value for key, value in parsed.items() if key.split(".", 1)[0] == section}
        try:
            blocks[section] = cls(**kwargs)
        except ArgumentError as e:
            raise ConfigError(str(e), key=section) from e
    return ExperimentConfig(path=path, **blocks)


def resolve_config_path(name):
    if os.path.exists(name):
        return name
    preset = os.path.join(PRESET_DIR, name if name.endswith(".cfg") else f"{name}.cfg")
    if os.path.exists(preset):
        return preset
    raise ConfigError(f"no config file or preset named {name!r}", key="--config")


def interpolation_env(settings=None):
    """The environment, with the lab settings standing in for unset SAMLAB_* variables."""
    settings = settings or LabSettings()
    env = {
        "SAMLAB_DATA_DIR": settings.data_dir,
        "SAMLAB_OUTPUT_DIR": settings.output_dir,
        "SAMLAB_LOG_LEVEL": settings.log_level,
        "SAMLAB_JOBS": str(settings.jobs),
    }
    env.update(os.environ)
    return env


def _interpolate(raw, env):
    return {key: None if text is None else "".join(atom.resolve(env) for atom in parse_variables(text))
            for key, text in raw.items()}


def load_experiment_config(name=None, settings=None):
    """
    Parse a `section.key=value` file with python-dotenv; `${VAR}` is
    interpolated from the environment, falling back to `settings` (or the
    LabSettings defaults) for the SAMLAB_* variables. Returns the defaults
    when `name` is None.
    """
    if name is None:
        return build_config(parse_values({}))
    path = resolve_config_path(name)
    raw = _interpolate(dotenv_values(path, interpolate=False), interpolation_env(settings))
    cfg = build_config(parse_values(raw), path)
    logging.info(f"Loaded experiment config {path} ({len(raw)} keys)")
    return cfg
