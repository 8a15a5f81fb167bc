"""Run configuration: a flat key=value file mapping onto the nested configs.

The file format is one `key = value` per line, # comments, dotted keys for
the nested model/loss sections. Precedence when loading: file values, then
--set overrides, then the MPHM_SEED environment variable for the seed.
"""

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .backbone import ModelConfig
from .errors import ConfigError
from .hmm import HmmConfig
from .losses import LossConfig
from .pfi import PfiConfig

SEED_ENV_VAR = "MPHM_SEED"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr_initial: float = 1e-3
    lr_final: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    steps: int = 500
    batch: int = 4
    crop: int = 256
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 100
    log_every: int = 10
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.lr_final > self.lr_initial:
            raise ConfigError(
                f"lr_final ({self.lr_final}) must not exceed lr_initial ({self.lr_initial})"
            )
        if self.lr_initial <= 0:
            raise ConfigError(f"lr_initial must be > 0, got {self.lr_initial}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.crop < 1:
            raise ConfigError(f"crop must be >= 1, got {self.crop}")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"cannot parse '{raw}' as a boolean for {key}")


def _parse_int_tuple(raw: str, key: str) -> Tuple[int, ...]:
    try:
        return tuple(int(v.strip()) for v in raw.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(f"cannot parse '{raw}' as integers for {key}") from e


def _typed(parser):
    def wrap(raw: str, key: str):
        try:
            return parser(raw)
        except ValueError as e:
            raise ConfigError(f"cannot parse '{raw}' for {key}") from e

    return wrap


_INT = _typed(int)
_FLOAT = _typed(float)
_STR = lambda raw, key: raw


def _opt(parser):
    def wrap(raw: str, key: str):
        if raw.lower() in ("none", "auto", ""):
            return None
        return parser(raw, key)

    return wrap


# key -> (section, field, parser); sections group the flat keys back into configs
_SCHEMA = {
    "seed": ("run", "seed", _INT),
    "steps": ("run", "steps", _INT),
    "batch": ("run", "batch", _INT),
    "crop": ("run", "crop", _INT),
    "augment": ("run", "augment", _parse_bool),
    "lr_initial": ("run", "lr_initial", _FLOAT),
    "lr_final": ("run", "lr_final", _FLOAT),
    "beta1": ("run", "beta1", _FLOAT),
    "beta2": ("run", "beta2", _FLOAT),
    "grad_clip": ("run", "grad_clip", _FLOAT),
    "checkpoint_every": ("run", "checkpoint_every", _INT),
    "log_every": ("run", "log_every", _INT),
    "data_dir": ("run", "data_dir", _STR),
    "out_dir": ("run", "out_dir", _STR),
    "loss.lambda_fcr": ("loss", "lambda_fcr", _FLOAT),
    "loss.n_negatives": ("loss", "n_negatives", _INT),
    "loss.epsilon": ("loss", "epsilon", _FLOAT),
    "model.base_channels": ("model", "base_channels", _INT),
    "model.stage_depths": ("model", "stage_depths", _parse_int_tuple),
    "model.channel_plan": ("model", "channel_plan", _opt(_parse_int_tuple)),
    "model.stage_heads": ("model", "stage_heads", _opt(_parse_int_tuple)),
    "model.prior_provider": ("model", "prior_provider", _STR),
    "model.prior_seed": ("model", "prior_seed", _INT),
    "model.prior_file": ("model", "prior_file", _opt(_STR)),
    "model.prompt": ("model", "prompt", _STR),
    "model.hmm.dw_kernel": ("hmm", "dw_kernel", _INT),
    "model.hmm.ffcm_enabled": ("hmm", "ffcm_enabled", _parse_bool),
    "model.hmm.dw_enabled": ("hmm", "dw_enabled", _parse_bool),
    "model.hmm.vssm_enabled": ("hmm", "vssm_enabled", _parse_bool),
    "model.hmm.fusion_scheme": ("hmm", "fusion_scheme", _STR),
    "model.hmm.d_state": ("hmm", "d_state", _INT),
    "model.hmm.vssm_expand": ("hmm", "vssm_expand", _INT),
    "model.hmm.ffcm_hidden_factor": ("hmm", "ffcm_hidden_factor", _FLOAT),
    "model.hmm.attn_heads": ("hmm", "attn_heads", _INT),
    "model.pfi.inject_visual": ("pfi", "inject_visual", _parse_bool),
    "model.pfi.inject_text": ("pfi", "inject_text", _parse_bool),
    "model.pfi.fusion_scheme": ("pfi", "fusion_scheme", _STR),
    "model.pfi.text_as_queries": ("pfi", "text_as_queries", _parse_bool),
    "model.pfi.gdfn_expansion": ("pfi", "gdfn_expansion", _FLOAT),
    "model.pfi.attn_max_tokens": ("pfi", "attn_max_tokens", _INT),
}


def run_config_to_text(cfg: RunConfig) -> str:
    """Emit every schema key with its current value.

    Derived fields go out as "auto" so a later base_channels override
    re-derives them instead of hitting a frozen copy of today's result.
    """
    m, h, p, l = cfg.model, cfg.model.hmm, cfg.model.pfi, cfg.loss
    n = len(m.stage_depths)
    derived_plan = tuple(m.base_channels * 2 ** min(i, n - 1 - i) for i in range(n))
    values = {
        "seed": cfg.seed,
        "steps": cfg.steps,
        "batch": cfg.batch,
        "crop": cfg.crop,
        "augment": cfg.augment,
        "lr_initial": cfg.lr_initial,
        "lr_final": cfg.lr_final,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "grad_clip": cfg.grad_clip,
        "checkpoint_every": cfg.checkpoint_every,
        "log_every": cfg.log_every,
        "data_dir": cfg.data_dir,
        "out_dir": cfg.out_dir,
        "loss.lambda_fcr": l.lambda_fcr,
        "loss.n_negatives": l.n_negatives,
        "loss.epsilon": l.epsilon,
        "model.base_channels": m.base_channels,
        "model.stage_depths": m.stage_depths,
        "model.channel_plan": "auto" if m.channel_plan == derived_plan else m.channel_plan,
        # 4 mirrors the heads fallback in build_run_config; any other head
        # count must stay explicit because the file is its only carrier
        "model.stage_heads": "auto" if m.stage_heads == (4,) * n else m.stage_heads,
        "model.prior_provider": m.prior_provider,
        "model.prior_seed": m.prior_seed,
        "model.prior_file": m.prior_file,
        "model.prompt": m.prompt,
        "model.hmm.dw_kernel": h.dw_kernel,
        "model.hmm.ffcm_enabled": h.ffcm_enabled,
        "model.hmm.dw_enabled": h.dw_enabled,
        "model.hmm.vssm_enabled": h.vssm_enabled,
        "model.hmm.fusion_scheme": h.fusion_scheme,
        "model.hmm.d_state": h.d_state,
        "model.hmm.vssm_expand": h.vssm_expand,
        "model.hmm.ffcm_hidden_factor": h.ffcm_hidden_factor,
        "model.hmm.attn_heads": h.attn_heads,
        "model.pfi.inject_visual": p.inject_visual,
        "model.pfi.inject_text": p.inject_text,
        "model.pfi.fusion_scheme": p.fusion_scheme,
        "model.pfi.text_as_queries": p.text_as_queries,
        "model.pfi.gdfn_expansion": p.gdfn_expansion,
        "model.pfi.attn_max_tokens": p.attn_max_tokens,
    }
    lines = ["# mphm run configuration (key = value; dotted keys nest)"]
    lines += [f"{key} = {_fmt(values[key])}" for key in _SCHEMA]
    return "\n".join(lines) + "\n"


def _parse_lines(text: str, source: str) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{stripped}'")
        key, _, raw = stripped.partition("=")
        out[key.strip()] = raw.strip()
    return out


def build_run_config(raw_values: Dict[str, str]) -> RunConfig:
    sections = {"run": {}, "loss": {}, "model": {}, "hmm": {}, "pfi": {}}
    for key, raw in raw_values.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        section, name, parser = _SCHEMA[key]
        sections[section][name] = parser(raw, key)

    model_kw = sections["model"]
    base = model_kw.get("base_channels", 32)
    plan = model_kw.get("channel_plan")
    c0 = plan[0] if plan else base
    heads = model_kw.get("stage_heads")
    hmm = HmmConfig(channels=c0, **sections["hmm"]) if sections["hmm"] else None
    pfi = (
        PfiConfig(channels=c0, heads=heads[0] if heads else 4, **sections["pfi"])
        if sections["pfi"] or heads
        else None
    )
    model = ModelConfig(hmm=hmm, pfi=pfi, **model_kw)
    loss = LossConfig(**sections["loss"])
    return RunConfig(model=model, loss=loss, **sections["run"])


def load_run_config(path=None, overrides: Optional[List[str]] = None) -> RunConfig:
    """Read a config file, apply key=value overrides, then the seed env var."""
    raw_values: Dict[str, str] = {}
    if path is not None:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        raw_values.update(_parse_lines(text, str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, _, raw = item.partition("=")
        raw_values[key.strip()] = raw.strip()
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            int(env_seed)
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV_VAR}='{env_seed}' is not an integer") from e
        raw_values["seed"] = env_seed
    return build_run_config(raw_values)
