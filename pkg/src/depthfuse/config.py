"""Sectioned ``key = value`` run configuration.

Every key name is unique across sections, so a bare ``key = value`` line
before any header is unambiguous; a key under a header must belong to that
section. Unknown keys, bad values and out-of-range values fail with the
offending line number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from .shapes import FAMILIES

FLOAT, INT, STR, BOOL, LIST = "float", "int", "str", "bool", "list"


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.key = key


@dataclass(frozen=True)
class Key:
    section: str
    kind: str
    default: Any
    check: Optional[Callable[[Any], bool]] = None
    rule: str = ""


def _pos(v):
    return v > 0


def _frac(v):
    return 0.0 <= v <= 1.0


SCHEMA: Dict[str, Key] = {
    # run
    "prompt_id": Key("run", STR, "a cone"),
    "shapes": Key("run", LIST, ["asymmetric-cone"], lambda v: len(v) > 0 and all(s in FAMILIES for s in v),
                  f"non-empty subset of {', '.join(FAMILIES)}"),
    "seed": Key("run", INT, None, lambda v: v >= 0, ">= 0"),
    "reference_identity": Key("run", INT, 0, lambda v: v >= 0, ">= 0"),
    # model
    "model": Key("model", STR, "analytic-gaussian", lambda v: v in ("analytic-gaussian", "mlp-denoiser"),
                 "analytic-gaussian or mlp-denoiser"),
    "lambda_inject": Key("model", FLOAT, 1.0, lambda v: v >= 0, ">= 0"),
    "lambda_lora": Key("model", FLOAT, 0.3, lambda v: v >= 0, ">= 0"),
    "embed_dim": Key("model", INT, 16, _pos, "> 0"),
    "lora_rank": Key("model", INT, 4, _pos, "> 0"),
    "hidden": Key("model", LIST, [128, 128], lambda v: len(v) > 0 and all(int(x) > 0 for x in v),
                  "positive widths"),
    "prior_rank": Key("model", INT, 192, _pos, "> 0"),
    "timesteps": Key("model", INT, 1000, lambda v: v >= 2, ">= 2"),
    "beta_min": Key("model", FLOAT, 1e-4, lambda v: 0 < v < 1, "in (0, 1)"),
    "beta_max": Key("model", FLOAT, 2e-2, lambda v: 0 < v < 1, "in (0, 1)"),
    "weighting": Key("model", STR, "variance", lambda v: v in ("variance", "constant"), "variance or constant"),
    "world_temperature": Key("model", FLOAT, 1.0, _pos, "> 0"),
    "world_view_strength": Key("model", FLOAT, 1.5, lambda v: v >= 0, ">= 0"),
    "world_bank_count": Key("model", INT, 180, lambda v: v >= 4, ">= 4"),
    # embedding inversion
    "embed_steps": Key("embedding", INT, 400, lambda v: v >= 0, ">= 0"),
    "embed_lr": Key("embedding", FLOAT, 5e-3, _pos, "> 0"),
    "embed_batch": Key("embedding", INT, 4, _pos, "> 0"),
    "embed_t_min": Key("embedding", FLOAT, 0.02, lambda v: 0 <= v < 1, "in [0, 1)"),
    "embed_t_max": Key("embedding", FLOAT, 0.98, lambda v: 0 < v <= 1, "in (0, 1]"),
    # coarse cloud
    "cloud_points": Key("cloud", INT, 4000, _pos, "> 0"),
    "keep_fraction": Key("cloud", FLOAT, 0.9, lambda v: 0 < v <= 1, "in (0, 1]"),
    "noise_fraction": Key("cloud", FLOAT, 0.05, lambda v: 0 <= v <= 0.1, "in [0, 0.1]"),
    "noise_scale": Key("cloud", FLOAT, 0.05, lambda v: v >= 0, ">= 0"),
    # injector
    "injector_shapes": Key("injector", LIST, list(FAMILIES),
                           lambda v: len(v) > 0 and all(s in FAMILIES for s in v),
                           f"non-empty subset of {', '.join(FAMILIES)}"),
    "injector_views": Key("injector", INT, 200, _pos, "> 0"),
    "injector_steps": Key("injector", INT, 3000, lambda v: v >= 0, ">= 0"),
    "injector_lr": Key("injector", FLOAT, 5e-4, _pos, "> 0"),
    "injector_batch": Key("injector", INT, 32, _pos, "> 0"),
    "dense_fraction": Key("injector", FLOAT, 0.5, _frac, "in [0, 1]"),
    "pretrain_steps": Key("injector", INT, 1500, lambda v: v >= 0, ">= 0"),
    # adapters
    "adapter_steps": Key("adapters", INT, 200, lambda v: v >= 0, ">= 0"),
    "adapter_lr": Key("adapters", FLOAT, 1e-3, _pos, "> 0"),
    # distillation
    "iterations": Key("distill", INT, 2000, lambda v: v >= 1, ">= 1"),
    "views_per_iteration": Key("distill", INT, 1, _pos, ">= 1"),
    "t_min": Key("distill", FLOAT, 0.02, lambda v: 0 < v < 1, "in (0, 1)"),
    "t_max": Key("distill", FLOAT, 0.98, lambda v: 0 < v <= 1, "in (0, 1]"),
    "elevation_min_deg": Key("distill", FLOAT, 30.0, lambda v: -89 <= v <= 89, "in [-89, 89]"),
    "elevation_max_deg": Key("distill", FLOAT, 30.0, lambda v: -89 <= v <= 89, "in [-89, 89]"),
    "camera_radius": Key("distill", FLOAT, 3.2, lambda v: v > math.sqrt(3.0), "> sqrt(3) (outside the cube)"),
    "image_size": Key("distill", INT, 48, lambda v: v >= 4, ">= 4"),
    "steps_per_ray": Key("distill", INT, 48, lambda v: v >= 8, ">= 8"),
    "resolution": Key("distill", INT, 24, lambda v: v >= 2, ">= 2"),
    "lr": Key("distill", FLOAT, 0.05, _pos, "> 0"),
    "mode": Key("distill", STR, "fused", lambda v: v in ("fused", "baseline"), "fused or baseline"),
    # evaluation
    "eval_frames": Key("eval", INT, 100, lambda v: v >= 2, ">= 2"),
    "eval_elevation_deg": Key("eval", FLOAT, 30.0, lambda v: -89 <= v <= 89, "in [-89, 89]"),
    "tie_tolerance": Key("eval", FLOAT, 1.0 / 255.0, lambda v: v >= 0, ">= 0"),
    "bank_factor": Key("eval", INT, 2, _pos, ">= 1"),
}

SECTIONS = tuple(dict.fromkeys(k.section for k in SCHEMA.values()))


@dataclass
class Config:
    values: Dict[str, Any] = field(default_factory=lambda: {k: _copy(s.default) for k, s in SCHEMA.items()})
    source: Optional[str] = None

    def __getattr__(self, name):
        values = self.__dict__.get("values")
        if values is not None and name in values:
            return values[name]
        raise AttributeError(name)

    def replace(self, **changes) -> "Config":
        vals = dict(self.values)
        for k, v in changes.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown key {k!r}", key=k)
            vals[k] = v
            _check_value(k, v, None)
        out = Config(vals, self.source)
        _check_cross(out, {})
        return out

    def as_sections(self) -> Dict[str, Dict[str, Any]]:
        out: Dict[str, Dict[str, Any]] = {s: {} for s in SECTIONS}
        for k, v in self.values.items():
            out[SCHEMA[k].section][k] = v
        return out

    def to_text(self) -> str:
        lines = []
        for sec, vals in self.as_sections().items():
            lines.append(f"[{sec}]")
            for k, v in vals.items():
                if v is None:
                    continue
                lines.append(f"{k} = {format_value(v)}")
            lines.append("")
        return "\n".join(lines)


def _copy(v):
    return list(v) if isinstance(v, list) else v


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, raw: str, line: int):
    spec = SCHEMA[key]
    try:
        if spec.kind == FLOAT:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError("not finite")
            return v
        if spec.kind == INT:
            return int(raw)
        if spec.kind == BOOL:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError("not a boolean")
            return raw.lower() in ("true", "1", "yes")
        if spec.kind == LIST:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if isinstance(spec.default, list) and spec.default and isinstance(spec.default[0], int):
                return [int(s) for s in items]
            return items
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {spec.kind}", line, key) from None


def _check_value(key: str, value, line: Optional[int]):
    spec = SCHEMA[key]
    if value is None:
        return
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"{key} = {format_value(value)} out of range (expected {spec.rule})", line, key)


def _check_cross(cfg: Config, lines: Dict[str, int]):
    def fail(msg, key):
        raise ConfigError(msg, lines.get(key), key)

    if not cfg.t_min < cfg.t_max:
        fail(f"t_min ({cfg.t_min}) must be below t_max ({cfg.t_max})", "t_max" if "t_max" in lines else "t_min")
    if not cfg.embed_t_min < cfg.embed_t_max:
        fail("embed_t_min must be below embed_t_max", "embed_t_max")
    if cfg.elevation_max_deg < cfg.elevation_min_deg:
        fail("elevation_max_deg must be >= elevation_min_deg", "elevation_max_deg")
    if cfg.beta_max < cfg.beta_min:
        fail("beta_max must be >= beta_min", "beta_max")


def parse_config(text: str, source: Optional[str] = None) -> Config:
    values = {k: _copy(s.default) for k, s in SCHEMA.items()}
    seen: Dict[str, int] = {}
    section: Optional[str] = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", no)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", no)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", no, key)
        if section is not None and SCHEMA[key].section != section:
            raise ConfigError(f"key {key!r} belongs in [{SCHEMA[key].section}], not [{section}]", no, key)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", no, key)
        if val == "":
            raise ConfigError(f"{key}: empty value", no, key)
        v = _parse_value(key, val, no)
        _check_value(key, v, no)
        values[key] = v
        seen[key] = no
    cfg = Config(values, source)
    _check_cross(cfg, seen)
    return cfg


def load_config(path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        text = p.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{p}: not UTF-8 ({exc.reason})") from None
    return parse_config(text, str(p))


def resolve_seed(cli_seed: Optional[int], cfg: Config, env: Dict[str, str]) -> Tuple[int, str]:
    """CLI flag, then config, then ``SDS_SANDBOX_SEED``, then 0. Returns (seed, source)."""
    if cli_seed is not None:
        return int(cli_seed), "cli"
    if cfg.seed is not None:
        return int(cfg.seed), "config"
    raw = env.get("SDS_SANDBOX_SEED")
    if raw not in (None, ""):
        try:
            seed = int(raw)
        except ValueError:
            raise ConfigError(f"SDS_SANDBOX_SEED={raw!r} is not an integer") from None
        if seed < 0:
            raise ConfigError("SDS_SANDBOX_SEED must be >= 0")
        return seed, "env"
    return 0, "default"
