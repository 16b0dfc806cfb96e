"""Experiment configuration: INI sections per command, validated and defaulted.

Precedence (lowest first): built-in defaults, the config file, environment
variables ``ROUGHSCHEME_<KEY>`` (e.g. ``ROUGHSCHEME_SEED=7``), CLI flags.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass

COMMANDS = ("fbm", "constants", "simulate", "rate", "clt", "check")
SCHEME_COMMANDS = ("simulate", "rate", "clt", "check")
ENV_PREFIX = "ROUGHSCHEME_"
SCHEME_REGIME = (1.0 / 3.0, 0.5)
LIFT_REGIME = (0.25, 0.5)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    hurst: float = 0.4
    horizon_T: float = 1.0
    ns: tuple = (1024,)
    refinement: int = 32
    mc_reps: int = 1000
    seed: int = 0
    field: str = "rotation"
    schemes: tuple = ("modified",)
    components_m: int = 2
    k_max: int = 64
    quad_n: int = 512
    synthetic_exponent: float | None = None
    output_dir: str = "out"
    threads: int = 1
    field_params: dict = dataclasses.field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int]:
        from .fields import make_field

        f = make_field(self.field, **self.field_params)
        return f.dim_d, f.dim_m

    @property
    def scheme(self) -> str:
        return self.schemes[0]


_DEFAULTS = {
    "fbm": dict(hurst=0.4, ns=(1024,), components_m=2, mc_reps=1),
    "constants": dict(hurst=0.4),
    "simulate": dict(hurst=0.4, ns=(1024,), mc_reps=1, schemes=("modified",)),
    "rate": dict(hurst=0.4, ns=tuple(2**k for k in range(6, 13)), mc_reps=1000,
                 schemes=("modified", "classical")),
    "clt": dict(hurst=0.45, ns=(1024,), mc_reps=2000, field="geometric", horizon_T=0.05),
    "check": dict(),
}

_KEYS = {
    "hurst": float, "horizon_T": float, "ns": "ints", "refinement": int, "mc_reps": int,
    "seed": int, "field": str, "schemes": "strs", "components_m": int, "k_max": int,
    "quad_n": int, "synthetic_exponent": float, "output_dir": str, "threads": int,
}
_ALIASES = {"n": "ns", "grid_sizes": "ns", "reps": "mc_reps", "scheme": "schemes", "t": "horizon_T",
            "horizon": "horizon_T", "h": "hurst", "m": "components_m", "out": "output_dir"}
_FIELD_PREFIX = "field."


def _convert(key: str, raw: str):
    kind = _KEYS[key]
    try:
        if kind == "ints":
            return tuple(int(eval_int(x)) for x in raw.replace(" ", "").split(",") if x)
        if kind == "strs":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        if kind is int:
            return int(eval_int(raw))
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None


def eval_int(text: str) -> int:
    """Integer literal, also accepting powers written ``2**k`` or ``2^k``."""
    t = text.strip().replace("^", "**")
    if "**" in t:
        base, exp = t.split("**", 1)
        return int(base) ** int(exp)
    return int(t)


def _canonical(key: str) -> str:
    k = key.strip()
    low = k.lower()
    if low.startswith(_FIELD_PREFIX):
        return _FIELD_PREFIX + k[len(_FIELD_PREFIX):]
    for name in _KEYS:
        if name.lower() == low:
            return name
    if low in _ALIASES:
        return _ALIASES[low]
    raise ConfigError(f"unknown configuration key {key!r}")


def _apply(values: dict, items) -> None:
    for key, raw in items:
        name = _canonical(key)
        if name.startswith(_FIELD_PREFIX):
            values.setdefault("field_params", {})[name[len(_FIELD_PREFIX):]] = float(raw)
        else:
            values[name] = _convert(name, raw)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    from .fields import BUILTIN_FIELDS
    from .schemes import SCHEMES

    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}; choose from {COMMANDS}")
    lo, hi = SCHEME_REGIME if cfg.command in SCHEME_COMMANDS else LIFT_REGIME
    if not lo < cfg.hurst < hi:
        what = ("the modified Euler analysis (rough regime)" if cfg.command in SCHEME_COMMANDS
                else "the Levy-area lift and its limit constants")
        raise ConfigError(
            f"H={cfg.hurst} is outside ({lo:.4g}, {hi:.4g}), the range covered by {what}"
        )
    if cfg.horizon_T <= 0:
        raise ConfigError("horizon_T must be positive")
    if not cfg.ns or min(cfg.ns) < 1:
        raise ConfigError("grid sizes must be positive")
    if cfg.refinement < 1 or cfg.mc_reps < 1 or cfg.threads < 1:
        raise ConfigError("refinement, mc_reps and threads must be positive")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if cfg.field not in BUILTIN_FIELDS:
        raise ConfigError(f"unknown field {cfg.field!r}; choose from {sorted(BUILTIN_FIELDS)}")
    bad = [s for s in cfg.schemes if s not in SCHEMES]
    if bad:
        raise ConfigError(f"unknown scheme(s) {bad}; choose from {SCHEMES}")
    if cfg.k_max < 4 or cfg.quad_n < 8:
        raise ConfigError("k_max must be >= 4 and quad_n >= 8")
    if cfg.command == "rate" and cfg.synthetic_exponent is None and len(cfg.ns) < 4:
        raise ConfigError("rate needs at least 4 grid sizes")
    return cfg


def build_config(command: str, text: str | None = None, env=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the ``[command]`` section of ``text``, then env, then overrides."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; choose from {COMMANDS}")
    values: dict = dict(_DEFAULTS[command])
    if text:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        for sec in parser.sections():
            if sec not in COMMANDS:
                raise ConfigError(f"unknown section [{sec}]; sections are named after commands {COMMANDS}")
        if parser.has_section(command):
            _apply(values, parser.items(command))
    env = os.environ if env is None else env
    _apply(values, [(k[len(ENV_PREFIX):], v) for k, v in sorted(env.items()) if k.startswith(ENV_PREFIX)])
    for k, v in (overrides or {}).items():
        if v is not None:
            values[_canonical(k)] = v
    return validate(ExperimentConfig(command=command, **values))


def parse_config(text: str, command: str | None = None) -> ExperimentConfig:
    """Parse a config document.  Without ``command`` the document must hold exactly one section."""
    if command is None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        secs = parser.sections()
        if len(secs) != 1:
            raise ConfigError(f"expected exactly one command section, found {secs}")
        command = secs[0]
    return build_config(command, text, env={})


def serialize(cfg: ExperimentConfig) -> str:
    """INI text that parses back to an equal config."""
    lines = [f"[{cfg.command}]"]
    for f in dataclasses.fields(cfg):
        if f.name in ("command", "field_params"):
            continue
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    for k, v in sorted(cfg.field_params.items()):
        lines.append(f"{_FIELD_PREFIX}{k} = {v!r}")
    return "\n".join(lines) + "\n"


def as_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["ns"] = list(cfg.ns)
    d["schemes"] = list(cfg.schemes)
    return d
