"""TOML experiment configuration: schema, defaulting, field-level validation.

Three tables. [experiment] names the environment, the methods, the seeds and
the output directory; [ippg] overrides loop hyperparameters; [ddpg] overrides
the residual learner. Every key is checked against the schema so a typo fails
loudly with the offending field's dotted name.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .ddpg import DdpgConfig
from .envs import ENV_IDS, make_env
from .loop import IppgConfig, default_config

METHODS = ("propel-prog", "propel-tree", "ndps", "viper", "ddpg-only", "prior-only")

# projection family used by each method; the neural-only methods never
# project but still need a well-formed IppgConfig
_FAMILIES = {
    "propel-prog": "dsl",
    "ndps": "dsl",
    "propel-tree": "tree",
    "viper": "tree",
    "ddpg-only": "dsl",
    "prior-only": "dsl",
}

# loop fields a config may override; the structural ones are set per job
_IPPG_KEYS = {
    f.name for f in fields(IppgConfig) if f.name not in ("env_id", "family", "seed", "ddpg")
}
_DDPG_KEYS = {f.name for f in fields(DdpgConfig)}


class ConfigError(Exception):
    """Invalid experiment configuration; the message names the field."""


@dataclass
class ExperimentConfig:
    env_id: str
    methods: list
    seeds: list
    output_dir: str = "runs"
    prior: str | None = None  # DSL text; None = the built-in per-env prior
    ippg_overrides: dict = field(default_factory=dict)
    ddpg_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        assert self.seeds, "seed list must be non-empty"
        assert all(m in METHODS for m in self.methods), f"bad method in {self.methods}"

    def jobs(self):
        return [(m, s) for m in self.methods for s in self.seeds]

    def job_config(self, method: str, seed: int) -> IppgConfig:
        cfg = default_config(self.env_id, family=_FAMILIES[method], seed=seed)
        ddpg = replace(cfg.ddpg, **self.ddpg_overrides)
        return replace(cfg, ddpg=ddpg, **self.ippg_overrides)


def _require(table: dict, key: str, section: str):
    if key not in table:
        raise ConfigError(f"{section}.{key}: required field is missing")
    return table.pop(key)


def _reject_unknown(table: dict, section: str, allowed=None):
    for key in table:
        if allowed is None or key not in allowed:
            raise ConfigError(f"{section}.{key}: unknown field")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config does not parse as TOML: {exc}") from None

    for section in raw:
        if section not in ("experiment", "ippg", "ddpg"):
            raise ConfigError(f"{section}: unknown section")
    if "experiment" not in raw:
        raise ConfigError("experiment: required section is missing")

    exp = dict(raw["experiment"])
    env_id = _require(exp, "env", "experiment")
    if env_id not in ENV_IDS:
        raise ConfigError(
            f"experiment.env: unknown environment {env_id!r}; expected one of {list(ENV_IDS)}"
        )

    methods = _require(exp, "methods", "experiment")
    if isinstance(methods, str):
        methods = [methods]
    if not methods:
        raise ConfigError("experiment.methods: must name at least one method")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(
                f"experiment.methods: unknown method {m!r}; expected one of {list(METHODS)}"
            )

    seeds = _require(exp, "seeds", "experiment")
    if not isinstance(seeds, list) or not seeds or not all(
        isinstance(s, int) and not isinstance(s, bool) for s in seeds
    ):
        raise ConfigError("experiment.seeds: must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("experiment.seeds: seeds must be distinct")

    output_dir = exp.pop("output_dir", "runs")
    if not isinstance(output_dir, str):
        raise ConfigError("experiment.output_dir: must be a string path")

    prior = exp.pop("prior", None)
    if prior is not None:
        if not isinstance(prior, str):
            raise ConfigError("experiment.prior: must be a DSL program string")
        from .dsl import ProgramPolicy, parse

        try:
            ProgramPolicy(parse(prior), make_env(env_id).spec)
        except Exception as exc:
            raise ConfigError(f"experiment.prior: does not parse for {env_id}: {exc}") from None

    _reject_unknown(exp, "experiment")

    ippg_overrides = dict(raw.get("ippg", {}))
    _reject_unknown(ippg_overrides, "ippg", _IPPG_KEYS)
    ddpg_overrides = dict(raw.get("ddpg", {}))
    _reject_unknown(ddpg_overrides, "ddpg", _DDPG_KEYS)
    if "hidden" in ddpg_overrides:
        ddpg_overrides["hidden"] = tuple(ddpg_overrides["hidden"])

    cfg = ExperimentConfig(env_id, list(methods), list(seeds), output_dir, prior,
                           ippg_overrides, ddpg_overrides)
    # build one job config now so bad override values fail at load time
    try:
        cfg.job_config(cfg.methods[0], cfg.seeds[0])
    except AssertionError as exc:
        raise ConfigError(f"ippg: invalid override ({exc})") from None
    return cfg
