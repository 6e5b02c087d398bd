"""
Experiment configuration: YAML documents in, validated `ExperimentConfig` out.

A document names the experiment ``kind`` and carries a block of the same
name with that kind's parameters. Every block key has a documented default;
unknown keys are rejected. Example::

    kind: diffusion
    seed: 7
    diffusion:
      n_nodes: 10
      link_probability: 1.0
      exponent: 8
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import yaml

from .detection import WeightingPolicy
from .diffusion import LmsConfig, NoiseProfile
from .graph import GraphSpec, PathCase
from .marl import CASES, FROZEN_LAKE_8X8, GridWorld, LearningParams, VotingConfig

KINDS = ("paths", "diffusion", "marl")
TOP_LEVEL = ("kind", "seed", "jobs", "output_dir")


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.key = key
        self.line = line

    def report(self) -> dict:
        return {"error": "ConfigError", "message": str(self), "key": self.key, "line": self.line}


# -- field converters ---------------------------------------------------------

def _int(lo=None):
    def conv(v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ValueError(f"expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}, got {v}")
        return v
    return conv


def _float(lo=None, hi=None, lo_open=False, hi_open=False, allow_inf=False):
    def conv(v):
        if isinstance(v, str) and allow_inf and v.strip().lower() in ("inf", "infinity", ".inf"):
            v = math.inf
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError(f"expected a number, got {v!r}")
        v = float(v)
        if math.isnan(v) or (math.isinf(v) and not allow_inf):
            raise ValueError(f"must be finite, got {v}")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ValueError(f"must be {'>' if lo_open else '>='} {lo}, got {v}")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            raise ValueError(f"must be {'<' if hi_open else '<='} {hi}, got {v}")
        return v
    return conv


def _optional(conv):
    return lambda v: None if v is None else conv(v)


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError(f"expected true or false, got {v!r}")
    return v


def _choice(*options):
    def conv(v):
        if v not in options:
            raise ValueError(f"must be one of {list(options)}, got {v!r}")
        return v
    return conv


def _list_of(conv, min_len=1):
    def inner(v):
        if not isinstance(v, (list, tuple)) or len(v) < min_len:
            raise ValueError(f"expected a list with at least {min_len} item(s), got {v!r}")
        return [conv(x) for x in v]
    return inner


def _text(v):
    if not isinstance(v, str):
        raise ValueError(f"expected text, got {v!r}")
    return v


def _cell(v):
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        raise ValueError(f"expected a [row, col] pair, got {v!r}")
    return [_int(0)(v[0]), _int(0)(v[1])]


# block name -> key -> (default, converter)
SCHEMA: dict[str, dict[str, tuple[Any, Callable]]] = {
    "paths": {
        "n_nodes": ([6, 10, 20], _list_of(_int(3))),
        "link_probability": ([0.3, 0.5, 1.0], _list_of(_float(0.0, 1.0))),
        "lengths": ([1, 2, 3], _list_of(_int(1))),
        "cases": ([c.value for c in PathCase], _list_of(_choice(*[c.value for c in PathCase]))),
        "trials": (100_000, _int(1)),
    },
    "diffusion": {
        "n_nodes": (10, _int(2)),
        "link_probability": (1.0, _float(0.0, 1.0)),
        "signal_length": (100, _int(1)),
        "sparsity": (0.5, _float(0.0, 1.0)),
        "step_size": (0.001, _float(0.0, lo_open=True)),
        "adaptation_window": (10, _int(1)),
        "iterations": (2000, _int(1)),
        "n_simulations": (1000, _int(1)),
        "zeta": (0.015, _float(0.0, lo_open=True)),
        "exponent": (8.0, _float(0.0, allow_inf=True)),
        "hard_cap": (64.0, _float(0.0, lo_open=True)),
        "sigma_noise": (0.04, _float(0.0)),
        "impaired_node": (0, _optional(_int(0))),
        "impaired_exponent": (2.0, _float(0.0)),
        "db_floor": (-200.0, _float()),
        "weight_after_round": (200, _int(0)),
    },
    "marl": {
        "case": (1, _choice(*CASES)),
        "learning_rate": (None, _optional(_float(0.0, 1.0, lo_open=True))),
        "discount": (None, _optional(_float(0.0, 1.0, hi_open=True))),
        "eps_min": (None, _optional(_float(0.0, 1.0))),
        "eps_max": (None, _optional(_float(0.0, 1.0))),
        "decay_rate": (None, _optional(_float(0.0, lo_open=True))),
        "max_steps": (None, _optional(_int(1))),
        "n_episodes": (None, _optional(_int(1))),
        "lam": (None, _optional(_float(0.0, 1.0, lo_open=True, hi_open=True))),
        "window": (10, _int(1)),
        "kappa": (10.0, _float(0.0)),
        "weight_memory": ("compound", _choice("compound", "reset")),
        "aggregation": ("visited", _choice("visited", "full")),
        "n_agents": (3, _int(2)),
        "broken_agent": (2, _optional(_int(0))),
        "layout": (None, _optional(_text)),
        "starts": (None, _optional(_list_of(_cell))),
        "slippery": (False, _bool),
        "repetitions": (20, _int(1)),
        "n_eval": (1000, _int(1)),
        "warmup_episodes": (100, _int(0)),
        "record_votes": (False, _bool),
    },
}

_PARAM_FIELDS = ("learning_rate", "discount", "eps_min", "eps_max", "decay_rate", "max_steps", "n_episodes")


@dataclass
class ExperimentConfig:
    kind: str
    seed: int = 0
    jobs: int = 1
    output_dir: Optional[str] = None
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Echo suitable for JSON; `parse_config` of its dump gives back this config."""
        block = dict(self.params)
        if "exponent" in block and math.isinf(block["exponent"]):
            block["exponent"] = "inf"
        return {"kind": self.kind, "seed": self.seed, "jobs": self.jobs,
                "output_dir": self.output_dir, self.kind: block}

    # typed views ------------------------------------------------------------

    def lms_config(self) -> LmsConfig:
        p = self.params
        return LmsConfig(
            graph_spec=GraphSpec(p["n_nodes"], p["link_probability"]),
            signal_length=p["signal_length"],
            sparsity=p["sparsity"],
            step_size=p["step_size"],
            adaptation_window=p["adaptation_window"],
            iterations=p["iterations"],
            weighting=WeightingPolicy(p["zeta"], p["exponent"], p["hard_cap"]),
            noise=NoiseProfile(p["sigma_noise"], p["impaired_node"], p["impaired_exponent"]),
            n_simulations=p["n_simulations"],
            db_floor=p["db_floor"],
        )

    def learning_params(self) -> LearningParams:
        base, _ = CASES[self.params["case"]]
        values = {k: getattr(base, k) if self.params[k] is None else self.params[k] for k in _PARAM_FIELDS}
        return LearningParams(**values)

    def voting_config(self) -> VotingConfig:
        p = self.params
        lam = CASES[p["case"]][1] if p["lam"] is None else p["lam"]
        return VotingConfig(p["window"], lam, p["kappa"], p["weight_memory"], p["aggregation"])

    def grid_world(self) -> GridWorld:
        p = self.params
        starts = None if p["starts"] is None else [tuple(c) for c in p["starts"]]
        if p["layout"] is None:
            if starts is None:
                return GridWorld.standard(p["n_agents"], p["slippery"])
            return GridWorld.from_text("\n".join(FROZEN_LAKE_8X8), starts, p["slippery"], p["n_agents"])
        return GridWorld.from_text(p["layout"], starts, p["slippery"], p["n_agents"])


def _validate_block(kind: str, block: dict) -> dict:
    schema = SCHEMA[kind]
    for key in block:
        if key not in schema:
            raise ConfigError(f"unknown key {kind}.{key}; allowed: {sorted(schema)}", key=key)
    out = {}
    for key, (default, conv) in schema.items():
        value = block.get(key, default)
        try:
            out[key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"{kind}.{key}: {exc}", key=key) from None
    return out


def _cross_check(cfg: ExperimentConfig) -> None:
    """Checks that span several keys, run by building the typed objects."""
    p = cfg.params
    try:
        if cfg.kind == "diffusion":
            if p["impaired_node"] is not None and p["impaired_node"] >= p["n_nodes"]:
                raise ConfigError(f"diffusion.impaired_node {p['impaired_node']} is not a node id",
                                  key="impaired_node")
            cfg.lms_config()
        elif cfg.kind == "marl":
            params = cfg.learning_params()
            if params.eps_min > params.eps_max:
                raise ConfigError("marl.eps_min exceeds eps_max", key="eps_min")
            if p["broken_agent"] is not None and p["broken_agent"] >= p["n_agents"]:
                raise ConfigError(f"marl.broken_agent {p['broken_agent']} is not an agent id",
                                  key="broken_agent")
            if p["starts"] is not None and len(p["starts"]) < p["n_agents"]:
                raise ConfigError("marl.starts needs one cell per agent", key="starts")
            cfg.voting_config()
            cfg.grid_world()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{cfg.kind}: {exc}") from None


def config_from_mapping(doc: Any) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    kind = doc.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {list(KINDS)}, got {kind!r}", key="kind")
    for key in doc:
        if key not in TOP_LEVEL and key != kind:
            raise ConfigError(f"unknown top-level key {key!r}", key=key)
    try:
        seed = _int(0)(doc.get("seed", 0))
    except ValueError as exc:
        raise ConfigError(f"seed: {exc}", key="seed") from None
    try:
        jobs = _int(1)(doc.get("jobs", 1))
    except ValueError as exc:
        raise ConfigError(f"jobs: {exc}", key="jobs") from None
    output_dir = doc.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        raise ConfigError("output_dir must be text", key="output_dir")
    block = doc.get(kind) or {}
    if not isinstance(block, dict):
        raise ConfigError(f"{kind} block must be a mapping", key=kind)
    cfg = ExperimentConfig(kind, seed, jobs, output_dir, _validate_block(kind, block))
    _cross_check(cfg)
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a YAML (or JSON) configuration document."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        where = f" at line {line}" if line is not None else ""
        raise ConfigError(f"cannot parse configuration{where}: {getattr(exc, 'problem', exc)}", line=line) from None
    return config_from_mapping(doc)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
