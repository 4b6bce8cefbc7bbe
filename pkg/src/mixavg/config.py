"""Run configuration: sectioned key=value text parsed with configparser.

Every key must be known; unknown keys are rejected by name. Kernel
feasibility is checked while parsing, so an infeasible kernel never reaches
a generator.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import PopulationSpec
from .stochastic import NoiseKernel

EXPERIMENTS = ("simulate", "mixing", "residual", "clt", "linearity", "rate", "lti", "spatial", "all")


def _floats(text):
    return [float(x) for x in text.replace(",", " ").split()]


def _ints(text):
    return [int(float(x)) for x in text.replace(",", " ").split()]


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA = {
    "run": {"experiment": str, "seed": int, "output": str},
    "population": {
        "n_subsystems": int, "state_dim": int, "noise_dim": int, "tau": float, "family": str,
        "gain": float, "coupling": float, "input_gain": float, "bound": float, "degree": int,
        "slope": float, "threshold": float, "heterogeneity": float, "init": str, "init_sd": float,
        "init_mean": float, "noise_period": int, "noise_amplitude": float, "sizes": _ints,
    },
    "noise": {
        "kind": str, "variance": float, "weights": _floats, "c": float, "hurst": float, "length": float,
        "innovations": str,
    },
    "spatial": {
        "intensity": float, "radius": float, "dim": int, "radii": _floats, "layouts": int,
        "resample_layouts": _bool, "length": float, "clt_intensity": float,
    },
    "analysis": {
        "replicates": int, "sizes": _ints, "steps": int, "burn_in": int, "threshold": float,
        "band": float, "k": int, "lags": _ints, "upsilon": float, "delta": float, "tolerance": float,
        "factor": float, "directions": int, "control_period": int, "control_amplitude": float,
        "pair_kind": str, "pair_shape": float, "pair_ymax": float, "pair_clip": float,
        "pair_noise": float, "oracle_factor": int, "balls": int, "gap_ratio": float,
    },
}


@dataclass
class RunConfig:
    experiment: str
    seed: int
    output: str | None
    population: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    spatial: dict | None = None
    analysis: dict = field(default_factory=dict)
    source: str = ""

    def kernel(self) -> NoiseKernel:
        return kernel_from_section(self.noise)

    def population_spec(self, n_subsystems=None, **overrides) -> PopulationSpec:
        pop = {k: v for k, v in self.population.items() if k != "sizes"}
        if n_subsystems is not None:
            pop["n_subsystems"] = n_subsystems
        pop.setdefault("n_subsystems", 100)
        pop.update(overrides)
        return PopulationSpec(noise=self.kernel(), seed=self.seed, **pop)

    def get(self, key, default=None):
        return self.analysis.get(key, default)

    def config_hash(self) -> str:
        body = {"experiment": self.experiment, "seed": self.seed, "population": self.population,
                "noise": self.noise, "spatial": self.spatial, "analysis": self.analysis}
        return hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()[:16]


def kernel_from_section(sec: dict) -> NoiseKernel:
    kind = sec.get("kind", "iid")
    variance = sec.get("variance", 1.0)
    if kind == "moving_average":
        return NoiseKernel.moving_average(sec.get("weights", [1.0]), variance)
    if kind == "inverse_lag":
        return NoiseKernel.inverse_lag(sec.get("c", 0.5), variance)
    if kind == "long_memory":
        return NoiseKernel.long_memory(sec.get("hurst", 0.75), variance)
    if kind == "exp_distance":
        return NoiseKernel.exp_distance(sec.get("length", 1.0), variance)
    return NoiseKernel(kind, variance)


def parse_config_text(text: str, source="<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    parsed = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        out = {}
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            try:
                out[key] = SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {raw!r}") from exc
        parsed[section] = out
    run = parsed.get("run", {})
    if "seed" not in run:
        raise ConfigError(f"{source}: [run] seed is mandatory")
    experiment = run.get("experiment", "all")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"{source}: unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    analysis = parsed.get("analysis", {})
    for key in ("sizes", "lags"):
        if key in analysis and analysis[key] != sorted(analysis[key]):
            raise ConfigError(f"{source}: analysis.{key} must be sorted")
    for key in ("threshold", "band", "delta", "tolerance", "factor"):
        if key in analysis and not analysis[key] > 0:
            raise ConfigError(f"{source}: analysis.{key} must be positive")
    spatial = parsed.get("spatial")
    if spatial and "radii" in spatial and spatial["radii"] != sorted(spatial["radii"]):
        raise ConfigError(f"{source}: spatial.radii must be sorted")
    cfg = RunConfig(experiment, run["seed"], run.get("output"), parsed.get("population", {}),
                    parsed.get("noise", {}), spatial, analysis, source)
    # surfaces infeasible kernels (and bad population values) at parse time
    cfg.kernel()
    if cfg.population:
        cfg.population_spec()
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))
