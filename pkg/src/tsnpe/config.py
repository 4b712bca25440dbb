"""INI experiment configuration.

Grammar: standard INI (``configparser``) with the sections below; every key is
optional and defaults to the :class:`~tsnpe.engine.RunConfig` value. Lists are
comma separated. Unknown sections and keys are errors, and all errors are
reported together.

.. code-block:: ini

    [run]
    task = toy1d
    method = tsnpe
    rounds = 10
    simulations = 500
    seed = 0

    [truncation]
    epsilon = 1e-4

    [benchmark]
    tasks = gaussian_linear, two_moons
    methods = npe, apt, tsnpe
    budgets = 2000, 4000
    seeds = 0, 1, 2
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .density import TrainConfig
from .engine import METHODS, RunConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else _int(text)


def _opt_str(text: str):
    return None if text.strip().lower() in ("", "none") else text.strip()


def _str(text: str) -> str:
    return text.strip()


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(_int(t) for t in _str_list(text))


# section -> {ini key: (target, attribute, parser)}; target is "run", "train",
# "output" or "benchmark"
SCHEMA: dict[str, dict[str, tuple[str, str, object]]] = {
    "run": {
        "task": ("run", "task", _str),
        "method": ("run", "method", _str),
        "observation": ("run", "observation", _int),
        "rounds": ("run", "rounds", _int),
        "simulations": ("run", "simulations", _int),
        "pooling": ("run", "pooling", _str),
        "warm_start": ("run", "warm_start", _bool),
        "seed": ("run", "seed", _int),
        "workers": ("run", "workers", _int),
        "name": ("run", "name", _opt_str),
    },
    "density": {
        "backend": ("run", "backend", _str),
        "components": ("run", "components", _int),
        "hidden": ("run", "hidden", _int),
        "layers": ("run", "layers", _opt_int),
        "activation": ("run", "activation", _str),
        "ensemble_size": ("run", "ensemble_size", _int),
    },
    "train": {
        "batch_size": ("train", "batch_size", _int),
        "learning_rate": ("train", "learning_rate", float),
        "max_epochs": ("train", "max_epochs", _int),
        "validation_fraction": ("train", "validation_fraction", float),
        "patience": ("train", "patience", _int),
        "clip_norm": ("train", "clip_norm", float),
    },
    "truncation": {
        "epsilon": ("run", "epsilon", float),
        "m_threshold": ("run", "m_threshold", _int),
        "sampler": ("run", "sampler", _str),
        "k": ("run", "k", _int),
        "max_draws": ("run", "max_draws", _int),
    },
    "coverage": {
        "enabled": ("run", "coverage", _bool),
        "m": ("run", "coverage_m", _int),
        "p": ("run", "coverage_p", _int),
        "strategy": ("run", "coverage_strategy", _str),
    },
    "apt": {
        "atoms": ("run", "atoms", _int),
        "constrain_space": ("run", "constrain_space", _bool),
    },
    "metrics": {
        "names": ("run", "metrics", _str_list),
        "samples": ("run", "metric_samples", _int),
        "c2st_samples": ("run", "c2st_samples", _int),
    },
    "output": {
        "dir": ("output", "dir", _opt_str),
        "observations": ("output", "observations", _int_list),
    },
    "benchmark": {
        "tasks": ("benchmark", "tasks", _str_list),
        "methods": ("benchmark", "methods", _str_list),
        "budgets": ("benchmark", "budgets", _int_list),
        "seeds": ("benchmark", "seeds", _int_list),
        "rounds": ("benchmark", "rounds", _int),
    },
}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = list(errors)


@dataclass
class BenchmarkSpec:
    tasks: tuple[str, ...] = ()
    methods: tuple[str, ...] = METHODS
    budgets: tuple[int, ...] = ()
    seeds: tuple[int, ...] = (0,)
    rounds: int = 5

    def validate(self) -> list[str]:
        errs = []
        if not self.tasks:
            errs.append("benchmark.tasks is empty")
        if not self.methods:
            errs.append("benchmark.methods is empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            errs.append(f"benchmark.methods contains unknown methods {list(bad)}")
        if not self.budgets:
            errs.append("benchmark.budgets is empty")
        if any(b < 1 for b in self.budgets):
            errs.append("benchmark.budgets must be positive")
        if not self.seeds:
            errs.append("benchmark.seeds is empty")
        if self.rounds < 1:
            errs.append("benchmark.rounds must be >= 1")
        return errs


@dataclass
class ExperimentConfig:
    run: RunConfig
    out: str | None = None
    observations: tuple[int, ...] = ()
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    text: str = ""  # source text, stored verbatim next to each run


def parse_override(item: str) -> tuple[str, str, str]:
    """``section.key=value`` -> (section, key, value)."""
    lhs, sep, value = item.partition("=")
    section, dot, key = lhs.strip().partition(".")
    if not sep or not dot or not section or not key:
        raise ConfigError([f"override {item!r} is not of the form section.key=value"])
    return section, key, value.strip()


def load_config(text: str = "", overrides: list[str] | None = None) -> ExperimentConfig:
    """Parse INI ``text`` plus ``section.key=value`` overrides into an experiment config."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    errors: list[str] = []
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax error: {exc}"]) from exc
    entries: list[tuple[str, str, str]] = [(s, k, v) for s in parser.sections() for k, v in parser.items(s)]
    for item in overrides or []:
        try:
            entries.append(parse_override(item))
        except ConfigError as exc:
            errors.extend(exc.errors)

    run_kw: dict = {}
    train_kw: dict = {}
    out_kw: dict = {}
    bench_kw: dict = {}
    targets = {"run": run_kw, "train": train_kw, "output": out_kw, "benchmark": bench_kw}
    for section, key, value in entries:
        if section not in SCHEMA:
            errors.append(f"unknown section [{section}]")
            continue
        spec = SCHEMA[section].get(key)
        if spec is None:
            errors.append(f"unknown key {section}.{key}")
            continue
        target, attr, conv = spec
        try:
            targets[target][attr] = conv(value)
        except ValueError as exc:
            errors.append(f"{section}.{key}: {exc}")

    train = TrainConfig()
    try:
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        errors.append(f"train: {exc}")
    run = RunConfig(**run_kw, train=train)
    errors.extend(run.validate())
    bench = BenchmarkSpec(**bench_kw)
    if bench_kw:
        errors.extend(bench.validate())
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(run, out_kw.get("dir"), out_kw.get("observations", ()), bench, text)


def load_config_file(path, overrides: list[str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file {path} does not exist"])
    return load_config(path.read_text(), overrides)


def run_config_keys() -> set[str]:
    """RunConfig fields reachable from the INI schema (used by tests)."""
    reach = {attr for sec in SCHEMA.values() for target, attr, _ in sec.values() if target == "run"}
    return reach & {f.name for f in fields(RunConfig)}
