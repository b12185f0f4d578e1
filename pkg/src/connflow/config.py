"""Experiment configuration: a sectioned ``key = value`` text file.

Every key has a default; unknown sections or keys are rejected.  List-valued
``[prune]`` keys (``policy``, ``n``, ``k``) describe a sweep grid.
"""
from __future__ import annotations

import configparser
import itertools
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .masking import POLICIES


@dataclass
class RunSection:
    name: str = "run"
    out: str = "runs"
    seed: int = 0
    trials: int = 1
    probe_size: int = 512
    per_class: bool = True
    eta: float | None = None
    encoding: str = "label"  # label | unweighted
    write_pairs: bool = False
    write_masks: bool = False


@dataclass
class DataSection:
    dataset: str = "auto"  # auto | idx | digits | synthetic
    benchmark: str = "permuted"  # permuted | split
    num_tasks: int = 5
    n_train: int = 0  # 0 -> dataset default
    n_eval: int = 500
    downscale: int = 2
    data_seed: int = 0
    classes: int = 10
    dim: int = 64
    separation: float = 3.0


@dataclass
class NetworkSection:
    hidden: list[int] = field(default_factory=lambda: [64, 48, 32, 24])
    activation: str = "tanh"
    bias: bool = False


@dataclass
class TrainSection:
    epochs: int = 20
    finetune_epochs: int = 5
    lr: float = 0.1
    batch_size: int = 32
    convergence_eps: float = 1e-4


@dataclass
class PruneSection:
    base_fraction: float = 0.8
    n: list[int] = field(default_factory=lambda: [0])
    k: list[float] = field(default_factory=lambda: [0.0])
    policy: list[str] = field(default_factory=lambda: ["none"])
    prune_last_layer: bool = True


@dataclass
class TheorySection:
    iters: int = 200
    tol: float = 1e-6


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    prune: PruneSection = field(default_factory=PruneSection)
    theory: TheorySection = field(default_factory=TheorySection)

    def grid(self) -> list[tuple[str, int, float]]:
        """Distinct ``(policy, n, k)`` cells; ``none`` ignores n and k."""
        cells = []
        for policy, n, k in itertools.product(self.prune.policy, self.prune.n, self.prune.k):
            cell = (policy, 0, 0.0) if policy == "none" else (policy, n, k)
            if cell not in cells:
                cells.append(cell)
        return cells

    def validate(self) -> "ExperimentConfig":
        d = self.data
        if d.dataset not in ("auto", "idx", "digits", "synthetic"):
            raise ConfigError(f"unknown dataset {d.dataset!r}")
        if d.benchmark not in ("permuted", "split"):
            raise ConfigError(f"unknown benchmark {d.benchmark!r}")
        if d.num_tasks < 1:
            raise ConfigError("num_tasks must be at least 1")
        if self.run.encoding not in ("label", "unweighted"):
            raise ConfigError(f"unknown encoding {self.run.encoding!r}")
        if self.run.trials < 1:
            raise ConfigError("trials must be at least 1")
        for p in self.prune.policy:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy {p!r}")
        if self.network.activation not in ("relu", "tanh", "identity"):
            raise ConfigError(f"unknown hidden activation {self.network.activation!r}")
        return self


SECTIONS = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _convert(raw: str, annotation: str):
    raw = raw.strip()
    if annotation.startswith("list["):
        inner = annotation[5:-1]
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return [_convert(s, inner) for s in items]
    if "None" in annotation:
        return None if raw in ("", "none", "None") else float(raw)
    if annotation == "bool":
        return _parse_bool(raw)
    if annotation == "int":
        return int(raw)
    if annotation == "float":
        return float(raw)
    return raw


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, section)
        known = {f.name: f for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                value = _convert(raw, str(known[key].type))
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
            setattr(target, key, value)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_render(v) for v in value)
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config(dump_config(c)) == c``."""
    out = []
    for name in SECTIONS:
        out.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in fields(section):
            out.append(f"{f.name} = {_render(getattr(section, f.name))}")
        out.append("")
    return "\n".join(out)
