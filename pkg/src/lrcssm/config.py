"""Flat key=value run configuration.

The file format is one `section.key=value` pair per line, with '#' comments
and blank lines allowed.  Sections are model.*, solver.*, train.*, grid.* and
data.*; unknown keys are rejected so typos fail loudly before any compute.

    model.hidden_dim=64
    solver.tol=1e-6
    train.lr=1e-3
    grid.lr=1e-4,1e-3
    data.path=heartbeat.ts
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigurationError
from .model import ModelConfig
from .solver import SolverConfig
from .train import TrainConfig


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _float_list(s: str):
    return tuple(float(v) for v in s.split(","))


def _int_list(s: str):
    return tuple(int(v) for v in s.split(","))


# key -> (parser, default); None default means "unset"
KEY_TABLE = {
    "model.input_dim": (int, None),        # inferred from data when unset
    "model.hidden_dim": (int, 16),
    "model.state_dim": (int, 16),
    "model.num_blocks": (int, 2),
    "model.num_classes": (int, None),      # inferred from data when unset
    "model.dt": (float, 1.0),
    "model.dependence_mode": (str, "full"),
    "model.rho_clamp": (float, None),
    "model.pool": (str, "last"),
    "model.dtype": (str, "float64"),
    "model.seed": (int, 0),
    "solver.tol": (float, 1e-9),
    "solver.max_iters": (int, 50),
    "solver.mode": (str, "newton_scan"),
    "solver.trust_ratio": (float, 10.0),
    "train.lr": (float, 1e-3),
    "train.batch_size": (int, 32),
    "train.max_epochs": (int, 500),
    "train.patience": (int, 20),
    "train.seed": (int, 0),
    "train.target_val_acc": (float, None),
    "train.shards": (int, 1),
    "grid.lr": (_float_list, None),
    "grid.hidden": (_int_list, None),
    "grid.state": (_int_list, None),
    "grid.blocks": (_int_list, None),
    "data.path": (str, None),
    "data.split_seed": (int, 0),
    "data.seeds": (_int_list, (0, 1, 2, 3, 4)),
    "data.fractions": (_float_list, (0.7, 0.15, 0.15)),
    "data.normalize": (_parse_bool, True),
    "data.synth_kind": (str, None),
    "data.synth_t": (int, 256),
    "data.synth_p": (int, 2),
    "data.synth_n": (int, 1000),
    "data.synth_seed": (int, 42),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        if key not in KEY_TABLE:
            raise ConfigurationError(f"unknown config key {key!r}")
        return self.values.get(key, KEY_TABLE[key][1])

    def set(self, key: str, raw: str) -> None:
        if key not in KEY_TABLE:
            raise ConfigurationError(f"unknown config key {key!r}")
        parser = KEY_TABLE[key][0]
        try:
            self.values[key] = parser(raw)
        except (ValueError, TypeError) as e:
            raise ConfigurationError(f"bad value for {key}: {raw!r} ({e})") from None

    def model_config(self, input_dim=None, num_classes=None) -> ModelConfig:
        in_dim = self["model.input_dim"] if self["model.input_dim"] else input_dim
        classes = self["model.num_classes"] if self["model.num_classes"] else num_classes
        if in_dim is None or classes is None:
            raise ConfigurationError(
                "model.input_dim / model.num_classes unset and no dataset to infer from")
        cfg = ModelConfig(
            input_dim=in_dim, hidden_dim=self["model.hidden_dim"],
            state_dim=self["model.state_dim"], num_blocks=self["model.num_blocks"],
            num_classes=classes, dt=self["model.dt"],
            dependence_mode=self["model.dependence_mode"],
            rho_clamp=self["model.rho_clamp"],
            solver=self.solver_config(), seed=self["model.seed"],
            pool=self["model.pool"], dtype=self["model.dtype"])
        cfg.validate()
        return cfg

    def solver_config(self) -> SolverConfig:
        cfg = SolverConfig(tol=self["solver.tol"], max_iters=self["solver.max_iters"],
                           mode=self["solver.mode"],
                           trust_ratio=self["solver.trust_ratio"])
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(
            lr=self["train.lr"], batch_size=self["train.batch_size"],
            max_epochs=self["train.max_epochs"], patience=self["train.patience"],
            seed=self["train.seed"], target_val_acc=self["train.target_val_acc"],
            shards=self["train.shards"])
        grid = {}
        for axis in ("lr", "hidden", "state", "blocks"):
            vals = self[f"grid.{axis}"]
            if vals is not None:
                grid[axis] = vals
        if grid:
            cfg.grid = {**cfg.grid, **grid}
        cfg.validate()
        return cfg

    def resolved_lines(self):
        """Every known key with its effective value, for the config echo."""
        for key in KEY_TABLE:
            val = self[key]
            if val is None:
                continue
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            yield f"{key}={val}"


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from None
