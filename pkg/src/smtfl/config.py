"""Scenario configuration: a flat TOML file, one key per parameter.

Unknown keys are rejected so a typo can never silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adversary import AdversaryKind, KINDS
from .learning import ARCHITECTURES, LOGISTIC
from .vault import DEFAULT_PRIME, ThresholdPolicy

FULL_SCALE_CLIENTS = 150


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    # data
    dataset: str = "blobs"  # "blobs" or a path to a small-image text file
    n_samples: int = 3000
    n_features: int = 20
    n_classes: int = 10
    blob_noise: float = 1.0
    blob_spread: float = 1.0
    validation_size: int = 500
    test_size: int = 1000
    # model / training
    model: str = LOGISTIC
    n_hidden: int = 32
    lr: float | None = None
    epochs_local: int = 1
    epochs_global: int = 30
    batch_size: int = 20
    # federation
    m: int = 30
    rate_iid: float = 0.5
    malicious_fraction: float = 0.25
    adversary: str = "random_update"
    sigma: float = 1.0
    multiplier: float = -1.0
    flip_permute: bool = False
    attack_rate: float = 1.0
    epsilon_amplitude: float = 1.0
    scatter_flagged: bool = False
    # detection
    tau: float = 0.01
    thre_eva: int = 6
    thre_eva_reading: str = "negative"  # "negative": bound = -|thre_eva|; "literal": bound = thre_eva
    # escrow
    shamir_t: int | None = None
    shamir_p: int = DEFAULT_PRIME
    # run control
    seed: int = 0
    workers: int = 1
    paired: bool = True
    out_dir: str = "out"
    figures: bool = True

    def __post_init__(self):
        problems = []
        if not 0.0 <= self.malicious_fraction <= 0.5:
            problems.append("malicious_fraction must lie in [0, 0.5]")
        if self.m < 3:
            problems.append("m must be >= 3")
        if not 0.0 <= self.rate_iid <= 1.0:
            problems.append("rate_iid must lie in [0, 1]")
        if self.adversary not in KINDS:
            problems.append(f"adversary must be one of {KINDS}")
        if self.model not in ARCHITECTURES:
            problems.append(f"model must be one of {ARCHITECTURES}")
        if not self.tau > 0:
            problems.append("tau must be positive")
        if self.thre_eva_reading not in ("negative", "literal"):
            problems.append("thre_eva_reading must be 'negative' or 'literal'")
        if self.epochs_global < 1 or self.epochs_local < 1 or self.batch_size < 1:
            problems.append("epochs_global, epochs_local and batch_size must be >= 1")
        if self.lr is not None and not self.lr >= 0:
            problems.append("lr must be non-negative")
        if self.dataset == "blobs" and self.n_samples < self.m:
            problems.append("n_samples must be >= m")
        if self.validation_size < 1 or self.test_size < 1:
            problems.append("validation_size and test_size must be >= 1")
        if not 0.0 <= self.attack_rate <= 1.0:
            problems.append("attack_rate must lie in [0, 1]")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if self.shamir_t is not None and not 1 <= self.shamir_t <= self.m - 1:
            problems.append("shamir_t must satisfy 1 <= t <= m-1")
        try:
            AdversaryKind(self.adversary, self.sigma, self.multiplier, self.flip_permute)
        except ValueError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def eviction_bound(self) -> int:
        if self.thre_eva_reading == "literal":
            return self.thre_eva
        return -abs(self.thre_eva)

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.1 if self.model == LOGISTIC else 0.05

    @property
    def n_malicious(self) -> int:
        return int(math.floor(self.malicious_fraction * self.m + 1e-9))

    @property
    def policy(self) -> ThresholdPolicy:
        t = self.shamir_t if self.shamir_t is not None else max(1, math.ceil((self.m - 1) / 2))
        return ThresholdPolicy(self.m, t, self.shamir_p)

    @property
    def adversary_kind(self) -> AdversaryKind:
        return AdversaryKind(self.adversary, self.sigma, self.multiplier, self.flip_permute)

    def replace(self, **changes) -> "ScenarioConfig":
        try:
            return dataclasses.replace(self, **changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def full_scale(self) -> "ScenarioConfig":
        """The 150-client setup, keeping the per-client sample count."""
        per_client = max(1, self.n_samples // self.m)
        return self.replace(m=FULL_SCALE_CLIENTS, n_samples=per_client * FULL_SCALE_CLIENTS)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def known_keys() -> set[str]:
    return {f.name for f in fields(ScenarioConfig)}


def from_mapping(data: dict) -> ScenarioConfig:
    unknown = sorted(set(data) - known_keys())
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return ScenarioConfig(**data)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    try:
        return from_mapping(data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_grid(path) -> dict[str, list]:
    """A sweep grid: TOML mapping of config key -> list of values."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"grid file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = sorted(set(data) - known_keys())
    if unknown:
        raise ConfigError(f"unknown grid keys: {', '.join(unknown)}")
    grid = {k: (v if isinstance(v, list) else [v]) for k, v in data.items()}
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("sweep grid is empty")
    return grid
