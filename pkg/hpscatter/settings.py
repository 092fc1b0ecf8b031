"""
Run configuration for the command-line driver.

Values are layered: built-in defaults, then ``HPSCATTER_*`` environment
variables (a ``.env`` file is honoured through python-dotenv), then a flat
``key = value`` config file, then ``--set key=value`` overrides.

Config file example:

    # 1 lambda sphere at 300 MHz
    geometry = sphere
    radius = 1.0
    formulation = cfie
    alpha = 0.5
    leaf_factor = 0.5
    sweep_mode = bistatic

Environment Variables:
    HPSCATTER_OUTPUT_DIR: Directory for reports and CSV files (default: ./output)
    HPSCATTER_CACHE_DIR: H-matrix cache directory (default: disabled)
    HPSCATTER_WORKERS: Parallel block/angle workers (default: 1)
    HPSCATTER_DENSE_CAP: Largest N for dense oracle paths (default: 8000)
    HPSCATTER_LOG_LEVEL: DEBUG, INFO, WARNING or ERROR (default: INFO)
"""

import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

from scipy import constants

from hpscatter.em_operator import Formulation, Polarization
from hpscatter.errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "HPSCATTER_"
ENV_KEYS = ("output_dir", "cache_dir", "workers", "dense_cap", "log_level")
GEOMETRIES = ("sphere", "plate", "cube", "mesh")
SWEEP_MODES = ("bistatic", "monostatic")
SWEEP_CUTS = ("theta", "phi")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{text}'")


def _parse_float_list(text: str) -> List[float]:
    return [float(item) for item in text.replace(";", ",").split(",") if item.strip()]


def _parse_int_list(text: str) -> List[int]:
    return [int(item) for item in text.replace(";", ",").split(",") if item.strip()]


@dataclass
class RunConfig:
    # geometry
    geometry: str = "sphere"
    radius: float = 0.5  # m
    side: float = 1.0  # m
    divisions: Optional[int] = None
    elements_per_wavelength: float = 10.0
    mesh_path: Optional[str] = None
    mesh_format: Optional[str] = None

    # physics
    frequency: float = 300e6  # Hz
    formulation: Formulation = Formulation.CFIE
    alpha: float = 0.5

    # tree and compression
    leaf_factor: float = 0.5  # smallest leaf box side in wavelengths
    eta: float = 1.0
    aca_tolerance: float = 1e-4
    aca_max_rank: Optional[int] = None
    symmetrize_near: bool = False

    # series
    n_terms: int = 2
    threshold: float = 0.1
    adaptive: bool = False
    max_terms: int = 8

    # excitation and sweep
    polarization: Polarization = Polarization.VV
    incident_theta: float = 0.0  # deg
    incident_phi: float = 0.0  # deg
    sweep_mode: str = "bistatic"
    sweep_cut: str = "theta"
    sweep_start: float = 0.0
    sweep_stop: float = 180.0
    sweep_step: float = 1.0
    fixed_angle: float = 0.0  # deg, phi for theta cuts and theta for phi cuts

    # baseline
    compare_gmres: bool = False
    gmres_tol: float = 1e-6
    gmres_restart: int = 50
    gmres_max_iters: int = 1000

    # studies
    sweep_sizes: Tuple[int, ...] = (2, 3, 4)  # refinement levels: geodesic nu or plate/cube divisions
    leaf_factors: Tuple[float, ...] = ()
    compute_conditions: bool = False
    xlsx: bool = False

    # runtime
    output_dir: str = "./output"
    cache_dir: Optional[str] = None
    cache_max_age: int = 3600  # seconds
    workers: int = 1
    dense_cap: int = 8000
    seed: int = 0  # ACA check-row draw
    deterministic: bool = True  # fixed accumulation order in the far-field product
    log_level: str = "INFO"

    @property
    def wavelength(self) -> float:
        return constants.c / self.frequency

    @property
    def target_edge(self) -> float:
        return self.wavelength / self.elements_per_wavelength

    def sweep_angles(self) -> List[float]:
        count = int(round((self.sweep_stop - self.sweep_start) / self.sweep_step)) + 1
        return [self.sweep_start + k * self.sweep_step for k in range(count)]

    def as_dict(self) -> Dict[str, object]:
        record = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (Formulation, Polarization)):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            record[f.name] = value
        return record

    def validate(self) -> "RunConfig":
        """Cross-field checks; raises ConfigError naming the constraint"""
        if self.geometry not in GEOMETRIES:
            raise ConfigError(f"geometry must be one of {GEOMETRIES}, got '{self.geometry}'")
        if self.geometry == "mesh" and not self.mesh_path:
            raise ConfigError("geometry = mesh needs mesh_path")
        if self.frequency <= 0:
            raise ConfigError(f"frequency must be positive, got {self.frequency}")
        if self.radius <= 0 or self.side <= 0:
            raise ConfigError("radius and side must be positive")
        if self.divisions is not None and self.divisions < 1:
            raise ConfigError(f"divisions must be at least 1, got {self.divisions}")
        if self.elements_per_wavelength <= 0:
            raise ConfigError("elements_per_wavelength must be positive")
        if self.geometry == "sphere" and self.target_edge >= self.radius:
            raise ConfigError(
                f"Mesh edge {self.target_edge:.4g} m is not smaller than the sphere radius {self.radius} m; "
                "raise elements_per_wavelength or the radius"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.geometry == "plate" and self.formulation is not Formulation.EFIE and not (
            self.formulation is Formulation.CFIE and self.alpha == 1.0
        ):
            raise ConfigError(
                f"{self.formulation.name} can only be solved for closed objects; "
                "a plate is open, use formulation = efie or alpha = 1"
            )
        if self.leaf_factor <= 0 or self.eta <= 0:
            raise ConfigError("leaf_factor and eta must be positive")
        if any(value <= 0 for value in self.leaf_factors):
            raise ConfigError("leaf_factors must all be positive")
        if not 0.0 < self.aca_tolerance < 1.0:
            raise ConfigError(f"aca_tolerance must lie in (0, 1), got {self.aca_tolerance}")
        if self.n_terms < 1 or self.max_terms < 1:
            raise ConfigError("n_terms and max_terms must be at least 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 <= self.incident_theta <= 180.0 or not 0.0 <= self.incident_phi < 360.0:
            raise ConfigError("incidence needs 0 <= theta <= 180 and 0 <= phi < 360 degrees")
        if self.sweep_mode not in SWEEP_MODES:
            raise ConfigError(f"sweep_mode must be one of {SWEEP_MODES}, got '{self.sweep_mode}'")
        if self.sweep_cut not in SWEEP_CUTS:
            raise ConfigError(f"sweep_cut must be one of {SWEEP_CUTS}, got '{self.sweep_cut}'")
        if self.sweep_step <= 0 or self.sweep_stop < self.sweep_start:
            raise ConfigError("sweep needs sweep_step > 0 and sweep_stop >= sweep_start")
        upper = 180.0 if self.sweep_cut == "theta" else 360.0
        if self.sweep_start < 0.0 or self.sweep_angles()[-1] > upper:
            raise ConfigError(f"{self.sweep_cut} sweep must stay within [0, {upper:g}] degrees")
        if list(self.sweep_sizes) != sorted(self.sweep_sizes) or any(s < 1 for s in self.sweep_sizes):
            raise ConfigError("sweep_sizes must be ascending positive refinement levels")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.dense_cap < 1:
            raise ConfigError("dense_cap must be positive")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {LOG_LEVELS}, got '{self.log_level}'")
        return self


def _converter(name: str, default):
    if name == "formulation":
        return lambda text: Formulation(text.strip().lower())
    if name == "polarization":
        return lambda text: Polarization(text.strip().upper())
    if name == "leaf_factors":
        return lambda text: tuple(_parse_float_list(text))
    if name == "sweep_sizes":
        return lambda text: tuple(_parse_int_list(text))
    if name in ("divisions", "aca_max_rank"):
        return lambda text: None if text.strip().lower() in ("", "none") else int(text)
    if name in ("mesh_path", "mesh_format", "cache_dir"):
        return lambda text: text.strip() or None
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return lambda text: text.strip()


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def parse_value(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"Unknown configuration key '{key}'")
    field = _FIELDS[key]
    default = field.default if field.default is not dataclasses.MISSING else None
    try:
        return _converter(key, default)(text)
    except ValueError as e:
        raise ConfigError(f"Bad value for '{key}': '{text}' ({e})") from e


def read_config_file(path: str) -> Dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment"""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.readlines()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected 'key = value', got '{line}'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def parse_overrides(items: Optional[List[str]]) -> Dict[str, str]:
    values = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' must look like key=value")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def environment_values(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    values = {}
    for key in ENV_KEYS:
        text = environ.get(ENV_PREFIX + key.upper())
        if text:
            values[key] = text
    return values


def load_config(
    path: Optional[str] = None,
    overrides: Optional[List[str]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Merge defaults < environment < config file < overrides, then validate"""
    layers = [environment_values(environ)]
    if path:
        layers.append(read_config_file(path))
    layers.append(parse_overrides(overrides))
    config = RunConfig()
    for layer in layers:
        for key, text in layer.items():
            setattr(config, key, parse_value(key, text))
    config.log_level = config.log_level.upper()
    logger.debug(f"Configuration: {config.as_dict()}")
    return config.validate()
