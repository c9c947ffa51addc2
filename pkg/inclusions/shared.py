"""
InclusionSentinel Shared Infrastructure

This module provides common utilities, constants, and error types used by every stage of the
InclusionSentinel toolkit.
It handles:
- Environment variable loading and validation.
- JSON configuration overrides for the CLI and the HTTP backend.
- Shared constants like the tank geometry and the inclusion radius classes.
- The exception hierarchy raised by the numerical modules.
- Stage output logging to the run log (one JSON object per line).
"""

import os
import json
from pathlib import Path
from typing import Dict, List, Any, Optional
from uuid import UUID
from datetime import datetime

from dotenv import load_dotenv

# ============================================================================
# Environment Configuration & Validation
# ============================================================================

load_dotenv()

RUNS_DIR = os.getenv('EIT_RUNS_DIR', 'runs')
TANK_RADIUS = os.getenv('EIT_TANK_RADIUS', '0.28')
MESH_MAX_EDGE = os.getenv('EIT_MESH_MAX_EDGE', '0.0138')
NOISE_SCALE = os.getenv('EIT_NOISE_SCALE', '0.01')
WORKERS = os.getenv('EIT_WORKERS', '1')
FLUX_METHOD = os.getenv('EIT_FLUX_METHOD', 'residual')
REFINE_INCLUSIONS = os.getenv('EIT_REFINE_INCLUSIONS', 'false')
SERVER_PORT = os.getenv('EIT_SERVER_PORT', '8000')

FLUX_METHODS = ("residual", "element_average")


def _parse_bool(value: str) -> bool:
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def default_config() -> Dict[str, Any]:
    """Typed configuration built from the environment."""
    return {
        "runs_dir": RUNS_DIR,
        "tank_radius": float(TANK_RADIUS),
        "mesh_max_edge": float(MESH_MAX_EDGE),
        "noise_scale": float(NOISE_SCALE),
        "workers": int(WORKERS),
        "flux_method": FLUX_METHOD,
        "refine_inclusions": _parse_bool(REFINE_INCLUSIONS),
        "server_port": int(SERVER_PORT),
    }


def validate_environment() -> bool:
    """Validates that all environment variables parse and are in range."""
    raw_vars = {
        'EIT_TANK_RADIUS': (TANK_RADIUS, float),
        'EIT_MESH_MAX_EDGE': (MESH_MAX_EDGE, float),
        'EIT_NOISE_SCALE': (NOISE_SCALE, float),
        'EIT_WORKERS': (WORKERS, int),
        'EIT_SERVER_PORT': (SERVER_PORT, int),
    }
    invalid_vars = []
    for key, (val, cast) in raw_vars.items():
        try:
            cast(val)
        except (TypeError, ValueError):
            invalid_vars.append(key)

    if invalid_vars:
        print(f"ERROR: Unparseable environment variables: {', '.join(invalid_vars)}")
        return False

    try:
        validate_config(default_config())
    except ValueError as e:
        print(f"ERROR: {e}")
        return False

    if float(NOISE_SCALE) == 0:
        print("WARNING: EIT_NOISE_SCALE is 0. Simulated D-N matrices will be noise free.")
    return True


def validate_config(config: Dict[str, Any]) -> Dict[str, Any]:
    """Range checks shared by the environment and JSON overrides."""
    if config["tank_radius"] <= 0:
        raise ValueError(f"tank_radius must be positive, got {config['tank_radius']}")
    if not 0 < config["mesh_max_edge"] < config["tank_radius"]:
        raise ValueError(f"mesh_max_edge must lie in (0, tank_radius), got {config['mesh_max_edge']}")
    if config["noise_scale"] < 0:
        raise ValueError(f"noise_scale must be non-negative, got {config['noise_scale']}")
    if config["workers"] < 1:
        raise ValueError(f"workers must be >= 1, got {config['workers']}")
    if config["flux_method"] not in FLUX_METHODS:
        raise ValueError(f"flux_method must be one of {FLUX_METHODS}, got {config['flux_method']!r}")
    return config


def load_config(path: Optional[str] = None) -> Dict[str, Any]:
    """Merges a JSON object from `path` over the environment defaults."""
    config = default_config()
    if path is None:
        return validate_config(config)

    with open(path, "r", encoding="utf-8") as fh:
        overrides = json.load(fh)
    if not isinstance(overrides, dict):
        raise ValueError(f"Config file {path} must contain a JSON object.")

    unknown = sorted(set(overrides) - set(config))
    if unknown:
        raise ValueError(f"Unknown config keys in {path}: {', '.join(unknown)}")

    for key, value in overrides.items():
        config[key] = type(config[key])(value) if not isinstance(config[key], bool) else _parse_bool(value)
    return validate_config(config)

# ============================================================================
# Core Constants
# ============================================================================

# Tank and inclusion conductivities (S/m).
LAMBDA_TANK = 1.45
LAMBDA_INC_RANGE = (8.0, 10.0)
LAMBDA_INC_FIXED = 10.0
MU_TANK = 1.45
MU_INC = 10.0
SPATIAL_CLAMP = 1e-3

# Inclusion radius classes (meters), keyed by class label.
RADIUS_CLASSES: Dict[int, float] = {
    1: 0.0097,
    2: 0.0194,
    3: 0.0291,
    4: 0.0388,
}

BOUNDARY_CLEARANCE = 0.010
INCLUSION_SPACING = 0.010

DEFAULT_ELECTRODES = 16
DEFAULT_HIDDEN_UNITS = 64

# ============================================================================
# Error Types
# ============================================================================


class InclusionSentinelError(Exception):
    """Base class for every error raised by the toolkit."""


class MeshError(InclusionSentinelError):
    pass


class PlacementError(InclusionSentinelError):
    pass


class EllipticityError(InclusionSentinelError):
    def __init__(self, message: str, point=None):
        super().__init__(message)
        self.point = point


class SolverError(InclusionSentinelError):
    def __init__(self, message: str, residual_history: Optional[List[float]] = None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


class SingularMatrixError(InclusionSentinelError):
    pass


class IngestError(InclusionSentinelError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        super().__init__(message)
        self.line_number = line_number


class TrainingError(InclusionSentinelError):
    pass


class ConvergenceError(InclusionSentinelError):
    def __init__(self, message: str, violations: int = 0):
        super().__init__(message)
        self.violations = violations


def error_payload(exc: BaseException) -> Dict[str, Any]:
    """Machine-readable description of a failure."""
    payload = {"status": "failed", "error_type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, SolverError):
        payload["residual_history"] = exc.residual_history
    if isinstance(exc, ConvergenceError):
        payload["violations"] = exc.violations
    if isinstance(exc, IngestError) and exc.line_number is not None:
        payload["line_number"] = exc.line_number
    return payload

# ============================================================================
# Run Log Helpers
# ============================================================================


def _stage_log_path(runs_dir: Optional[str] = None) -> Path:
    return Path(runs_dir or RUNS_DIR) / "stage_logs.jsonl"


def log_stage_output(stage_name: str, run_id: UUID, payload: Dict[str, Any], summary: str,
                     runs_dir: Optional[str] = None) -> bool:
    """Appends a log entry to the run log."""
    path = _stage_log_path(runs_dir)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        entry = {
            "stage_name": stage_name,
            "run_id": str(run_id),
            "payload": payload,
            "summary": summary,
            "created_at": datetime.now().isoformat(),
        }
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, default=str) + "\n")
        return True
    except OSError as e:
        print(f"ERROR: Failed to log stage output for {stage_name}: {e}")
        return False


def get_stage_logs(run_id: UUID, stage_name: Optional[str] = None,
                   runs_dir: Optional[str] = None) -> List[Dict[str, Any]]:
    """Fetches run log entries for a specific run, optionally filtered by stage name."""
    path = _stage_log_path(runs_dir)
    if not path.exists():
        return []
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            if entry.get("run_id") != str(run_id):
                continue
            if stage_name and entry.get("stage_name") != stage_name:
                continue
            entries.append(entry)
    return entries


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    """Writes JSON with stable key order and full float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
