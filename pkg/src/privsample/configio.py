"""Run-configuration files: loading, validation and hashing.

System files are JSON with keys ``A``, ``Q``, ``P0``, ``mean0``, ``nx``,
``ny``, ``K``, ``seed`` (see README for the full schema). Finite models
use the same format with keys ``x_kernel``, ``y_kernel``, ``init_joint``,
``distortion``. Schedules serialize as ``kind`` / ``f_chol`` / ``g`` /
``feedback``.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation
from .finite import FiniteModel
from .lingauss import LinearGaussianSystem
from .policy import SamplerSchedule


def load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc


def system_from_config(cfg: dict) -> LinearGaussianSystem:
    try:
        nx, ny = int(cfg["nx"]), int(cfg["ny"])
        a = np.asarray(cfg["A"], dtype=float)
        q = np.asarray(cfg["Q"], dtype=float)
        p0 = np.asarray(cfg["P0"], dtype=float)
        mean0 = np.asarray(cfg.get("mean0", np.zeros(nx + ny)), dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad system config: {exc}") from exc
    try:
        return LinearGaussianSystem(
            a_matrix=a, q_cov=q, init_mean=mean0, init_cov=p0, n_x=nx, n_y=ny
        )
    except ContractViolation as exc:
        raise ConfigError(f"system config rejected: {exc}") from exc


def load_system(path) -> tuple[LinearGaussianSystem, dict]:
    cfg = load_json(path)
    return system_from_config(cfg), cfg


def finite_model_from_config(cfg: dict) -> FiniteModel:
    try:
        return FiniteModel(
            x_kernel=np.asarray(cfg["x_kernel"], dtype=float),
            y_kernel=np.asarray(cfg["y_kernel"], dtype=float),
            init_joint=np.asarray(cfg["init_joint"], dtype=float),
            distortion=np.asarray(cfg["distortion"], dtype=float),
        )
    except KeyError as exc:
        raise ConfigError(f"finite model config missing key {exc}") from exc
    except ContractViolation as exc:
        raise ConfigError(f"finite model config rejected: {exc}") from exc


def load_schedule(path) -> SamplerSchedule:
    cfg = load_json(path)
    try:
        return SamplerSchedule.from_config(cfg)
    except (KeyError, ContractViolation) as exc:
        raise ConfigError(f"schedule config rejected: {exc}") from exc


def dump_schedule(schedule: SamplerSchedule, path):
    Path(path).write_text(json.dumps(schedule.to_config(), indent=2) + "\n")


def config_hash(cfg: dict) -> str:
    """Stable short hash of a configuration mapping."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
