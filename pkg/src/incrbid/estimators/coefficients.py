"""Fitted coefficient container and its JSON form."""

from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from ..features import FeatureKey

DIAGNOSTIC_DEFAULTS = {"r_squared": 0.0, "gmm_objective": 0.0, "hausman_H": 0.0, "hausman_dof": 0}


def _key_to_json(k) -> Any:
    return k.to_dict() if isinstance(k, FeatureKey) else str(k)


def _key_from_json(d) -> Any:
    return FeatureKey.from_dict(d) if isinstance(d, Mapping) else str(d)


@dataclass
class CoefficientSet:
    """Coefficients aligned with ``keys`` plus bootstrap draws and fit diagnostics."""

    keys: tuple
    beta: np.ndarray
    lambda_ridge: float = 0.0
    lambda_hcc: float = 0.0
    draws: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    diagnostics: dict = field(default_factory=lambda: dict(DIAGNOSTIC_DEFAULTS))
    feature_config_hash: str = ""

    def __post_init__(self) -> None:
        self.keys = tuple(self.keys)
        self.beta = np.asarray(self.beta, dtype=float).ravel()
        if len(self.beta) != len(self.keys):
            raise ValueError("beta must have one entry per key")
        d = np.asarray(self.draws, dtype=float)
        self.draws = d.reshape(0, len(self.keys)) if d.size == 0 else d
        if self.draws.shape[1] != len(self.keys):
            raise ValueError("draws must share the key set")
        diag = dict(DIAGNOSTIC_DEFAULTS)
        diag.update(self.diagnostics)
        for name, v in diag.items():
            if isinstance(v, (int, float)) and not math.isfinite(v):
                raise ValueError(f"diagnostic {name} is not finite")
        self.diagnostics = diag

    @property
    def beta_map(self) -> dict:
        return dict(zip(self.keys, self.beta.tolist()))

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def select_draw(self, i: int) -> CoefficientSet:
        return replace(self, beta=self.draws[i].copy())

    @classmethod
    def from_map(cls, beta: Mapping, **kw) -> CoefficientSet:
        keys = tuple(beta)
        return cls(keys, np.array([beta[k] for k in keys], dtype=float), **kw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "keys": [_key_to_json(k) for k in self.keys],
            "beta": self.beta.tolist(),
            "lambda_ridge": self.lambda_ridge,
            "lambda_hcc": self.lambda_hcc,
            "draws": self.draws.tolist(),
            "diagnostics": self.diagnostics,
            "feature_config_hash": self.feature_config_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CoefficientSet:
        keys = tuple(_key_from_json(k) for k in d["keys"])
        draws = np.asarray(d.get("draws", []), dtype=float)
        return cls(keys, np.asarray(d["beta"], dtype=float), float(d.get("lambda_ridge", 0.0)),
                   float(d.get("lambda_hcc", 0.0)), draws.reshape(-1, len(keys)) if draws.size else draws,
                   dict(d.get("diagnostics", {})), str(d.get("feature_config_hash", "")))

    @classmethod
    def from_json(cls, text: str) -> CoefficientSet:
        return cls.from_dict(json.loads(text))

    def aligned(self, keys: Sequence) -> np.ndarray:
        """Coefficients reordered to ``keys`` (missing keys raise ``KeyError``)."""
        m = self.beta_map
        return np.array([m[k] for k in keys], dtype=float)
