"""JSON experiment configuration."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError
from .facto import CUBE_DIRECTIONS, EPS_RANK, ISO_LEVEL

DEFAULT_GAMMA_SIGNS = {1: 1, 2: -1, 3: 1}  # skin, skull, brain

_KNOWN = {
    "name", "data_mesh", "recon_mesh", "electrode_tags", "contact_impedance", "background",
    "inclusions", "patterns", "noise", "mode", "grid", "directions", "eps_rank", "inner_product",
    "iso_level", "gamma", "gamma_signs", "output_dir", "allow_inverse_crime", "sweep", "cache_dir",
    "description",
}


@dataclass
class ExperimentConfig:
    name: str
    data_mesh: Path
    recon_mesh: Path
    electrode_tags: list
    background: dict
    patterns: dict
    contact_impedance: float = 5.0
    inclusions: list = field(default_factory=list)
    delta: float = 0.0
    seed: int = 0
    noise_target: str = "difference"
    mode: str = "exact"
    grid_shape: tuple = (32, 32, 32)
    grid_margin: float = 1.0
    directions: np.ndarray = field(default_factory=lambda: CUBE_DIRECTIONS.copy())
    eps_rank: float = EPS_RANK
    rank: Optional[int] = None
    inner_product: str = "euclidean"
    iso_level: float = ISO_LEVEL
    gamma: float = 0.0
    gamma_signs: dict = field(default_factory=lambda: dict(DEFAULT_GAMMA_SIGNS))
    output_dir: Optional[Path] = None
    cache_dir: Optional[Path] = None
    allow_inverse_crime: bool = False
    sweep: dict = field(default_factory=dict)
    source: Optional[Path] = None
    raw: dict = field(default_factory=dict)

    # ---- construction ----------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict, base: Optional[Path] = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(d) - _KNOWN
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        base = Path(base) if base is not None else Path.cwd()

        def need(key):
            if key not in d:
                raise ConfigError(f"missing configuration key {key!r}")
            return d[key]

        def path(key):
            p = Path(need(key))
            return p if p.is_absolute() else base / p

        noise = d.get("noise", {}) or {}
        grid = d.get("grid", {}) or {}
        dirs = d.get("directions", "cube")
        if isinstance(dirs, str):
            if dirs != "cube":
                raise ConfigError(f"unknown direction set {dirs!r}")
            dirs = CUBE_DIRECTIONS.copy()
        else:
            dirs = np.asarray(dirs, dtype=float)
            if dirs.ndim != 2 or dirs.shape[1] != 3 or (np.linalg.norm(dirs, axis=1) == 0).any():
                raise ConfigError("directions must be a list of nonzero 3-vectors")
            dirs = dirs / np.linalg.norm(dirs, axis=1)[:, None]
        try:
            cfg = cls(
                name=str(d.get("name", "experiment")),
                data_mesh=path("data_mesh"),
                recon_mesh=path("recon_mesh"),
                electrode_tags=[int(t) for t in need("electrode_tags")],
                background={int(k): float(v) for k, v in need("background").items()},
                patterns=dict(need("patterns")),
                contact_impedance=float(d.get("contact_impedance", 5.0)),
                inclusions=[{"center": [float(c) for c in inc["center"]], "radius": float(inc["radius"]),
                             "value": float(inc["value"])} for inc in d.get("inclusions", [])],
                delta=float(noise.get("delta", 0.0)),
                seed=int(noise.get("seed", 0)),
                noise_target=str(noise.get("target", "difference")),
                mode=str(d.get("mode", "exact")),
                grid_shape=tuple(int(n) for n in grid.get("shape", (32, 32, 32))),
                grid_margin=float(grid.get("margin", 1.0)),
                directions=dirs,
                eps_rank=float(d.get("eps_rank", EPS_RANK)),
                rank=None if d.get("rank") is None else int(d["rank"]),
                inner_product=str(d.get("inner_product", "euclidean")),
                iso_level=float(d.get("iso_level", ISO_LEVEL)),
                gamma=float(d.get("gamma", 0.0)),
                gamma_signs={int(k): int(v) for k, v in d.get("gamma_signs", DEFAULT_GAMMA_SIGNS).items()},
                output_dir=None if d.get("output_dir") is None else (
                    Path(d["output_dir"]) if Path(d["output_dir"]).is_absolute() else base / d["output_dir"]),
                cache_dir=None if d.get("cache_dir") is None else (
                    Path(d["cache_dir"]) if Path(d["cache_dir"]).is_absolute() else base / d["cache_dir"]),
                allow_inverse_crime=bool(d.get("allow_inverse_crime", False)),
                sweep=dict(d.get("sweep", {})),
                raw=copy.deepcopy(d),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed configuration: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, allow_inverse_crime: bool = False) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"configuration file {path} does not exist")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(exc.msg, exc.lineno) from exc
        if allow_inverse_crime and isinstance(d, dict):
            d["allow_inverse_crime"] = True
        cfg = cls.from_dict(d, base=path.parent)
        cfg.source = path
        return cfg

    # ---- checks ----------------------------------------------------------
    def validate(self, check_files: bool = True) -> None:
        if check_files:
            for p in (self.data_mesh, self.recon_mesh):
                if not p.is_file():
                    raise ConfigError(f"mesh file {p} does not exist")
        if self.delta < 0:
            raise ConfigError("noise level must be non-negative")
        if not 0 < self.iso_level < 1:
            raise ConfigError("iso level must lie in (0, 1)")
        if self.mode not in ("exact", "free_space", "ntd_shortcut"):
            raise ConfigError(f"unknown dipole mode {self.mode!r}")
        if self.noise_target not in ("difference", "per_map"):
            raise ConfigError("noise target must be 'difference' or 'per_map'")
        if self.contact_impedance <= 0:
            raise ConfigError("contact impedance must be positive")
        if self.gamma < 0 or self.gamma >= 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if len(self.grid_shape) != 3 or min(self.grid_shape) < 1:
            raise ConfigError("grid shape needs three positive counts")
        if self.inner_product not in ("euclidean", "area"):
            raise ConfigError(f"unknown inner product {self.inner_product!r}")
        if not self.allow_inverse_crime and self.data_mesh.resolve() == self.recon_mesh.resolve():
            raise ConfigError("data and reconstruction meshes coincide (inverse crime); "
                              "set allow_inverse_crime to proceed")

    # ---- derived ---------------------------------------------------------
    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Copy with some fields replaced (CLI flags, sweeps), re-validated."""
        new = copy.copy(self)
        raw = copy.deepcopy(self.raw)
        for k, v in kw.items():
            if v is None:
                continue
            if not hasattr(new, k):
                raise ConfigError(f"unknown override {k!r}")
            setattr(new, k, v)
            if k in ("delta", "seed"):
                raw.setdefault("noise", {})[k] = v
            else:
                raw[k] = str(v) if isinstance(v, Path) else v
        new.raw = raw
        new.validate(check_files=False)
        return new

    def echo(self) -> dict:
        """Resolved configuration for embedding in outputs."""
        return {
            "name": self.name,
            "data_mesh": str(self.data_mesh),
            "recon_mesh": str(self.recon_mesh),
            "electrode_tags": list(self.electrode_tags),
            "contact_impedance": self.contact_impedance,
            "background": {str(k): v for k, v in sorted(self.background.items())},
            "inclusions": self.inclusions,
            "patterns": self.patterns,
            "noise": {"delta": self.delta, "seed": self.seed, "target": self.noise_target},
            "mode": self.mode,
            "grid": {"shape": list(self.grid_shape), "margin": self.grid_margin},
            "directions": np.round(self.directions, 15).tolist(),
            "eps_rank": self.eps_rank,
            "rank": self.rank,
            "inner_product": self.inner_product,
            "iso_level": self.iso_level,
            "gamma": self.gamma,
            "gamma_signs": {str(k): v for k, v in sorted(self.gamma_signs.items())},
            "allow_inverse_crime": self.allow_inverse_crime,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.echo(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def true_centers(self) -> np.ndarray:
        return np.array([inc["center"] for inc in self.inclusions], dtype=float).reshape(-1, 3)

    @property
    def output_path(self) -> Path:
        if self.output_dir is not None:
            return self.output_dir
        base = self.source.parent if self.source is not None else Path.cwd()
        return base / "out" / self.name
