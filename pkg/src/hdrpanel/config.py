"""Run configuration: simple key = value config files, CLI overrides, and
reproducibility manifests."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    input: Optional[str] = None
    unit_col: str = "unit"
    time_col: str = "time"
    y_col: str = "y"
    link: str = "logit"
    lags: int = 1
    grid_levels: str = "0.01:0.99:0.01"
    debias: str = "analytical"
    nw_lags: Optional[int] = None
    transform: str = "none"
    gtransform: str = "none"
    period: Optional[float] = None
    taus: str = "0.05:0.95:0.01"
    boot_b: int = 500
    boot_level: float = 0.95
    boot_scale: str = "iqr"
    seed: int = 0
    out: str = "out"
    # markov / mobility settings
    pi_jackknife: int = 0  # 1 = half-panel jackknife of the ergodic vectors
    p_levels: str = "0.1,0.25,0.5"
    q_levels: str = "0.1"
    horizons: str = "1,2,5"
    mob_taus: str = "0.1,0.25,0.5,0.75,0.9"

    def validate(self) -> None:
        if self.link not in ("logit", "probit"):
            raise ConfigError(f"link must be logit or probit, got {self.link!r}")
        if self.debias not in ("analytical", "jackknife", "none"):
            raise ConfigError(f"debias must be analytical|jackknife|none, got {self.debias!r}")
        if self.boot_scale not in ("iqr", "sd"):
            raise ConfigError(f"boot_scale must be iqr or sd, got {self.boot_scale!r}")
        if not 0 < self.boot_level < 1:
            raise ConfigError(f"boot_level must be in (0,1), got {self.boot_level}")
        if self.lags < 0:
            raise ConfigError(f"lags must be >= 0, got {self.lags}")
        if self.boot_b < 0:
            raise ConfigError(f"boot_b must be >= 0, got {self.boot_b}")
        if self.nw_lags is not None and self.nw_lags < 0:
            raise ConfigError(f"nw_lags must be >= 0, got {self.nw_lags}")

    def levels(self, spec: Optional[str] = None) -> np.ndarray:
        return parse_levels(spec if spec is not None else self.grid_levels)

    def tau_levels(self) -> np.ndarray:
        return parse_levels(self.taus)

    def to_dict(self) -> dict:
        return asdict(self)


def parse_levels(spec: str) -> np.ndarray:
    """Parse 'a:b:step' ranges or comma lists of probabilities."""
    spec = str(spec).strip()
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"level range must be start:stop:step, got {spec!r}")
        a, b, s = (float(p) for p in parts)
        n = int(round((b - a) / s))
        vals = np.round(a + s * np.arange(n + 1), 12)
        vals = vals[(vals > 0) & (vals < 1)]
    else:
        vals = np.array([float(p) for p in spec.split(",") if p.strip()])
    if vals.size == 0 or np.any(np.diff(vals) <= 0):
        raise ConfigError(f"levels must be strictly increasing in (0,1): {spec!r}")
    return vals


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str, lineno: Optional[int] = None):
    where = f" (line {lineno})" if lineno is not None else ""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}{where}")
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    ftype = _FIELD_TYPES[key]
    try:
        if "int" in str(ftype):
            return int(raw)
        if "float" in str(ftype):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}{where}: {exc}") from exc
    return raw


def load_config_file(path) -> dict:
    """Parse a key = value config file with # comments; line-level errors."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        out[key.strip()] = _coerce(key.strip(), raw, lineno)
    return out


def build_config(config_path=None, manifest_path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Assemble a RunConfig from a file and/or CLI overrides (highest wins)."""
    data: dict = {}
    if manifest_path is not None:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
        data.update(manifest["config"])
    if config_path is not None:
        data.update(load_config_file(config_path))
    for key, val in (overrides or {}).items():
        if val is not None:
            data[key] = val
    known = {k: v for k, v in data.items() if k in _FIELD_TYPES}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**known)
    cfg.validate()
    return cfg


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, outputs: list) -> Path:
    import hdrpanel

    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "outputs": [str(p) for p in outputs],
        "versions": {
            "hdrpanel": hdrpanel.__version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    path = Path(out_dir) / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
