"""Run configuration: TOML file, flag overrides, and a content hash.

Precedence is fixed: built-in defaults, then the config file, then explicit
overrides (command-line flags).  The resolved configuration hashes to a
stable hex digest recorded in run manifests so artifacts can be traced back
to their exact settings.  The only environment variable consulted anywhere
is ``DRIFTADAPT_OUTPUT_DIR``, the fallback output directory.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

_SECTIONS = ("run", "step1", "outliers", "selection", "adaptation", "benchmark")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str | None = None
    modality: str = "image"  # default Step-III modality
    strategies: list = field(default_factory=lambda: ["advda", "warm_start"])
    include_bounds: bool = True
    allow_oracle_labels: bool = False
    confidence_threshold: float = 0.95
    acs_weight: float = 0.5
    step1: dict = field(default_factory=dict)       # MaxDirepClassifier kwargs
    outliers: dict = field(default_factory=dict)    # OutlierConfig kwargs
    adaptation: dict = field(default_factory=dict)  # AdaptationConfig kwargs
    benchmark: dict = field(default_factory=dict)   # BenchmarkSpec kwargs

    def __post_init__(self):
        if self.modality not in ("image", "graph"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if not 0.0 < self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in (0, 1]")
        for key in ("strategy", "modality", "seed"):
            if key in self.adaptation:
                raise ValueError(
                    f"[adaptation] must not set {key!r}; it is driven per run"
                )
        if "seed" in self.step1 or "seed" in self.outliers:
            raise ValueError("seeds are set once at the [run] level")

    def resolved_output_dir(self, fallback="runs"):
        return Path(
            self.output_dir
            or os.environ.get("DRIFTADAPT_OUTPUT_DIR")
            or fallback
        )

    def hash(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def load_run_config(path=None, overrides=None):
    """Merge defaults, an optional TOML file, and override mappings.

    The file uses sections ``[run]``, ``[step1]``, ``[outliers]``,
    ``[selection]``, ``[adaptation]``, ``[benchmark]``; top-level RunConfig
    fields live in ``[run]`` and ``[selection]``.  ``overrides`` is a flat
    mapping of RunConfig field names (nested dicts merge key-wise).
    """
    data = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        unknown = set(raw) - set(_SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        top = {}
        top.update(raw.get("run", {}))
        top.update(raw.get("selection", {}))
        for section in ("step1", "outliers", "adaptation", "benchmark"):
            if section in raw:
                top[section] = dict(raw[section])
        data = top
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if isinstance(value, dict):
            merged = dict(data.get(key, {}))
            merged.update(value)
            data[key] = merged
        else:
            data[key] = value
    known = {f.name for f in fields(RunConfig)}
    bad = set(data) - known
    if bad:
        raise ValueError(f"unknown run configuration keys: {sorted(bad)}")
    return RunConfig(**data)


def write_manifest(config, outdir, extra=None):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": asdict(config), "config_hash": config.hash()}
    manifest.update(extra or {})
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
