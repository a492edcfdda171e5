import csv
import hashlib
import json
import logging
import os
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from ..config import settings
from ..models.grid_field import GridField
from ..models.schemas import ExperimentConfig, Manifest

logger = logging.getLogger(__name__)

_PACKAGES = ("numpy", "scipy", "PyWavelets", "pydantic", "pydantic-settings", "fastapi")


def _format(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    if isinstance(value, (list, tuple)):
        return " ".join(str(_format(v)) for v in value)
    return value


def _jsonable(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def config_hash(config: ExperimentConfig) -> str:
    payload = json.dumps(config.model_dump(mode="json", exclude={"output_dir"}), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {}
    for name in _PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


class ArtifactService:
    """Owns one run directory: CSV tables, JSON reports, binaries and the manifest."""

    def __init__(self, output_dir: Optional[str] = None):
        self.output_dir = Path(output_dir or settings.output_dir)
        self.artifacts: List[str] = []

        # Create output directory if it doesn't exist
        os.makedirs(self.output_dir, exist_ok=True)

    def _register(self, path: Path) -> Path:
        self.artifacts.append(path.name)
        logger.debug(f"Wrote artifact: {path}")
        return path

    def write_csv(self, name: str, rows: Iterable[Dict[str, Any]], header: Optional[Sequence[str]] = None) -> Path:
        """Write rows with a fixed header and round-trippable float formatting."""
        rows = list(rows)
        header = list(header or (rows[0].keys() if rows else []))
        path = self.output_dir / name
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=header, extrasaction="ignore", lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _format(row.get(k)) for k in header})
        return self._register(path)

    def write_json(self, name: str, payload: Any) -> Path:
        path = self.output_dir / name
        path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True), encoding="utf-8")
        return self._register(path)

    def save_field(self, name: str, field: GridField) -> Path:
        path = field.save(self.output_dir / name)
        self._register(path.with_suffix(path.suffix + ".json"))
        return self._register(path)

    def save_basis(self, name: str, basis) -> Path:
        path = basis.save(self.output_dir / name)
        self._register(path.with_suffix(path.suffix + ".json"))
        return self._register(path)

    def write_manifest(self, config: ExperimentConfig, wall_time: float, status: str = "ok",
                       diagnostics: Optional[Dict[str, Any]] = None) -> Manifest:
        manifest = Manifest(
            kind=config.kind.value,
            config_hash=config_hash(config),
            seed=config.seed,
            versions=package_versions(),
            wall_time=wall_time,
            artifacts=sorted(set(self.artifacts)),
            status=status,
            diagnostics=_jsonable(diagnostics or {}),
        )
        path = self.output_dir / "manifest.json"
        path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        logger.info(f"Manifest written to {path} (status={status})")
        return manifest
