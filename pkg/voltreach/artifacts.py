"""
Artifact emission for voltreach runs.

Every file written through `ArtifactWriter` is checksummed (SHA-256) and listed
in the run manifest together with the config hash, seed, tool version and
wall-clock timings. CSV files are written by pandas with a fixed float format
so identical runs produce byte-identical files.
"""

import hashlib
import json
import logging
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

import pandas as pd

from voltreach.models import RunManifest

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
MANIFEST_NAME = "manifest.json"


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactWriter:
    """Writes run outputs into one directory and keeps their checksums."""

    def __init__(self, out_dir: Path, run_id: str):
        self.out_dir = Path(out_dir)
        self.run_id = run_id
        self.checksums: Dict[str, str] = {}
        self.timings: Dict[str, float] = {}

    def _path(self, name: str) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def register(self, path: Path) -> str:
        """Checksum a file written elsewhere (checkpoints) and list it in the manifest."""
        path = Path(path)
        checksum = sha256_file(path)
        self.checksums[str(path.relative_to(self.out_dir))] = checksum
        return checksum

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        path = self._path(name)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self.register(path)
        logger.info(f"run_id={self.run_id} - artifact written: name={name}, rows={len(frame)}")
        return path

    def write_json(self, name: str, data: Any) -> Path:
        path = self._path(name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True)
            f.write("\n")
        self.register(path)
        logger.info(f"run_id={self.run_id} - artifact written: name={name}")
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self._path(name)
        path.write_text(text, encoding="utf-8")
        self.register(path)
        return path

    @contextmanager
    def timed(self, phase: str) -> Iterator[None]:
        start = time.time()
        try:
            yield
        finally:
            self.timings[phase] = round(time.time() - start, 3)

    def write_manifest(self, command: str, config_hash: str, seed: int, tool_version: str,
                       config: Optional[Dict[str, Any]] = None) -> RunManifest:
        manifest = RunManifest(run_id=self.run_id, command=command, config_hash=config_hash, seed=seed,
                               tool_version=tool_version, artifacts=dict(sorted(self.checksums.items())),
                               timings=dict(self.timings), config=config or {})
        path = self._path(MANIFEST_NAME)
        payload = manifest.model_dump(mode="json")
        payload["created_at"] = datetime.now(timezone.utc).isoformat()
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, ensure_ascii=False, sort_keys=True)
            f.write("\n")
        logger.info(f"run_id={self.run_id} - manifest written: artifacts={len(self.checksums)}")
        return manifest


def read_manifest(path: Path) -> RunManifest:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    data.pop("created_at", None)
    return RunManifest.model_validate(data)
