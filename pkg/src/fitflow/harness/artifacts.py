"""Run-directory persistence: checkpoints with JSON sidecars, stamped JSON artifacts."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import FormatError, MissingArtifactError, StaleArtifactError
from ..numcore import load_checkpoint, save_checkpoint

SIDECAR_FORMAT = "fitflow-artifact-1"


def clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: Path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from None


def require(run_dir: Path, names: Iterable[str]) -> None:
    missing = [n for n in names if not (Path(run_dir) / n).exists()]
    if missing:
        raise MissingArtifactError(f"missing artifacts in {run_dir}: {', '.join(missing)}")


def save_model(run_dir: Path, name: str, state: dict, meta: dict, config_hash: str) -> None:
    run_dir = Path(run_dir)
    blob = save_checkpoint(run_dir / f"{name}.ckpt", state)
    write_json(
        run_dir / f"{name}.json",
        {
            "format": SIDECAR_FORMAT,
            "config_hash": config_hash,
            "checkpoint_sha256": hashlib.sha256(blob).hexdigest(),
            "meta": meta,
        },
    )


def load_model(run_dir: Path, name: str, config_hash: str | None) -> tuple[dict, dict]:
    """(meta, state) after checking the checkpoint digest and the config stamp."""
    run_dir = Path(run_dir)
    require(run_dir, [f"{name}.ckpt", f"{name}.json"])
    side = read_json(run_dir / f"{name}.json")
    blob = (run_dir / f"{name}.ckpt").read_bytes()
    if hashlib.sha256(blob).hexdigest() != side.get("checkpoint_sha256"):
        raise StaleArtifactError(f"{name}.ckpt does not match the digest recorded in {name}.json")
    if config_hash is not None and side.get("config_hash") != config_hash:
        raise StaleArtifactError(
            f"{name} was produced under config {side.get('config_hash', '?')[:12]}, current is {config_hash[:12]}"
        )
    return side["meta"], load_checkpoint(run_dir / f"{name}.ckpt")


def save_stamped(run_dir: Path, name: str, payload: dict, config_hash: str) -> None:
    write_json(Path(run_dir) / name, {"config_hash": config_hash, **payload})


def load_stamped(run_dir: Path, name: str, config_hash: str | None) -> dict:
    require(run_dir, [name])
    d = read_json(Path(run_dir) / name)
    if config_hash is not None and d.get("config_hash") != config_hash:
        raise StaleArtifactError(f"{name} is stale for the current config")
    return d


def merge_counts(path: Path, counts: dict[str, float]) -> dict:
    """Record values per phase, keeping entries written by earlier invocations."""
    old = read_json(path) if Path(path).exists() else {}
    for k, v in counts.items():
        old[k] = v
    write_json(path, old)
    return old
