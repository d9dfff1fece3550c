# foliscope_app/artifacts.py

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Set, Tuple, Union

import numpy as np
from PIL import Image

PathLike = Union[str, Path]


class ArtifactWriter:
    """Handles atomic artifact output: CSV, JSON, PGM heatmaps and run manifests."""

    @staticmethod
    def _atomic_write(path: PathLike, data: bytes) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
        return str(path)

    @staticmethod
    def format_value(value: Any) -> str:
        if isinstance(value, (bool, np.bool_)):
            return str(int(value))
        if isinstance(value, (int, np.integer)):
            return str(int(value))
        if isinstance(value, (float, np.floating)):
            return "%.17g" % float(value)
        return str(value)

    @staticmethod
    def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(ArtifactWriter.format_value(v) for v in row))
        return ArtifactWriter._atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))

    @staticmethod
    def read_csv(path: PathLike) -> Tuple[List[str], np.ndarray]:
        path = Path(path)
        with path.open("r", encoding="utf-8") as handle:
            header = handle.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return header, data

    @staticmethod
    def write_json(path: PathLike, payload: Any) -> str:
        text = json.dumps(payload, indent=2, sort_keys=True, default=ArtifactWriter._json_default)
        return ArtifactWriter._atomic_write(path, (text + "\n").encode("utf-8"))

    @staticmethod
    def read_json(path: PathLike) -> Any:
        return json.loads(Path(path).read_text(encoding="utf-8"))

    @staticmethod
    def _json_default(obj: Any) -> Any:
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (np.floating,)):
            return float(obj)
        if isinstance(obj, (np.integer,)):
            return int(obj)
        if isinstance(obj, (np.bool_,)):
            return bool(obj)
        if isinstance(obj, complex):
            return [obj.real, obj.imag]
        raise TypeError(f"cannot serialize {type(obj).__name__}")

    @staticmethod
    def write_pgm(path: PathLike, masses: np.ndarray) -> str:
        """8-bit grayscale heatmap, brightest at the largest cell mass."""
        masses = np.asarray(masses, dtype=float)
        top = float(np.max(masses)) if masses.size else 0.0
        scaled = np.zeros_like(masses) if top <= 0.0 else masses / top
        image = Image.fromarray(np.round(255.0 * scaled).astype(np.uint8), mode="L")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
        os.close(fd)
        try:
            image.save(tmp, format="PPM")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
        return str(path)

    @staticmethod
    def completed_shards(manifest_path: PathLike, config_hash: str) -> Set[str]:
        """Shard keys a previous run of the same configuration already finished."""
        path = Path(manifest_path)
        if not path.exists():
            return set()
        try:
            manifest = ArtifactWriter.read_json(path)
        except (OSError, json.JSONDecodeError):
            return set()
        if manifest.get("config_hash") != config_hash:
            return set()
        return set(manifest.get("completed_shards", []))

    @staticmethod
    def write_manifest(path: PathLike, payload: Dict[str, Any]) -> str:
        return ArtifactWriter.write_json(path, payload)
