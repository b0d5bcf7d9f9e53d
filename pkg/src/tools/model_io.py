import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from src.errors import ManifestError
from src.models.graph_models import Layer, ModelGraph, TensorSpec
from src.utils import load_json, logger, save_json

FORMAT_VERSION = 1
_LE_F32 = np.dtype('<f4')


def _bin_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix('.bin')


def save_tensors(tensors: Dict[str, np.ndarray], path: Path, extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Writes named float32 tensors as a JSON index plus a sibling .bin holding raw
    little-endian f32 data, row-major, at the offsets listed in the index.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(_bin_path(path), 'wb') as blob:
        for name, array in tensors.items():
            raw = np.ascontiguousarray(array, dtype=np.float32).astype(_LE_F32, copy=False).tobytes()
            index.append({
                "name": name,
                "dtype": "f32",
                "shape": [int(extent) for extent in np.shape(array)],
                "offset": offset,
                "byte_length": len(raw),
            })
            blob.write(raw)
            offset += len(raw)
    manifest = {"version": FORMAT_VERSION, **(extra or {}), "weights": _bin_path(path).name, "tensor_index": index}
    save_json(manifest, path)
    return path


def load_tensors(path: Path, weights: Optional[Path] = None) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Reads a container written by save_tensors. Returns (name -> float32 array, manifest)."""
    path = Path(path)
    try:
        manifest = load_json(path)
    except FileNotFoundError:
        raise ManifestError(f"model file not found: {path}")
    except json.JSONDecodeError as e:
        logger.error(f"Malformed manifest {path}: {e}")
        raise ManifestError(f"malformed manifest {path}: {e}")
    if not isinstance(manifest, dict) or manifest.get("version") != FORMAT_VERSION:
        raise ManifestError(f"{path}: unsupported or missing format version")

    blob_path = Path(weights) if weights else path.parent / manifest.get("weights", _bin_path(path).name)
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise ManifestError(f"tensor data file not found: {blob_path}")

    tensors: Dict[str, np.ndarray] = {}
    for entry in manifest.get("tensor_index", []):
        try:
            name, shape = entry["name"], [int(v) for v in entry["shape"]]
            offset, length = int(entry["offset"]), int(entry["byte_length"])
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{path}: malformed tensor_index entry {entry}: {e}")
        if entry.get("dtype", "f32") != "f32":
            raise ManifestError(f"{path}: tensor '{name}' has unsupported dtype {entry.get('dtype')}")
        if offset < 0 or offset + length > len(blob) or length != 4 * int(np.prod(shape)):
            raise ManifestError(f"{path}: tensor '{name}' lies outside {blob_path.name} or has the wrong length")
        data = np.frombuffer(blob, dtype=_LE_F32, count=length // 4, offset=offset)
        tensors[name] = data.astype(np.float32).reshape(shape)
    return tensors, manifest


def save_model(model: ModelGraph, path: Path) -> Path:
    extra = {
        "layers": [layer.model_dump(mode='json') for layer in model.layers],
        "metadata": dict(model.metadata),
    }
    return save_tensors({name: spec.data for name, spec in model.tensors.items()}, path, extra)


def load_model(path: Path, weights: Optional[Path] = None) -> ModelGraph:
    """Loads a model manifest; `weights` overrides the .bin named in the manifest."""
    arrays, manifest = load_tensors(path, weights)
    try:
        layers = [Layer(**layer) for layer in manifest.get("layers", [])]
        tensors = {
            name: TensorSpec(name=name, shape=list(array.shape), data=array)
            for name, array in arrays.items()
        }
        model = ModelGraph(layers=layers, tensors=tensors, metadata=manifest.get("metadata", {}))
    except ValidationError as e:
        logger.error(f"Model file {path} does not describe a model graph: {e}")
        raise ManifestError(f"{path}: {e}")
    logger.info(f"Loaded model {path} ({len(model.layers)} layers, {len(model.tensors)} tensors)")
    return model


def model_fingerprint(model: ModelGraph) -> str:
    """sha256 over the architecture (layers plus tensor names and shapes); weights are excluded."""
    payload = {
        "layers": [layer.model_dump(mode='json') for layer in model.layers],
        "tensors": sorted((name, list(spec.shape)) for name, spec in model.tensors.items()),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


if __name__ == "__main__":
    import sys

    loaded = load_model(Path(sys.argv[1]))
    for layer in loaded.layers:
        print(f"{layer.id:<16}{layer.kind:<14}{layer.inputs}")
