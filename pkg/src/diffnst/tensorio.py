"""Raw little-endian float32 tensor files plus a JSON manifest.

Checkpoints and traces are directories: one ``manifest.json`` describing the
payload and one binary file per tensor. Floats are written as ``<f4`` so
save/load roundtrips are bit-exact regardless of host byte order.
"""

import json
from pathlib import Path

import numpy as np
import torch

MANIFEST_NAME = "manifest.json"


def save_tensor(path: Path, tensor: torch.Tensor) -> None:
    array = tensor.detach().cpu().to(torch.float32).numpy()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(array.astype("<f4", copy=False).tobytes())


def load_tensor(path: Path, shape: tuple[int, ...]) -> torch.Tensor:
    data = np.frombuffer(path.read_bytes(), dtype="<f4").copy()
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise ValueError(f"{path} holds {data.size} floats, expected {expected}")
    return torch.from_numpy(data.reshape(shape))


def save_bytes(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)


def write_manifest(directory: Path, payload: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / MANIFEST_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_manifest(directory: Path) -> dict:
    manifest = Path(directory) / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {directory}")
    return json.loads(manifest.read_text())


def save_named_tensors(directory: Path, tensors: dict[str, torch.Tensor],
                       subdir: str = "tensors") -> dict:
    """Write one ``.f32`` file per tensor and return the manifest index."""
    index = {}
    for name, tensor in tensors.items():
        fname = f"{subdir}/{name}.f32"
        save_tensor(Path(directory) / fname, tensor)
        index[name] = {"file": fname, "shape": list(tensor.shape)}
    return index


def load_named_tensors(directory: Path, index: dict) -> dict[str, torch.Tensor]:
    out = {}
    for name, entry in index.items():
        out[name] = load_tensor(Path(directory) / entry["file"], tuple(entry["shape"]))
    return out
