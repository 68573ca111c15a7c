"""
Artifact storage for pipeline runs.
Handles the portable dense-array format, PNG planes, checkpoints and tabular logs.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import pandas as pd
from PIL import Image

logger = logging.getLogger(__name__)

ARRAY_VERSION = "v1"
ARRAY_SUFFIX = ".arr"
DTYPE_CODES = {"f32": "<f4", "f64": "<f8", "u8": "u1", "i64": "<i8"}
_CODE_BY_KIND = {np.dtype(v).newbyteorder("<").str: k for k, v in DTYPE_CODES.items()}

PathLike = Union[str, Path]


class MissingArtifactError(FileNotFoundError):
    """Raised when a stage's prerequisite files are absent."""

    def __init__(self, missing: List[Path]):
        self.missing = [Path(p) for p in missing]
        listing = ", ".join(str(p) for p in self.missing)
        super().__init__(f"missing prerequisite artifacts: {listing}")


def encode_array(array: np.ndarray) -> bytes:
    """Serialize to 'v1 <dtype> <ndims> <d0> ...' header plus little-endian payload."""
    array = np.asarray(array)
    little = array.astype(array.dtype.newbyteorder("<"), copy=False)
    code = _CODE_BY_KIND.get(little.dtype.str)
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no portable array code (supported: {sorted(DTYPE_CODES)})")
    header = " ".join([ARRAY_VERSION, code, str(array.ndim)] + [str(d) for d in array.shape])
    return header.encode("ascii") + b"\n" + np.ascontiguousarray(little).tobytes()


def decode_array(blob: bytes) -> np.ndarray:
    header, _, payload = blob.partition(b"\n")
    fields = header.decode("ascii").split()
    if len(fields) < 3 or fields[0] != ARRAY_VERSION:
        raise ValueError(f"not a {ARRAY_VERSION} dense array (header: {header[:40]!r})")
    code, ndims = fields[1], int(fields[2])
    if code not in DTYPE_CODES:
        raise ValueError(f"unknown dtype code '{code}'")
    shape = tuple(int(d) for d in fields[3:3 + ndims])
    if len(shape) != ndims:
        raise ValueError(f"header declares {ndims} dims but lists {len(shape)}")
    array = np.frombuffer(payload, dtype=DTYPE_CODES[code])
    if array.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"payload holds {array.size} values, shape {shape} needs {int(np.prod(shape))}")
    return array.reshape(shape).astype(array.dtype.newbyteorder("="))


def save_array(path: PathLike, array: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_array(array))


def load_array(path: PathLike) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


def save_png(path: PathLike, plane: np.ndarray):
    """Write an 8-bit grayscale (H, W) or RGB (H, W, 3) image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(plane, dtype=np.uint8)).save(path)


def load_png(path: PathLike) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img)


class ArtifactStore:
    """Owns the on-disk layout of one pipeline run."""

    def __init__(self, root: PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        logger.info(f"Artifact store at {self.root}")

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def require(self, paths: Iterable[PathLike]):
        """Raise MissingArtifactError listing every path that does not exist."""
        missing = [Path(p) for p in paths if not Path(p).exists()]
        if missing:
            logger.error(f"Missing artifacts: {[str(p) for p in missing]}")
            raise MissingArtifactError(missing)

    def save_array(self, relpath: str, array: np.ndarray) -> Path:
        path = self.path(relpath)
        save_array(path, array)
        return path

    def load_array(self, relpath: str) -> np.ndarray:
        return load_array(self.path(relpath))

    def save_png(self, relpath: str, plane: np.ndarray) -> Path:
        path = self.path(relpath)
        save_png(path, plane)
        return path

    def load_png(self, relpath: str) -> np.ndarray:
        return load_png(self.path(relpath))

    def save_table(self, relpath: str, frame: pd.DataFrame) -> Path:
        path = self.path(relpath)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        return path

    def load_table(self, relpath: str) -> pd.DataFrame:
        return pd.read_csv(self.path(relpath))

    def save_json(self, relpath: str, payload: Dict) -> Path:
        path = self.path(relpath)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path

    def load_json(self, relpath: str) -> Dict:
        return json.loads(self.path(relpath).read_text())

    def save_text(self, relpath: str, text: str) -> Path:
        path = self.path(relpath)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        return path

    def save_checkpoint(self, name: str, state: Dict[str, np.ndarray], manifest: Dict) -> Path:
        """
        Persist a named map of parameter arrays plus a JSON manifest.

        Args:
            name (str): Checkpoint directory under checkpoints/
            state (dict): Parameter name -> array
            manifest (dict): Config values needed to rebuild the model

        Returns:
            Path: The checkpoint directory
        """
        directory = self.path("checkpoints", name)
        for param_name, array in state.items():
            save_array(directory / f"{param_name}{ARRAY_SUFFIX}", array)
        payload = dict(manifest)
        payload["parameters"] = sorted(state)
        (directory / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        logger.info(f"Saved checkpoint '{name}' with {len(state)} tensors")
        return directory

    def load_checkpoint(self, name: str):
        directory = self.path("checkpoints", name)
        self.require([directory / "manifest.json"])
        manifest = json.loads((directory / "manifest.json").read_text())
        state = {p: load_array(directory / f"{p}{ARRAY_SUFFIX}") for p in manifest["parameters"]}
        return state, manifest

    def list_files(self, relpath: str, pattern: str) -> List[Path]:
        directory = self.path(relpath)
        return sorted(directory.glob(pattern)) if directory.exists() else []


def create_artifact_store(root: Optional[PathLike] = None) -> ArtifactStore:
    """Create an artifact store rooted at the given run directory."""
    return ArtifactStore(root or "runs/default")
