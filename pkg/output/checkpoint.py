from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union
import json
import logging
import os
import struct

import numpy as np

from core.errors import ManifestError
from core.serialization import stable_hash
from core.tensor import Tensor, parameter

logger = logging.getLogger(__name__)

MAGIC = b"MOELABCK"
FORMAT_VERSION = 1
PAYLOAD_DTYPE = "<f4"
_LENGTH = struct.Struct("<Q")


@dataclass
class ArrayEntry:
    """Location of one parameter array inside the payload."""
    name: str
    shape: List[int]
    offset: int
    nbytes: int
    dtype: str = PAYLOAD_DTYPE

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "shape": list(self.shape), "offset": self.offset,
                "nbytes": self.nbytes, "dtype": self.dtype}


@dataclass
class Checkpoint:
    """
    Parameters at one training step plus the run configuration that made them.

    File layout: 8-byte magic, little-endian uint64 manifest length, the
    manifest as sorted-key JSON, then every array as little-endian float32
    in manifest order.
    """
    step: int
    arrays: Dict[str, np.ndarray]
    run_config: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def params(self) -> Dict[str, Tensor]:
        """Fresh trainable tensors (copies) of every stored array."""
        return {name: parameter(value.copy(), name=name) for name, value in self.arrays.items()}

    @property
    def config_hash(self) -> str:
        return stable_hash(self.run_config)

    def model_config(self):
        from model.config import ModelConfig
        if "model" not in self.run_config:
            raise ManifestError("checkpoint manifest carries no model configuration")
        return ModelConfig.from_dict(self.run_config["model"])

    def entries(self) -> List[ArrayEntry]:
        offset = 0
        entries = []
        for name in sorted(self.arrays):
            value = self.arrays[name]
            nbytes = int(value.size) * 4
            entries.append(ArrayEntry(name=name, shape=list(value.shape), offset=offset, nbytes=nbytes))
            offset += nbytes
        return entries

    def manifest(self) -> Dict[str, Any]:
        return {"format_version": self.format_version, "step": self.step,
                "run_config": self.run_config, "config_hash": self.config_hash,
                "arrays": [e.to_dict() for e in self.entries()]}

    def to_bytes(self) -> bytes:
        manifest = json.dumps(self.manifest(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, _LENGTH.pack(len(manifest)), manifest]
        for name in sorted(self.arrays):
            parts.append(np.ascontiguousarray(self.arrays[name], dtype=PAYLOAD_DTYPE).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> "Checkpoint":
        header = len(MAGIC) + _LENGTH.size
        if len(blob) < header or blob[:len(MAGIC)] != MAGIC:
            raise ManifestError(f"{source} is not a checkpoint file (bad magic)")
        (length,) = _LENGTH.unpack_from(blob, len(MAGIC))
        if header + length > len(blob):
            raise ManifestError(f"{source}: manifest truncated ({len(blob) - header} of {length} bytes)")
        try:
            manifest = json.loads(blob[header:header + length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ManifestError(f"{source}: manifest is not valid JSON: {e}") from e

        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise ManifestError(f"{source}: format version {version} is not supported "
                                f"(expected {FORMAT_VERSION})")
        payload = memoryview(blob)[header + length:]
        arrays: Dict[str, np.ndarray] = {}
        expected = 0
        for entry in manifest.get("arrays", []):
            name, shape = entry["name"], tuple(entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
            if entry.get("dtype", PAYLOAD_DTYPE) != PAYLOAD_DTYPE:
                raise ManifestError(f"{source}: array '{name}' has unsupported dtype {entry['dtype']}")
            if nbytes != int(np.prod(shape, dtype=np.int64)) * 4:
                raise ManifestError(f"{source}: array '{name}' byte length {nbytes} does not match shape {shape}")
            if offset + nbytes > len(payload):
                raise ManifestError(f"{source}: payload truncated, array '{name}' is missing "
                                    f"(needs bytes {offset}..{offset + nbytes}, payload has {len(payload)})")
            arrays[name] = np.frombuffer(payload[offset:offset + nbytes], dtype=PAYLOAD_DTYPE) \
                .astype(np.float32).reshape(shape)
            expected = max(expected, offset + nbytes)
        if expected != len(payload):
            raise ManifestError(f"{source}: payload has {len(payload)} bytes, manifest describes {expected}")
        return cls(step=int(manifest["step"]), arrays=arrays, run_config=manifest.get("run_config", {}),
                   format_version=version)


def _arrays(params: Mapping[str, Union[Tensor, np.ndarray]]) -> Dict[str, np.ndarray]:
    return {name: (value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float32))
            for name, value in params.items()}


def save_checkpoint(params: Mapping[str, Union[Tensor, np.ndarray]], step: int, path: Union[str, Path],
                    run_config: Optional[Dict[str, Any]] = None) -> Path:
    """Write params at `step`; the file is replaced atomically."""
    path = Path(path)
    checkpoint = Checkpoint(step=int(step), arrays=_arrays(params), run_config=run_config or {})
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint.to_bytes())
    os.replace(tmp, path)
    logger.debug("saved checkpoint step %d to %s", step, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    return Checkpoint.from_bytes(path.read_bytes(), source=str(path))


def checkpoint_name(step: int, prefix: str = "step") -> str:
    return f"{prefix}_{step:06d}.ckpt"


def list_checkpoints(directory: Union[str, Path]) -> List[Path]:
    """Regular checkpoints of a run directory, in step order."""
    return sorted(Path(directory).glob("step_*.ckpt"))
