"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"ATSR" | version | header_len | header JSON (utf-8)
    then per tensor: name_len | name | rank | extents... | float32 data

The header holds configs, counters and the data RNG state. It is written
with sorted keys and fixed separators so that save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .models import AttnSRModel, ModelConfig

MAGIC = b"ATSR"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: Dict[str, np.ndarray]
    header: Dict[str, Any] = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.header.get("epoch", 0))

    @property
    def best_psnr(self) -> Optional[float]:
        return self.header.get("best_psnr")

    def model_state(self) -> Dict[str, np.ndarray]:
        return {k[len("model/") :]: v for k, v in self.tensors.items() if k.startswith("model/")}

    def build_model(self) -> AttnSRModel:
        model = AttnSRModel(self.model_config)
        model.load_state_dict(self.model_state())
        return model

    # serialization ----------------------------------------------------

    def to_bytes(self) -> bytes:
        header = dict(self.header)
        header["format_version"] = VERSION
        header["model_config"] = self.model_config.to_dict()
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(hbytes)))
        buf.write(hbytes)
        for name, arr in self.tensors.items():
            nb = name.encode("utf-8")
            a = np.asarray(arr)
            buf.write(struct.pack("<I", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<I", a.ndim))
            buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
            buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        tensors: Dict[str, np.ndarray] = {}
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            tensors[name] = arr.astype(np.float32)
        cfg = ModelConfig.from_dict(header.pop("model_config"))
        header.pop("format_version", None)
        return cls(cfg, tensors, header)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
        try:
            return cls.from_bytes(data)
        except (struct.error, ValueError, KeyError) as exc:
            raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def model_tensors(model: AttnSRModel) -> Dict[str, np.ndarray]:
    return {f"model/{k}": v for k, v in model.state_dict().items()}
