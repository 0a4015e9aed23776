"""Single-file model checkpoints.

Layout: 8-byte magic, little-endian uint32 format version, uint64 header
length, a UTF-8 JSON header, then every tensor as raw little-endian float64
in header order. The header carries the configs, split seed and ratios,
detection calibration and each tensor's name, shape and byte offset. Keys are
sorted so equal checkpoints serialize to equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from shaftformer.errors import ParseError
from shaftformer.model import ModelConfig, build_model

MAGIC = b"SHFTCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class ModelCheckpoint:
    model_config: ModelConfig
    state: "OrderedDict[str, torch.Tensor]"
    split_seed: int
    split_ratios: tuple = (0.7, 0.2, 0.1)
    train_config: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def build(self) -> torch.nn.Module:
        """Fresh model in eval mode carrying these weights (float64)."""
        model = build_model(self.model_config).double()
        model.load_state_dict(self.state)
        return model.eval()

    def to_bytes(self) -> bytes:
        tensors, offset, blobs = [], 0, []
        for name, t in self.state.items():
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8")
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header = {
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config,
            "split_seed": int(self.split_seed),
            "split_ratios": list(self.split_ratios),
            "calibration": self.calibration,
            "tensors": tensors,
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        return _PREFIX.pack(MAGIC, self.format_version, len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if len(data) < _PREFIX.size:
            raise ParseError("checkpoint truncated before header")
        magic, version, head_len = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise ParseError("not a checkpoint file (bad magic)")
        if version > FORMAT_VERSION:
            raise ParseError(f"checkpoint format {version} is newer than supported {FORMAT_VERSION}")
        start = _PREFIX.size
        try:
            header = json.loads(data[start : start + head_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"corrupt checkpoint header: {exc}") from exc
        body = memoryview(data)[start + head_len :]
        state = OrderedDict()
        for entry in header["tensors"]:
            n = int(np.prod(entry["shape"], dtype=np.int64))
            lo = entry["offset"]
            if lo + 8 * n > len(body):
                raise ParseError(f"tensor {entry['name']} runs past end of file")
            arr = np.frombuffer(body[lo : lo + 8 * n], dtype="<f8").reshape(entry["shape"])
            state[entry["name"]] = torch.from_numpy(arr.astype(np.float64))
        return cls(
            model_config=ModelConfig.from_dict(header["model_config"]),
            state=state,
            split_seed=header["split_seed"],
            split_ratios=tuple(header["split_ratios"]),
            train_config=header.get("train_config", {}),
            calibration=header.get("calibration", {}),
            format_version=version,
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        return path

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())


def from_model(model: torch.nn.Module, split_seed: int, split_ratios=(0.7, 0.2, 0.1),
               train_config=None, calibration=None) -> ModelCheckpoint:
    state = OrderedDict((k, v.detach().clone().double()) for k, v in model.state_dict().items())
    return ModelCheckpoint(model.cfg, state, split_seed, tuple(split_ratios), train_config or {},
                           calibration or {})
