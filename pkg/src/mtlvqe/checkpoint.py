"""Self-describing checkpoint container.

Layout: the magic line ``MTLVQE-CKPT-1\\n``, an 8-byte little-endian header length,
a JSON header (config echo, training cursor, tensor index, optimizer hyperparameters),
then the raw little-endian tensor bytes in index order. Writing is deterministic, so
read -> write reproduces the original file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import MTLNet, NetworkConfig

MAGIC = b"MTLVQE-CKPT-1\n"

_DTYPES = {
    "float32": (torch.float32, np.dtype("<f4")),
    "float64": (torch.float64, np.dtype("<f8")),
    "int64": (torch.int64, np.dtype("<i8")),
}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, torch.Tensor]
    optimizer: dict | None = None
    cursor: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def network_config(self) -> NetworkConfig:
        return NetworkConfig.from_dict(self.config)

    @classmethod
    def from_model(cls, model: MTLNet, optimizer: torch.optim.Optimizer | None = None,
                   cursor: dict | None = None, extra: dict | None = None) -> "Checkpoint":
        params = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(
            config=model.config.to_dict(),
            params=params,
            optimizer=optimizer.state_dict() if optimizer is not None else None,
            cursor=dict(cursor or {}),
            extra=dict(extra or {}),
        )

    def restore(self, model: MTLNet, optimizer: torch.optim.Optimizer | None = None,
                strict: bool = True) -> None:
        check_architecture(self.network_config, model.config)
        model.load_state_dict(self.params, strict=strict)
        if optimizer is not None and self.optimizer is not None:
            optimizer.load_state_dict(self.optimizer)

    def save(self, path: str | os.PathLike) -> None:
        tensors: list[tuple[str, torch.Tensor]] = [(f"param/{k}", v) for k, v in self.params.items()]
        optim_header = None
        if self.optimizer is not None:
            state = self.optimizer["state"]
            slots = {}
            for idx in sorted(state):
                slots[str(idx)] = sorted(state[idx])
                for slot in sorted(state[idx]):
                    value = state[idx][slot]
                    tensors.append((f"optim/{idx}/{slot}", torch.as_tensor(value)))
            optim_header = {"param_groups": self.optimizer["param_groups"], "slots": slots}

        index, blobs, offset = [], [], 0
        for name, t in tensors:
            t = t.detach().cpu().contiguous()
            dtype_name = str(t.dtype).replace("torch.", "")
            if dtype_name not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
            raw = t.numpy().astype(_DTYPES[dtype_name][1], copy=False).tobytes()
            index.append({"name": name, "dtype": dtype_name, "shape": list(t.shape),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)

        header = {
            "config": self.config,
            "cursor": self.cursor,
            "extra": self.extra,
            "optimizer": optim_header,
            "tensors": index,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(head)))
            f.write(head)
            for raw in blobs:
                f.write(raw)
        os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + hlen])
    body = memoryview(data)[pos + hlen:]

    tensors = {}
    for entry in header["tensors"]:
        tdtype, npdtype = _DTYPES[entry["dtype"]]
        chunk = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=npdtype).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr).to(tdtype)

    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    optimizer = None
    if header["optimizer"] is not None:
        state = {}
        for idx, slots in header["optimizer"]["slots"].items():
            state[int(idx)] = {slot: tensors[f"optim/{idx}/{slot}"] for slot in slots}
        optimizer = {"state": state, "param_groups": header["optimizer"]["param_groups"]}
    return Checkpoint(config=header["config"], params=params, optimizer=optimizer,
                      cursor=header["cursor"], extra=header["extra"])


def check_architecture(saved: NetworkConfig, wanted: NetworkConfig) -> None:
    """Raise with a field-by-field diff when two configs describe different architectures."""
    fields = ("num_blocks", "trunk_width", "kernel_size", "scale_factor",
              "in_channels", "out_channels", "heads")
    diff = [f"{f}: checkpoint={getattr(saved, f)!r} config={getattr(wanted, f)!r}"
            for f in fields if getattr(saved, f) != getattr(wanted, f)]
    if diff:
        raise CheckpointError("architecture mismatch:\n  " + "\n  ".join(diff))
