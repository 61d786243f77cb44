"""Checkpoint files: a JSON manifest followed by tensor blobs.

Layout: ``b"DDCK"`` | manifest length (u64 LE) | manifest JSON (utf-8) |
one tensor blob per manifest ``arrays`` entry, in order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import from_bytes, to_bytes

MAGIC = b"DDCK"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: int
    epoch: int
    config: dict
    config_hash: str
    seed: int
    weights: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    rng_state: dict | None = None
    teacher: dict[str, np.ndarray] = field(default_factory=dict)
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        return f"stage{self.stage}-e{self.epoch}-{self.config_hash}"

    def to_bytes(self) -> bytes:
        groups = (("weights", self.weights), ("optimizer", self.optimizer), ("teacher", self.teacher), ("extras", self.extras))
        arrays = []
        blobs = []
        for gname, group in groups:
            for k in group:
                arr = np.asarray(group[k])
                arrays.append({"group": gname, "name": k, "shape": list(arr.shape), "dtype": str(arr.dtype)})
                blobs.append(to_bytes(arr))
        manifest = {
            "stage": self.stage,
            "epoch": self.epoch,
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "optimizer_step": self.optimizer_step,
            "rng_state": self.rng_state,
            "meta": self.meta,
            "arrays": arrays,
        }
        head = json.dumps(manifest, sort_keys=True).encode()
        return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)

    def save(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(self.to_bytes())
        return p

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (n,) = struct.unpack_from("<Q", buf, 4)
        try:
            m = json.loads(buf[12 : 12 + n].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from None
        pos = 12 + n
        groups: dict[str, dict] = {"weights": {}, "optimizer": {}, "teacher": {}, "extras": {}}
        for entry in m["arrays"]:
            t, pos = from_bytes(buf, pos)
            if list(t.shape) != entry["shape"]:
                raise CheckpointError(f"array {entry['name']}: shape mismatch with manifest")
            groups[entry["group"]][entry["name"]] = t.data
        if pos != len(buf):
            raise CheckpointError("trailing bytes after checkpoint arrays")
        return cls(
            stage=m["stage"],
            epoch=m["epoch"],
            config=m["config"],
            config_hash=m["config_hash"],
            seed=m["seed"],
            weights=groups["weights"],
            optimizer=groups["optimizer"],
            optimizer_step=m["optimizer_step"],
            rng_state=m["rng_state"],
            teacher=groups["teacher"],
            extras=groups["extras"],
            meta=m.get("meta", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        p = Path(path)
        if not p.exists():
            raise CheckpointError(f"{p}: no such checkpoint")
        return cls.from_bytes(p.read_bytes())
