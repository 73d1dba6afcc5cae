"""Portable model checkpoint: JSON header plus base64 little-endian float64 blocks."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np

from .neural import AdamState, MlpSpec, n_params, param_layout

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").astype(np.float64)


def normalization_digest(norm: Dict[str, Any] | None) -> str:
    payload = json.dumps(norm or {}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class ModelCheckpoint:
    specs: Dict[str, MlpSpec]
    params: Dict[str, np.ndarray]
    optimizers: Dict[str, AdamState] = field(default_factory=dict)
    normalization: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    state: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name, spec in self.specs.items():
            if name not in self.params:
                raise CheckpointError(f"network {name!r} has no parameters")
            if self.params[name].shape != (n_params(spec),):
                raise CheckpointError(f"network {name!r} parameters do not match its topology")

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def to_json(self) -> dict:
        header = {
            "format": FORMAT_VERSION,
            "networks": {
                name: {
                    "spec": spec.to_dict(),
                    "layout": [
                        {"w_offset": s.w_offset, "w_shape": list(s.w_shape), "b_offset": s.b_offset}
                        for s in param_layout(spec)
                    ],
                }
                for name, spec in self.specs.items()
            },
            "optimizers": {
                name: {"t": st.t, **st.hyperparams()} for name, st in self.optimizers.items()
            },
            "normalization_digest": normalization_digest(self.normalization),
            "config": self.config,
            "state": self.state,
        }
        blocks = {f"params/{k}": _encode(v) for k, v in self.params.items()}
        for name, st in self.optimizers.items():
            blocks[f"adam_m/{name}"] = _encode(st.m)
            blocks[f"adam_v/{name}"] = _encode(st.v)
        return {"header": header, "normalization": self.normalization, "blocks": blocks}

    @classmethod
    def from_json(cls, doc: dict) -> "ModelCheckpoint":
        header = doc["header"]
        if header.get("format") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
        norm = doc.get("normalization", {})
        if normalization_digest(norm) != header["normalization_digest"]:
            raise CheckpointError("normalization spec does not match the recorded digest")
        blocks = doc["blocks"]
        specs = {n: MlpSpec.from_dict(v["spec"]) for n, v in header["networks"].items()}
        params = {n: _decode(blocks[f"params/{n}"]) for n in specs}
        optimizers = {}
        for name, hp in header["optimizers"].items():
            optimizers[name] = AdamState(
                _decode(blocks[f"adam_m/{name}"]),
                _decode(blocks[f"adam_v/{name}"]),
                int(hp["t"]),
                hp["lr"],
                hp["beta1"],
                hp["beta2"],
                hp["eps"],
            )
        return cls(specs, params, optimizers, norm, header.get("config", {}), header.get("state", {}))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_json()))
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ModelCheckpoint":
        return cls.from_json(json.loads(Path(path).read_text()))
