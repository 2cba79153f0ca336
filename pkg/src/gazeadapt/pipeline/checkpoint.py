"""Checkpoint container.

A checkpoint is a safetensors file. Tensor names are prefixed by role::

    regressor.<layer>.<weight|bias>   source network (stage "source")
    target.<layer>.<weight|bias>      adapted network (stages "adapt", "grl-baseline")
    importance.values                 per-tap importance scalars
    discriminator.<...>               domain discriminator / critic
    rng.torch                         torch CPU generator state (uint8)

All metadata lives in a single ``__metadata__`` entry named ``gazeadapt``
holding canonical JSON (sorted keys), so the header bytes are deterministic:

    format            "gazeadapt-ckpt/1"
    stage             "source" | "adapt" | "grl-baseline" | "source-diverged" ...
    arch_fingerprint  hash of the regressor's tensor names and shapes
    config_hash       hash of the canonical config snapshot
    config            the config snapshot (string -> string)
    frozen            whether the regressor tensors are frozen
    numpy_rng         numpy bit-generator state, if any
    extra             stage-specific payload (validation curve, selection, ...)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import load_file, save_file
from safetensors.torch import save as st_save

FORMAT = "gazeadapt-ckpt/1"
META_KEY = "gazeadapt"


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)

    @property
    def stage(self) -> str:
        return self.meta.get("stage", "")

    @property
    def fingerprint(self) -> str:
        return self.meta.get("arch_fingerprint", "")

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def has(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)

    def to_bytes(self) -> bytes:
        return st_save(self._plain(), metadata=self._header())

    def _plain(self) -> dict[str, torch.Tensor]:
        # no copy for contiguous tensors: a checkpoint holds ~370 MB per network
        return {k: v.detach().contiguous() for k, v in self.tensors.items()}

    def _header(self) -> dict[str, str]:
        return {META_KEY: json.dumps({"format": FORMAT, **self.meta}, sort_keys=True)}


def tensor_digest(tensors: dict[str, torch.Tensor]) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        h.update(f"{name}|{t.dtype}|{tuple(t.shape)}|".encode())
        h.update(t.reshape(-1).view(torch.uint8).numpy())
    return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(ckpt._plain(), str(path), metadata=ckpt._header())
    return path


def load_checkpoint(path) -> Checkpoint:
    with safe_open(str(path), framework="pt") as fh:
        meta = json.loads((fh.metadata() or {}).get(META_KEY, "{}"))
    tensors = load_file(str(path))
    if meta.pop("format", None) != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} checkpoint")
    return Checkpoint(tensors, meta)


def module_tensors(prefix: str, module: torch.nn.Module, copy: bool = True) -> dict[str, torch.Tensor]:
    """Prefixed state of ``module``; ``copy=False`` aliases it (the module must be discarded)."""
    return {f"{prefix}.{k}": v.detach().clone() if copy else v.detach()
            for k, v in module.state_dict().items()}
