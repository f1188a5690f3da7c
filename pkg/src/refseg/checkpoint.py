"""Checkpoint directory format.

A checkpoint is a directory holding ``manifest.json`` (configs plus a tensor
index with shapes and dtypes), one raw little-endian binary file per tensor,
and ``vocab.json``. Tensor names are namespaced ``lm/...`` and ``sam/...``.
Save/load round-trips must be bit-exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .lm import LMConfig, MicroLM
from .sam import SamConfig, SamStack
from .tasks import Vocab

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def _tensor_filename(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def save_tensors(out_dir: str, tensors: dict[str, torch.Tensor]) -> dict:
    index = {}
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {dtype} for {name}")
        fname = _tensor_filename(name)
        arr.astype(_DTYPES[dtype]).tofile(os.path.join(out_dir, fname))
        index[name] = {"file": fname, "shape": list(arr.shape), "dtype": dtype}
    return index


def load_tensors(ckpt_dir: str, index: dict) -> dict[str, torch.Tensor]:
    out = {}
    for name, info in index.items():
        raw = np.fromfile(os.path.join(ckpt_dir, info["file"]), dtype=_DTYPES[info["dtype"]])
        arr = raw.astype(info["dtype"]).reshape(info["shape"])
        out[name] = torch.from_numpy(arr)
    return out


@dataclass
class ModelBundle:
    """Everything inference and training need: LM, perception stack, vocab."""

    lm: MicroLM
    sam: SamStack
    vocab: Vocab

    @classmethod
    def create(cls, vocab: Vocab, lm_overrides: dict | None = None,
               sam_overrides: dict | None = None, seed: int = 0) -> "ModelBundle":
        torch.manual_seed(seed)
        lm_cfg = LMConfig(vocab_size=len(vocab), **(lm_overrides or {}))
        sam_kwargs = {"lm_dim": lm_cfg.d_model}
        sam_kwargs.update(sam_overrides or {})
        sam_cfg = SamConfig(**sam_kwargs)
        return cls(lm=MicroLM(lm_cfg), sam=SamStack(sam_cfg), vocab=vocab)

    def named_tensors(self) -> dict[str, torch.Tensor]:
        tensors = {}
        for name, t in self.lm.state_dict().items():
            tensors[f"lm/{name}"] = t
        for name, t in self.sam.state_dict().items():
            tensors[f"sam/{name}"] = t
        return tensors

    def save(self, ckpt_dir: str, extra: dict | None = None) -> None:
        os.makedirs(ckpt_dir, exist_ok=True)
        index = save_tensors(ckpt_dir, self.named_tensors())
        manifest = {
            "lm_config": self.lm.cfg.to_dict(),
            "sam_config": self.sam.cfg.to_dict(),
            "tensors": index,
        }
        if extra:
            manifest["extra"] = extra
        with open(os.path.join(ckpt_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        self.vocab.save(os.path.join(ckpt_dir, "vocab.json"))

    @classmethod
    def load(cls, ckpt_dir: str) -> "ModelBundle":
        with open(os.path.join(ckpt_dir, "manifest.json")) as fh:
            manifest = json.load(fh)
        vocab = Vocab.load(os.path.join(ckpt_dir, "vocab.json"))
        lm = MicroLM(LMConfig(**manifest["lm_config"]))
        sam = SamStack(SamConfig(**manifest["sam_config"]))
        tensors = load_tensors(ckpt_dir, manifest["tensors"])
        lm.load_state_dict(
            {n[len("lm/") :]: t for n, t in tensors.items() if n.startswith("lm/")}
        )
        sam.load_state_dict(
            {n[len("sam/") :]: t for n, t in tensors.items() if n.startswith("sam/")}
        )
        return cls(lm=lm, sam=sam, vocab=vocab)
