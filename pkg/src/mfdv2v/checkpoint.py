"""Checkpoint archives: a zip holding ``manifest.json`` plus MVT1 weight tensors.

Members are written in sorted order with a fixed timestamp so identical
weights and manifests give byte-identical archives.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .tensorio import dumps_tensor, loads_tensor

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path, manifest: dict, weights: dict[str, dict[str, torch.Tensor]]) -> Path:
    """``weights`` maps a namespace (``"registration"``, ``"stme"``, ...) to a state dict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = {}
    with zipfile.ZipFile(path, "w") as zf:
        for ns in sorted(weights):
            for key in sorted(weights[ns]):
                tensor = weights[ns][key].detach().cpu()
                member = f"tensors/{ns}/{key}.mvt"
                names[f"{ns}/{key}"] = {"dtype": str(tensor.dtype).replace("torch.", ""), "member": member}
                zf.writestr(_member(member), dumps_tensor(tensor.numpy()))
        doc = {**manifest, "tensors": names}
        zf.writestr(_member("manifest.json"), json.dumps(doc, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        weights: dict[str, dict[str, torch.Tensor]] = {}
        for full, info in manifest["tensors"].items():
            ns, key = full.split("/", 1)
            arr = loads_tensor(zf.read(info["member"]))
            dtype = getattr(torch, info["dtype"])
            weights.setdefault(ns, {})[key] = torch.from_numpy(np.array(arr)).to(dtype)
    return manifest, weights
