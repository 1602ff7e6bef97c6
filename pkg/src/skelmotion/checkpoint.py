"""Checkpoint container shared by the VAE and the denoiser.

A checkpoint is a NumPy ``.npz`` archive (zip of ``.npy`` members) with:

``__format__``   the string ``skelmotion-checkpoint``
``__version__``  int, currently 1
``__kind__``     ``vae`` or ``denoiser``
``__config__``   JSON text echoing the full model/training configuration
``param/<name>`` one float32 array per parameter, named as in the PyTorch
                 ``state_dict`` (dots preserved)

Every member loads with ``allow_pickle=False``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
import torch

FORMAT = "skelmotion-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, kind: str, config: dict[str, Any], state: dict[str, torch.Tensor]) -> None:
    arrays = {
        "__format__": np.array(FORMAT),
        "__version__": np.array(VERSION, dtype=np.int32),
        "__kind__": np.array(kind),
        "__config__": np.array(json.dumps(config, sort_keys=True)),
    }
    for name, t in state.items():
        arrays[f"param/{name}"] = t.detach().cpu().numpy().astype(np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path, kind: str | None = None) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as npz:
            if str(npz["__format__"]) != FORMAT:
                raise CheckpointError(f"{path}: not a skelmotion checkpoint")
            if int(npz["__version__"]) != VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {int(npz['__version__'])}")
            found = str(npz["__kind__"])
            if kind is not None and found != kind:
                raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {found}")
            config = json.loads(str(npz["__config__"]))
            state = {k[len("param/"):]: torch.from_numpy(npz[k].copy()) for k in npz.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    return config, state
