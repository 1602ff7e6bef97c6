"""Attention dumps (``.npz``) and heatmap plots.

A dump holds one or more named records. Record ``name`` stores

* ``{name}/tokens``: JSON list of prompt tokens
* ``{name}/timesteps``: ``(S,)`` int32
* ``{name}/step{s:03d}/layer{l}``: ``(H, J', N', K)`` float32

The unnamed record of a plain generation uses the prefix ``gen``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .denoiser import AttentionRecord

FORMAT = "skelmotion-attention"
VERSION = 1


class AttentionDumpError(ValueError):
    pass


def save_attention(path: str | Path, records: Mapping[str, AttentionRecord], extra: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {
        "__format__": np.array(FORMAT),
        "__version__": np.array(VERSION),
        "__records__": np.array(json.dumps(list(records))),
        "__extra__": np.array(json.dumps(extra or {})),
    }
    for name, rec in records.items():
        if "/" in name:
            raise AttentionDumpError(f"record name {name!r} may not contain '/'")
        arrays[f"{name}/tokens"] = np.array(json.dumps(list(rec.tokens)))
        arrays[f"{name}/timesteps"] = np.asarray(rec.timesteps, dtype=np.int32)
        for s, layers in enumerate(rec.maps):
            for l, m in enumerate(layers):
                arrays[f"{name}/step{s:03d}/layer{l}"] = m.detach().cpu().numpy().astype(np.float32)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_attention(path: str | Path) -> tuple[dict[str, AttentionRecord], dict]:
    """Return ``({name: record}, extra)``."""
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise AttentionDumpError(f"cannot read attention dump {path}: {exc}") from exc
    with data:
        if "__format__" not in data or str(data["__format__"]) != FORMAT:
            raise AttentionDumpError(f"{path} is not an attention dump")
        if int(data["__version__"]) != VERSION:
            raise AttentionDumpError(f"unsupported attention dump version {int(data['__version__'])}")
        names = json.loads(str(data["__records__"]))
        extra = json.loads(str(data["__extra__"]))
        out = {}
        for name in names:
            rec = AttentionRecord(tuple(json.loads(str(data[f"{name}/tokens"]))))
            steps = data[f"{name}/timesteps"].tolist()
            for s, t in enumerate(steps):
                layers = []
                l = 0
                while f"{name}/step{s:03d}/layer{l}" in data:
                    layers.append(torch.from_numpy(data[f"{name}/step{s:03d}/layer{l}"]))
                    l += 1
                rec.timesteps.append(int(t))
                rec.maps.append(layers)
            out[name] = rec
    return out, extra


def plot_attention(
    record: AttentionRecord,
    path: str | Path,
    joint_names: Sequence[str] | None = None,
    title: str | None = None,
) -> None:
    """One joint-by-frame heatmap per token, averaged over heads, layers and steps."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    mean = record.mean_map().numpy()  # (J, N, K)
    J, N, K = mean.shape
    fig, axes = plt.subplots(1, K, figsize=(2.2 * K + 1, 3), squeeze=False, sharey=True)
    vmax = float(mean.max()) or 1.0
    for k, ax in enumerate(axes[0]):
        im = ax.imshow(mean[:, :, k], aspect="auto", cmap="viridis", vmin=0.0, vmax=vmax, origin="upper")
        ax.set_title(record.tokens[k], fontsize=9)
        ax.set_xlabel("frame")
        if k == 0:
            ax.set_yticks(range(J))
            ax.set_yticklabels(joint_names if joint_names is not None else range(J), fontsize=7)
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=100)
    plt.close(fig)
