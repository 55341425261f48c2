"""PNG renderings of mel spectrograms and projected prosody codes.

Mel plots always use the ``magma`` colormap on a dB axis
(``20 * log10(e) * ln|mel|``) clipped to an 80 dB range below the peak, so
figures from different runs are directly comparable.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MEL_CMAP = "magma"
DB_RANGE = 80.0
_LN_TO_DB = 20.0 / np.log(10.0)


def plot_mel(frames: np.ndarray, path: str | Path, title: str = "", hop_seconds: float | None = None) -> None:
    db = np.asarray(frames, dtype=np.float64).T * _LN_TO_DB
    top = db.max()
    fig, ax = plt.subplots(figsize=(8, 3))
    extent = None
    if hop_seconds:
        extent = (0, db.shape[1] * hop_seconds, 0, db.shape[0])
    im = ax.imshow(db, origin="lower", aspect="auto", cmap=MEL_CMAP, vmin=top - DB_RANGE, vmax=top, extent=extent)
    ax.set_xlabel("time (s)" if hop_seconds else "frame")
    ax.set_ylabel("mel band")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="dB")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_codes(points: np.ndarray, labels, path: str | Path, title: str = "prosody codes") -> None:
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5, 5))
    for spk in dict.fromkeys(labels.tolist()):
        sel = labels == spk
        ax.scatter(points[sel, 0], points[sel, 1], s=18, label=str(spk), alpha=0.8)
    ax.legend(fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
