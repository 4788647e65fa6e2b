"""Matplotlib figures written to files (Agg backend, no display needed)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import DataIOError  # noqa: E402

# fixed metadata keeps the PNG bytes reproducible across runs
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=100, metadata=_META)
    except OSError as exc:
        raise DataIOError(path, "cannot write figure") from exc
    finally:
        plt.close(fig)
    return path


def plot_loss(steps, losses, path, title: str = "training loss", smooth: int = 50) -> Path:
    """Raw loss plus a trailing moving average, log-scale y axis."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    losses = np.asarray(losses, dtype=np.float64)
    ax.plot(steps, losses, lw=0.6, alpha=0.4, label="loss")
    if len(losses) >= 2:
        k = max(1, min(smooth, len(losses) // 5 or 1))
        c = np.cumsum(np.insert(losses, 0, 0.0))
        avg = np.array([(c[i + 1] - c[max(0, i + 1 - k)]) / (i + 1 - max(0, i + 1 - k))
                        for i in range(len(losses))])
        ax.plot(steps, avg, lw=1.4, label=f"mean of last {k}")
    if len(losses) and np.all(losses > 0):
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_metrics(rows: list[dict], path, title: str = "per-frame metrics") -> Path:
    """PSNR and SSIM per frame; one line per clip."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for clip in sorted({r["clip"] for r in rows}):
        sel = [r for r in rows if r["clip"] == clip]
        x = [r["frame"] for r in sel]
        a1.plot(x, [r["psnr"] for r in sel], marker=".", lw=1, label=f"clip {clip}")
        a2.plot(x, [r["ssim"] for r in sel], marker=".", lw=1, label=f"clip {clip}")
    a1.set_xlabel("frame")
    a1.set_ylabel("PSNR (dB)")
    a2.set_xlabel("frame")
    a2.set_ylabel("SSIM")
    if len({r["clip"] for r in rows}) <= 8:
        a1.legend(fontsize=7)
    fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def contact_sheet(rows: dict[str, list[np.ndarray]], path, max_frames: int = 12,
                  title: str | None = None) -> Path:
    """Grid of frames: one row per named sequence, columns evenly spaced in time."""
    names = list(rows)
    n = max(len(v) for v in rows.values())
    cols = np.unique(np.round(np.linspace(0, n - 1, min(n, max_frames))).astype(int))
    fig, axes = plt.subplots(len(names), len(cols), figsize=(1.2 * len(cols), 1.3 * len(names)),
                             squeeze=False)
    for r, name in enumerate(names):
        for c, i in enumerate(cols):
            ax = axes[r, c]
            ax.set_xticks([])
            ax.set_yticks([])
            if i < len(rows[name]):
                ax.imshow(rows[name][i], interpolation="nearest")
            if r == 0:
                ax.set_title(str(i), fontsize=7)
            if c == 0:
                ax.set_ylabel(name, fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)
