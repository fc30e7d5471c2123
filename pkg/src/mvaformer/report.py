"""
Images written next to the CSV outputs: binary PPM attention heatmaps and
matplotlib figures (loss curve, method comparison, attention overview).
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError, FormatError


# -- PPM heatmaps ---------------------------------------------------------------------
def attention_heatmap(weights, views, tokens_per_view, query_view):
    """
    Grayscale image [t, M*t] of the rows of ``weights`` [M*t, M*t] belonging to
    ``query_view``, scaled so the largest weight in the block is 255.
    """
    if not 0 <= query_view < views:
        raise ContractError(f"query view {query_view} outside [0, {views})")
    t = tokens_per_view
    block = np.asarray(weights, dtype=np.float64)[query_view * t:(query_view + 1) * t]
    top = block.max()
    if top <= 0:
        return np.zeros(block.shape, dtype=np.uint8)
    return np.rint(255.0 * block / top).astype(np.uint8)


def write_ppm(path, gray):
    """Write a [h, w] uint8 image as binary RGB PPM (P6) with equal channels."""
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ContractError(f"heatmap must be 2-D, got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.repeat(gray[..., None], 3, axis=-1).tobytes())


def read_ppm(path):
    """Read a P6 file written by :func:`write_ppm`; returns [h, w, 3] uint8."""
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported max value {maxval}")
    pixels = np.frombuffer(parts[4], dtype=np.uint8)
    if pixels.size != h * w * 3:
        raise FormatError(f"{path}: expected {h * w * 3} pixel bytes, found {pixels.size}")
    return pixels.reshape(h, w, 3)


# -- matplotlib figures --------------------------------------------------------------
def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_loss(log, path):
    """Per-batch loss with the per-epoch mean on top."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if log.batches:
        steps = np.arange(len(log.batches))
        ax.plot(steps, [b[3] for b in log.batches], lw=0.8, alpha=0.6, label="batch")
        per_epoch = np.cumsum([sum(1 for b in log.batches if b[0] == e[0]) for e in log.epochs]) - 1
        ax.plot(per_epoch, [e[1] for e in log.epochs], "o-", label="epoch mean")
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("BCE loss")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_comparison(rows, path):
    """Grouped bars of macro precision, recall and F per method."""
    plt = _pyplot()
    names = [r.method for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(1.4 * len(rows) + 2, 3.5))
    for i, (label, attr) in enumerate((("precision", "macro_precision"), ("recall", "macro_recall"),
                                       ("F", "macro_f"))):
        ax.bar(x + (i - 1) * 0.27, [getattr(r.report, attr) for r in rows], 0.27, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1)
    ax.legend(ncol=3, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_attention(records, views, tokens_per_view, query_view, path):
    """One panel per (layer, kind): head-averaged rows of ``query_view``."""
    plt = _pyplot()
    groups = {}
    for rec in records:
        groups.setdefault((rec.layer, str(getattr(rec.kind, "value", rec.kind))), []).append(rec.weights)
    keys = sorted(groups)
    fig, axes = plt.subplots(len(keys), 1, figsize=(8, 1.6 * len(keys) + 0.5), squeeze=False)
    t = tokens_per_view
    for ax, key in zip(axes[:, 0], keys):
        mean = np.mean(groups[key], axis=0)[query_view * t:(query_view + 1) * t]
        ax.imshow(mean, aspect="auto", cmap="gray", interpolation="nearest")
        for v in range(1, views):
            ax.axvline(v * t - 0.5, color="red", lw=0.6)
        ax.set_title(f"layer {key[0]} {key[1]}", fontsize=8)
        ax.set_yticks([])
        ax.set_xticks([(v + 0.5) * t for v in range(views)])
        ax.set_xticklabels([f"view {v}" for v in range(views)], fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
