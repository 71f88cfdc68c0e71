"""Static SVG figures: decoded trajectories and training curves.

Rendering goes through matplotlib's Agg-free SVG backend with the date
stamp removed and a fixed hash salt, so equal inputs give equal bytes.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "mlct", "svg.fonttype": "none", "font.size": 9}


def _svg_bytes(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def loss_curves_svg(columns: dict[str, np.ndarray], steps=None, title: str = "training loss", smooth: int = 50) -> bytes:
    """One line per named column, moving-averaged over ``smooth`` steps, log y-axis."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for name, y in columns.items():
            y = np.asarray(y, dtype=np.float64)
            x = np.arange(len(y)) if steps is None else np.asarray(steps)
            if smooth > 1 and len(y) >= smooth:
                kernel = np.ones(smooth) / smooth
                y = np.convolve(y, kernel, mode="valid")
                x = x[smooth - 1 :]
            ax.plot(x, y, label=name, linewidth=1.0)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_title(title)
        ax.legend(loc="upper right")
        fig.tight_layout()
        return _svg_bytes(fig)


def trajectories_svg(seqs, labels, title: str = "decoded trajectories", per_class: int = 3, positions: bool = True) -> bytes:
    """Grid of channel traces: one row per class, ``per_class`` examples overlaid.

    With ``positions`` the velocity channels are integrated (cumulative sum)
    before plotting, which is what the joint transform does.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(len(classes), 1, figsize=(6, 1.8 * len(classes)), squeeze=False, sharex=True)
        for ax, c in zip(axes[:, 0], classes):
            for j in np.flatnonzero(labels == c)[:per_class]:
                x = np.asarray(getattr(seqs[j], "data", seqs[j]))
                x = np.cumsum(x, axis=0) if positions else x
                for ch in range(x.shape[1]):
                    ax.plot(x[:, ch], color=f"C{ch}", linewidth=0.8, alpha=0.7)
            ax.set_ylabel(f"class {int(c)}")
        axes[-1, 0].set_xlabel("frame")
        axes[0, 0].set_title(title)
        fig.tight_layout()
        return _svg_bytes(fig)
