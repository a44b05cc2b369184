import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from spherevp.errors import DatasetIOError

logger = logging.getLogger(__name__)

VP_COLORS = ("red", "green", "blue")
EXTRA_VP_COLOR = "yellow"
OUTLIER_COLOR = "black"
HORIZON_COLOR = "magenta"
GT_HORIZON_COLOR = "cyan"

Endpoints = Tuple[Tuple[float, float], Tuple[float, float]]

SVG_HASH_SALT = "spherevp"


def label_color(label: int) -> str:
    if label < 0:
        return OUTLIER_COLOR
    if label < len(VP_COLORS):
        return VP_COLORS[label]
    return EXTRA_VP_COLOR


def save_figure(fig: Figure, path: Union[str, Path]):
    """SVG without a timestamp and with fixed element ids, so equal figures give equal bytes."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with matplotlib.rc_context({"svg.hashsalt": SVG_HASH_SALT}):
            fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    except OSError as e:
        raise DatasetIOError(f"Could not write figure {path}: {e}") from e


def cumulative_figure(xs: np.ndarray, fractions: np.ndarray, auc_value: float) -> Figure:
    fig = Figure(figsize=(5, 4))
    ax = fig.add_subplot()
    ax.step(xs, fractions, where="post", color="tab:blue", label=f"AUC {auc_value:.2%}")
    ax.set_xlim(0, float(xs[-1]))
    ax.set_ylim(0, 1)
    ax.set_xlabel("Horizon error (fraction of image height)")
    ax.set_ylabel("Fraction of images with lower error")
    ax.grid(True)
    ax.legend(loc="lower right")
    return fig


def overlay_figure(
    segments: np.ndarray,
    labels: Sequence[int],
    width: int,
    height: int,
    horizon: Optional[Endpoints] = None,
    gt_horizon: Optional[Endpoints] = None,
) -> Figure:
    """Segments in pixel coordinates coloured by VP label, plus horizon lines."""
    fig = Figure(figsize=(6, 6 * height / width))
    ax = fig.add_subplot()
    labels = list(labels)
    for i, (x1, y1, x2, y2) in enumerate(np.asarray(segments, dtype=float).reshape(-1, 4)):
        label = labels[i] if i < len(labels) else -1
        ax.plot([x1, x2], [y1, y2], color=label_color(label), linewidth=1.5)
    if horizon is not None:
        ax.plot(*zip(*horizon), color=HORIZON_COLOR, linewidth=2)
    if gt_horizon is not None:
        ax.plot(*zip(*gt_horizon), color=GT_HORIZON_COLOR, linewidth=2, linestyle="--")
    ax.set_xlim(0, width)
    ax.set_ylim(height, 0)
    ax.set_aspect("equal")
    ax.axis("off")
    return fig
