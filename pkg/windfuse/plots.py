"""Training-curve images.

Figures are rasterized with the Agg canvas and written through Pillow
without metadata chunks, so identical curves give identical files.
"""

import logging
import os
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from PIL import Image

from windfuse.core import EpochRecord

logger = logging.getLogger(__name__)

# metric -> (train field, validation field, axis label)
METRICS = {
    "accuracy": ("train_acc", "val_acc", "Accuracy"),
    "loss": ("train_loss", "val_loss", "Cross-entropy loss"),
}


def render_curve(
    records: Sequence[EpochRecord],
    metric: str,
    path: Union[str, os.PathLike],
    title: str = "",
) -> str:
    """Draws train (and validation, when recorded) curves for one metric.

    Returns:
        The written path.
    """
    train_field, val_field, label = METRICS[metric]
    epochs = [r.epoch for r in records]
    fig = Figure(figsize=(6, 4), dpi=100)
    canvas = FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    ax.plot(epochs, [getattr(r, train_field) for r in records], label="train")
    val = [getattr(r, val_field) for r in records]
    if any(v is not None for v in val):
        ax.plot(
            epochs,
            [np.nan if v is None else v for v in val],
            label="validation",
        )
    ax.set_xlabel("Epoch")
    ax.set_ylabel(label)
    if title:
        ax.set_title(title)
    ax.legend(loc="best")
    fig.tight_layout()
    canvas.draw()

    image = Image.fromarray(np.asarray(canvas.buffer_rgba())).convert("RGB")
    image.save(path, format="PNG", optimize=False)
    logger.debug("wrote %s curve to %s", metric, path)
    return os.fspath(path)
