import numpy as np
import plotly.graph_objects as go
import torch

from more_itertools import unique_everseen
from PIL import Image

# Gap between stacked panels, in pixels (filled with mid gray).
PANEL_GAP = 2


def to_gray(raster):
    """Fixed linear ramp [0, 1] -> 0..255."""
    if isinstance(raster, torch.Tensor):
        raster = raster.detach().cpu().numpy()
    raster = np.clip(np.asarray(raster, dtype=np.float64), 0.0, 1.0)
    return np.round(raster * 255.0).astype(np.uint8)


def save_png(path, raster):
    Image.fromarray(to_gray(raster)).save(path, format="PNG")


@torch.no_grad()
def scale_panels(autoencoder, pyramid):
    """
    Decoded partial reconstructions: panel k decodes the cumulative sum of the first k + 1 scale contributions.
    :param pyramid: TokenPyramid of a single mask
    :return: list of K arrays [H, W] in [0, 1]
    """
    return [autoencoder.decode(m_hat)[0, 0].cpu().numpy() for m_hat in autoencoder.partial_dequantize(pyramid)]


def scale_grid(image, panels):
    """
    Stack the input image (first channel) and the scale panels, one row each, coarse to fine.
    :return: PIL image with len(panels) + 1 rows
    """
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    image = np.asarray(image)
    rows = [image[0] if image.ndim == 3 else image] + list(panels)
    H, W = rows[0].shape
    grid = np.full((len(rows) * H + (len(rows) - 1) * PANEL_GAP, W), 128, dtype=np.uint8)
    for i, row in enumerate(rows):
        top = i * (H + PANEL_GAP)
        grid[top:top + H] = to_gray(row)
    return Image.fromarray(grid)


def curve_figure(rows, title=None):
    """Line chart of (step, split, metric, value) rows, one trace per split/metric pair."""
    fig = go.Figure()
    for split, metric in unique_everseen((r[1], r[2]) for r in rows):
        points = [(r[0], r[3]) for r in rows if r[1] == split and r[2] == metric]
        fig.add_trace(go.Scatter(x=[p[0] for p in points], y=[p[1] for p in points], mode="lines+markers",
                                 name="{} {}".format(split, metric)))
    fig.update_layout(title=title, xaxis_title="step", yaxis_title="value")
    return fig
