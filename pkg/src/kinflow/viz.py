"""Flow visualization with the standard optical-flow color wheel
(hue = direction, saturation = magnitude)."""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from .core import FlowField


def make_colorwheel() -> np.ndarray:
    """55-entry RY/YG/GC/CB/BM/MR color wheel, rows are RGB in [0, 255]."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    ncols = ry + yg + gc + cb + bm + mr
    wheel = np.zeros((ncols, 3))
    col = 0
    wheel[0:ry, 0] = 255
    wheel[0:ry, 1] = np.floor(255 * np.arange(0, ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(0, yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(0, gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(0, bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


def flow_to_color(flow: Union[FlowField, np.ndarray],
                  max_mag: Optional[float] = None) -> np.ndarray:
    """Render flow as an RGB uint8 image.

    Magnitudes are normalized by the per-image maximum unless ``max_mag``
    pins a fixed normalization.
    """
    uv = flow.numpy() if isinstance(flow, FlowField) else np.asarray(flow)
    u = uv[..., 0].astype(np.float64)
    v = uv[..., 1].astype(np.float64)
    rad = np.sqrt(u * u + v * v)
    norm = max_mag if max_mag is not None else rad.max()
    u = u / (norm + 1e-5)
    v = v / (norm + 1e-5)
    rad = np.sqrt(u * u + v * v)

    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int32)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.zeros(u.shape + (3,), np.uint8)
    for c in range(3):
        col0 = wheel[k0, c] / 255.0
        col1 = wheel[k1, c] / 255.0
        col = (1 - f) * col0 + f * col1
        inside = rad <= 1
        col[inside] = 1 - rad[inside] * (1 - col[inside])
        col[~inside] = col[~inside] * 0.75
        img[..., c] = np.floor(255 * col)
    return img
