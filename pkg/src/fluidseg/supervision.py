"""Annotation encodings, label pyramids and the training losses.

Masks, box masks and global labels are binary uint8 numpy arrays; the last
channel is always background.  Boxes are (cls, x1, y1, x2, y2) with inclusive
corners, x along width and y along height.  Losses take logits as autodiff
Tensors and targets as plain arrays.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataError, DimensionError

TIERS = ("mask", "box", "global", "none")


def encode_mask(class_grid: np.ndarray, num_classes: int) -> np.ndarray:
    """Class-index grid (H,W) to one-hot (num_classes,H,W); background is last."""
    grid = np.asarray(class_grid)
    if grid.ndim != 2:
        raise DimensionError("class grid must be 2D")
    if grid.min() < 0 or grid.max() >= num_classes:
        raise DataError(f"class indices outside [0, {num_classes - 1}]")
    onehot = np.zeros((num_classes,) + grid.shape, dtype=np.uint8)
    np.put_along_axis(onehot, grid[None].astype(np.int64), 1, axis=0)
    return onehot


def decode_mask(onehot: np.ndarray) -> np.ndarray:
    """Inverse of encode_mask; requires exactly one channel set per pixel."""
    oh = np.asarray(onehot)
    if oh.ndim != 3:
        raise DimensionError("one-hot mask must be (C,H,W)")
    if not np.array_equal(oh.sum(axis=0), np.ones(oh.shape[1:], dtype=oh.dtype)):
        raise DataError("mask is not one-hot: channel sum != 1 somewhere")
    return oh.argmax(axis=0)


def boxes_to_boxmask(boxes, num_classes: int, h: int, w: int) -> np.ndarray:
    """Rasterize boxes to (num_classes,H,W); background where nothing covers.

    Overlapping boxes are allowed, including across classes.
    """
    bm = np.zeros((num_classes, h, w), dtype=np.uint8)
    for cls, x1, y1, x2, y2 in boxes:
        if not 0 <= cls < num_classes - 1:
            raise DataError(f"box class {cls} is not a foreground class")
        if not (0 <= x1 <= x2 < w and 0 <= y1 <= y2 < h):
            raise DataError(f"box ({x1},{y1},{x2},{y2}) outside {w}x{h} or inverted")
        bm[cls, y1 : y2 + 1, x1 : x2 + 1] = 1
    bm[num_classes - 1] = bm[: num_classes - 1].max(axis=0) == 0
    return bm


def derive_boxes(onehot: np.ndarray) -> list:
    """Tight box around every 4-connected component of each foreground class."""
    c = onehot.shape[0]
    h, w = onehot.shape[1], onehot.shape[2]
    boxes = []
    for cls in range(c - 1):
        seen = np.zeros((h, w), dtype=bool)
        chan = onehot[cls]
        for sy, sx in zip(*np.nonzero(chan)):
            if seen[sy, sx]:
                continue
            x1 = x2 = sx
            y1 = y2 = sy
            queue = deque([(sy, sx)])
            seen[sy, sx] = True
            while queue:
                y, x = queue.popleft()
                x1, x2 = min(x1, x), max(x2, x)
                y1, y2 = min(y1, y), max(y2, y)
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and chan[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            boxes.append((cls, int(x1), int(y1), int(x2), int(y2)))
    return boxes


def derive_global(onehot: np.ndarray) -> np.ndarray:
    """Per-channel presence bits (num_classes,), background included."""
    return (onehot.reshape(onehot.shape[0], -1).max(axis=1) > 0).astype(np.uint8)


def downscale_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-wise max pool: a coarse cell is 1 iff any covered pixel is 1."""
    c, h, w = mask.shape
    if out_h < 1 or out_w < 1 or h % out_h or w % out_w:
        raise DimensionError(f"cannot pool {h}x{w} to {out_h}x{out_w}: windows not integral")
    fy, fx = h // out_h, w // out_w
    return mask.reshape(c, out_h, fy, out_w, fx).max(axis=(2, 4))


@dataclass
class LabelPyramid:
    """Per-tap targets, coarse to fine; the finest level is the source mask."""

    levels: list
    source: str = "ground_truth"  # or "pseudo"


def build_pyramid(mask: np.ndarray, tap_sizes, source: str = "ground_truth") -> LabelPyramid:
    """Max-pool the mask to every tap size; tap order is coarse to fine."""
    levels = [downscale_mask(mask, th, tw) for th, tw in tap_sizes]
    return LabelPyramid(levels=levels, source=source)


@dataclass
class AnnotationRecord:
    """One training image with the strongest annotation tier it carries."""

    image: np.ndarray
    tier: str
    mask: np.ndarray | None = None        # one-hot (C,H,W)
    boxmask: np.ndarray | None = None     # (C,H,W)
    global_label: np.ndarray | None = None  # (C,)

    def __post_init__(self):
        if self.tier not in TIERS:
            raise DataError(f"unknown annotation tier {self.tier!r}")
        strongest = ("mask" if self.mask is not None else
                     "box" if self.boxmask is not None else
                     "global" if self.global_label is not None else "none")
        if strongest != self.tier:
            raise DataError(f"tier {self.tier!r} does not match annotations "
                            f"(strongest present: {strongest!r})")


def loss_ce(logits: Tensor, target_onehot: np.ndarray) -> Tensor:
    """Pixel cross-entropy over softmaxed channels, averaged over N*H*W."""
    t = np.asarray(target_onehot, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"target shape {t.shape} != logits shape {logits.shape}")
    lp = ad.log_softmax_channels(logits)
    n_pos = t.size // t.shape[1 if t.ndim == 4 else 0]
    return ad.scale(ad.tsum(ad.mul(lp, Tensor(t))), -1.0 / n_pos)


def loss_bce(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean stable binary cross-entropy over every channel and position."""
    return ad.tmean(ad.bce_with_logits(logits, np.asarray(target, dtype=np.float64)))


def loss_mlds(level_logits, pyramid_levels) -> Tensor:
    """Mean of the per-level BCE losses (multi-scale label supervision)."""
    if len(level_logits) != len(pyramid_levels):
        raise ContractError(
            f"{len(level_logits)} logit levels vs {len(pyramid_levels)} target levels")
    total = None
    for lg, tgt in zip(level_logits, pyramid_levels):
        term = loss_bce(lg, tgt)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(level_logits))


def loss_mil(feature: Tensor, head, global_label: np.ndarray) -> Tensor:
    """BCE between the head applied to the pooled feature and presence bits.

    head maps a (N,c,1,1) tensor to (N,num_classes,1,1) logits.
    """
    pooled = ad.avgpool_spatial(feature)
    logits = head(pooled)
    g = np.asarray(global_label, dtype=np.float64)
    if g.ndim == 1:
        g = g[None]
    return loss_bce(logits, g[:, :, None, None])
