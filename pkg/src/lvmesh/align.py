"""Slice-misalignment correction by stacking LV blood-pool centroids collinearly.

Each 2D slice is translated in-plane (whole voxels, no resampling) so that
its LV blood-pool centroid lands on a fixed vertical axis.  The reference
axis is the median centroid over the labeled slices of the end-diastole
frame, which is robust to apical outliers.
"""

from __future__ import annotations

import numpy as np

from .phantom import LABEL_LV_POOL, translate_inplane
from .volume import FrameSequence, LabelVolume

__all__ = ["AlignError", "centroid2d", "correct"]


class AlignError(Exception):
    pass


def centroid2d(mask_slice: np.ndarray, label: int, spacing=(1.0, 1.0), origin=(0.0, 0.0)):
    """In-plane centroid (cx, cy) in mm of a label in one slice, or None."""
    ys, xs = np.nonzero(mask_slice == label)
    if xs.size == 0:
        return None
    return (origin[0] + spacing[0] * xs.mean(), origin[1] + spacing[1] * ys.mean())


def _slice_centroids(mask: LabelVolume, label: int):
    sx, sy = mask.spacing[0], mask.spacing[1]
    ox, oy = mask.origin[0], mask.origin[1]
    return [
        centroid2d(mask.data[k], label, (sx, sy), (ox, oy))
        for k in range(mask.data.shape[0])
    ]


def _fill_nearest(values):
    """Replace None entries with the nearest non-None neighbor along z."""
    idx = [k for k, v in enumerate(values) if v is not None]
    if not idx:
        return None
    out = list(values)
    for k in range(len(values)):
        if out[k] is None:
            nearest = min(idx, key=lambda j: abs(j - k))
            out[k] = values[nearest]
    return out


def correct(frames: FrameSequence, masks, label: int = LABEL_LV_POOL):
    """Stack slices so per-slice LV pool centroids are collinear.

    Returns (corrected frames, corrected masks, shifts) with shifts in voxels,
    shape (n_frames, nz, 2) as [dx, dy].  Slices without the label inherit the
    nearest labeled slice's shift; the same shift is applied to image and mask.
    """
    ed_centroids = [c for c in _slice_centroids(masks[0], label) if c is not None]
    if not ed_centroids:
        raise AlignError(f"no slice of the ED mask contains label {label}")
    ed = np.asarray(ed_centroids)
    ref = (float(np.median(ed[:, 0])), float(np.median(ed[:, 1])))

    sx, sy = frames[0].spacing[0], frames[0].spacing[1]
    nz = frames[0].data.shape[0]
    shifts = np.zeros((frames.n_frames, nz, 2), dtype=np.int64)
    out_frames, out_masks = [], []
    for t in range(frames.n_frames):
        cents = _fill_nearest(_slice_centroids(masks[t], label))
        if cents is None:
            raise AlignError(f"no slice of frame {t} contains label {label}")
        for k, (cx, cy) in enumerate(cents):
            shifts[t, k, 0] = int(round((ref[0] - cx) / sx))
            shifts[t, k, 1] = int(round((ref[1] - cy) / sy))
        out_frames.append(translate_inplane(frames[t], shifts[t]))
        out_masks.append(translate_inplane(masks[t], shifts[t]))
    return FrameSequence(out_frames), out_masks, shifts
