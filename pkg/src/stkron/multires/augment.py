"""Training-set augmentation with spatially shifted copies of each clip."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from ..errors import BadInputError
from ..estimators import SampleSet


@dataclass(frozen=True)
class PatchGeometry:
    """Where each sample column was cut from.

    ``video`` is (frames, height, width); ``origins`` holds one
    (frame, row, col) corner per sample; ``shape`` is the patch extent
    (frames, rows, cols).
    """

    video: np.ndarray
    origins: np.ndarray
    shape: Tuple[int, int, int]

    def cut(self, origin) -> np.ndarray:
        t0, r0, c0 = (int(v) for v in origin)
        t, h, w = self.shape
        f, hh, ww = self.video.shape
        if t0 < 0 or r0 < 0 or c0 < 0 or t0 + t > f or r0 + h > hh or c0 + w > ww:
            raise BadInputError(f"patch at {(t0, r0, c0)} leaves the video bounds")
        return self.video[t0:t0 + t, r0:r0 + h, c0:c0 + w].ravel()


def augment_shifted_samples(s: SampleSet, shifts: Sequence[Tuple[int, int]],
                            geometry: PatchGeometry) -> SampleSet:
    """Append one shifted copy of every clip per ``(drow, dcol)`` shift.

    The mean is re-estimated over the enlarged set.
    """
    shifts = [tuple(int(v) for v in sh) for sh in shifts]
    if not shifts:
        return s
    origins = np.asarray(geometry.origins, dtype=int)
    if origins.shape != (s.n_samples, 3):
        raise BadInputError("geometry must give one (frame, row, col) origin per sample")
    t, h, w = geometry.shape
    if t * h * w != s.dims.size:
        raise BadInputError("patch shape does not match the sample dimension")
    cols = [s.x + s.mu[:, None]]
    for dr, dc in shifts:
        moved = origins + np.array([0, dr, dc])
        cols.append(np.stack([geometry.cut(o) for o in moved], axis=1))
    return SampleSet.from_clips(np.concatenate(cols, axis=1), s.dims)
