"""Pure-numpy fallbacks for the compiled kernels in ``_ckernels.pyx``."""

import numpy as np


def accumulate_windows(positions, window, scores, height, width):
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64)
    x0, y0 = positions[:, 0], positions[:, 1]
    x1, y1 = x0 + window, y0 + window

    diff = np.zeros((height + 1, width + 1), dtype=np.float64)
    cnt = np.zeros((height + 1, width + 1), dtype=np.int64)
    for ys, xs, sign in ((y0, x0, 1), (y0, x1, -1), (y1, x0, -1), (y1, x1, 1)):
        np.add.at(diff, (ys, xs), sign * scores)
        np.add.at(cnt, (ys, xs), sign)

    total = np.cumsum(np.cumsum(diff, axis=1), axis=0)[:height, :width]
    count = np.cumsum(np.cumsum(cnt, axis=1), axis=0)[:height, :width]
    return np.ascontiguousarray(total), np.ascontiguousarray(count)


def overlap_fractions(boxes, regions):
    boxes = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    regions = np.asarray(regions, dtype=np.int64).reshape(-1, 4)
    b = boxes[:, None, :]
    r = regions[None, :, :]
    w = np.minimum(b[..., 2], r[..., 2]) - np.maximum(b[..., 0], r[..., 0])
    h = np.minimum(b[..., 3], r[..., 3]) - np.maximum(b[..., 1], r[..., 1])
    inter = np.clip(w, 0, None) * np.clip(h, 0, None)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / area[:, None].astype(np.float64)
