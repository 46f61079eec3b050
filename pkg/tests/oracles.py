"""Independent brute-force references. Plain Python loops, no package imports."""

import math


def axis_starts(length, window, stride):
    """Every start that is a multiple of the stride and fits, plus the flush-right start.

    Strides wider than the window are narrowed to the window so no pixel is skipped.
    """
    stride = min(stride, window)
    starts = [x for x in range(length) if x % stride == 0 and x + window <= length]
    if length - window not in starts:
        starts.append(length - window)
    return starts


def covering_counts(height, width, window, stride):
    ys, xs = axis_starts(height, window, stride), axis_starts(width, window, stride)
    counts = [[0] * width for _ in range(height)]
    for y0 in ys:
        for x0 in xs:
            for y in range(y0, y0 + window):
                for x in range(x0, x0 + window):
                    counts[y][x] += 1
    return counts


def per_pixel_mean(height, width, window, positions, scores):
    """For each pixel, average the scores of every window (x0, y0) containing it."""
    grid = [[0.0] * width for _ in range(height)]
    for y in range(height):
        for x in range(width):
            acc, n = 0.0, 0
            for (x0, y0), s in zip(positions, scores):
                if x0 <= x < x0 + window and y0 <= y < y0 + window:
                    acc += s
                    n += 1
            grid[y][x] = acc / n
    return grid


def rank_average(values):
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    return cov / math.sqrt(vx * vy)


def spearman(x, y):
    return pearson(rank_average(x), rank_average(y))


def mock_patch_realness(x0, y0, window, region):
    """1 - cos(patch, text) for the planted-region mock with region vector == text, base orthogonal.

    Patch vector is proportional to (1 - f) * base + f * text, f the covered area fraction,
    so cos = f / sqrt((1 - f)^2 + f^2).
    """
    rx0, ry0, rx1, ry1 = region
    w = max(0, min(x0 + window, rx1) - max(x0, rx0))
    h = max(0, min(y0 + window, ry1) - max(y0, ry0))
    f = w * h / (window * window)
    return 1.0 - f / math.sqrt((1 - f) ** 2 + f ** 2)


def mock_localization_margin(size, region, windows, stride):
    """(mean final realness outside region) - (mean inside), max fusion, global min-max."""
    fused = [[-math.inf] * size for _ in range(size)]
    for window in windows:
        starts = axis_starts(size, window, stride)
        positions = [(x0, y0) for y0 in starts for x0 in starts]
        scores = [mock_patch_realness(x0, y0, window, region) for x0, y0 in positions]
        grid = per_pixel_mean(size, size, window, positions, scores)
        for y in range(size):
            for x in range(size):
                fused[y][x] = max(fused[y][x], grid[y][x])
    lo = min(min(row) for row in fused)
    hi = max(max(row) for row in fused)
    inside, outside = [], []
    rx0, ry0, rx1, ry1 = region
    for y in range(size):
        for x in range(size):
            v = (fused[y][x] - lo) / (hi - lo)
            (inside if rx0 <= x < rx1 and ry0 <= y < ry1 else outside).append(v)
    return sum(outside) / len(outside) - sum(inside) / len(inside)


def mock_realness_general(x0, y0, window, regions, base, text):
    """1 - cos(patch, text) for the mock blend with arbitrary region vectors (plain lists)."""
    area = window * window
    weights = []
    for (rx0, ry0, rx1, ry1), _ in regions:
        w = max(0, min(x0 + window, rx1) - max(x0, rx0))
        h = max(0, min(y0 + window, ry1) - max(y0, ry0))
        weights.append(w * h / area)
    wb = max(0.0, 1.0 - sum(weights))
    vec = [wb * b for b in base]
    for wr, (_, rv) in zip(weights, regions):
        vec = [a + wr * c for a, c in zip(vec, rv)]
    dot = sum(a * c for a, c in zip(vec, text))
    cos = dot / math.sqrt(sum(a * a for a in vec) * sum(c * c for c in text))
    return 1.0 - max(-1.0, min(1.0, cos))
