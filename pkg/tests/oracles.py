"""Slow, obviously-correct reference implementations the fast code is tested against."""

from collections import deque
import itertools

import numpy as np


def naive_conv(x, w, b, stride=1):
    """Direct summation convolution with zero 'same' padding (out = ceil(n / stride))."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c = x.shape[:2]
    f, k = w.shape[0], w.shape[2]
    spatial = x.shape[2:]
    outs, before = [], []
    for size in spatial:
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        outs.append(out)
        before.append(total // 2)
    y = np.zeros((n, f, *outs))
    for pos in itertools.product(*(range(o) for o in outs)):
        acc = np.zeros((n, f))
        for off in itertools.product(range(k), repeat=len(spatial)):
            src = [p * stride + o - b for p, o, b in zip(pos, off, before)]
            if any(s < 0 or s >= size for s, size in zip(src, spatial)):
                continue
            xv = x[(slice(None), slice(None)) + tuple(src)]  # (n, c)
            wv = w[(slice(None), slice(None)) + off]  # (f, c)
            for fi in range(f):
                for ci in range(c):
                    acc[:, fi] += xv[:, ci] * wv[fi, ci]
        y[(slice(None), slice(None)) + pos] = acc + b
    return y


def naive_dense(x, w, b):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros((x.shape[0], w.shape[0]))
    for i in range(x.shape[0]):
        for j in range(w.shape[0]):
            out[i, j] = sum(x[i, k] * w[j, k] for k in range(x.shape[1])) + b[j]
    return out


def set_dice(pred, truth):
    """Dice from explicit sets of foreground coordinates."""
    a = {tuple(p) for p in np.argwhere(np.asarray(pred) > 0)}
    b = {tuple(p) for p in np.argwhere(np.asarray(truth) > 0)}
    if not a and not b:
        return 1.0
    return 2 * len(a & b) / (len(a) + len(b))


def pair_auc(scores, labels):
    """O(n^2) Mann-Whitney pair count."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def flood_components(mask):
    """8-connected components by breadth-first flood fill, in raster order of first pixel."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or seen[y, x]:
                continue
            comp, queue = [], deque([(y, x)])
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                comp.append((cy, cx))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            comps.append(comp)
    return comps


def densest_oracle(prob, threshold=0.5):
    """Scan every component; keep the highest mean, ties to the larger, then the earlier one."""
    prob = np.asarray(prob, dtype=np.float64)
    best, best_key = None, None
    for comp in flood_components(prob >= threshold):
        mean = sum(prob[p] for p in comp) / len(comp)
        key = (mean, len(comp))
        if best_key is None or key > best_key:
            best, best_key = comp, key
    out = np.zeros(prob.shape, dtype=np.uint8)
    for p in best or []:
        out[p] = 1
    return out
