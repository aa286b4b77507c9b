"""Slow, obviously-correct reference implementations used only by the tests.

Nothing here imports from the package, so an oracle can never inherit a bug
from the code it checks.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


# --------------------------------------------------------------------------- imaging

def otsu_bruteforce(img) -> float:
    """Scan all 256 bin centres and recompute the class statistics from scratch."""
    v = np.asarray(img, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    best_t, best_var = None, -1.0
    scores = []
    for k in range(256):
        t = lo + (k + 0.5) * (hi - lo) / 256
        below = v[v <= t]
        above = v[v > t]
        if len(below) == 0 or len(above) == 0:
            scores.append((t, 0.0))
            continue
        w0 = len(below) / len(v)
        w1 = len(above) / len(v)
        var = w0 * w1 * (below.mean() - above.mean()) ** 2
        scores.append((t, var))
    best_var = max(s for _, s in scores)
    for t, s in scores:
        if s >= best_var * (1 - 1e-9):
            best_t = t
            break
    return float(best_t)


def disk_offsets(radius: int):
    return [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
            if dx * dx + dy * dy <= radius * radius]


def open_naive(mask, radius: int):
    """Per-pixel erosion (outside counts as foreground) then dilation (outside counts as background)."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    offs = disk_offsets(radius)
    er = np.zeros_like(m)
    for i in range(h):
        for j in range(w):
            ok = True
            for dy, dx in offs:
                y, x = i + dy, j + dx
                if 0 <= y < h and 0 <= x < w and not m[y, x]:
                    ok = False
                    break
            er[i, j] = ok
    out = np.zeros_like(m)
    for i in range(h):
        for j in range(w):
            for dy, dx in offs:
                y, x = i + dy, j + dx
                if 0 <= y < h and 0 <= x < w and er[y, x]:
                    out[i, j] = True
                    break
    return out


def nnls_grid(od_pixel, stains, step=1e-3, cmax=3.0):
    """Coarse-to-fine grid search for min ||S c - od|| over c >= 0."""
    od_pixel = np.asarray(od_pixel, dtype=np.float64)
    S = np.asarray(stains, dtype=np.float64)
    lo = np.zeros(2)
    hi = np.full(2, cmax)
    for res in (0.05, 0.005, step):
        a = np.arange(lo[0], hi[0] + res / 2, res)
        b = np.arange(lo[1], hi[1] + res / 2, res)
        A, B = np.meshgrid(a, b, indexing="ij")
        recon = A[..., None] * S[:, 0] + B[..., None] * S[:, 1]
        r = np.linalg.norm(recon - od_pixel, axis=-1)
        i, j = np.unravel_index(np.argmin(r), r.shape)
        best = np.array([a[i], b[j]])
        lo = np.maximum(best - 2 * res, 0.0)
        hi = best + 2 * res
    return best, float(np.linalg.norm(S @ best - od_pixel))


def angle_deg(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c = float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


# --------------------------------------------------------------------------- evaluation

def matching_bruteforce(preds, gts, spacing, radius):
    """Max-cardinality, then min-total-distance matching by DP over gt subsets."""
    P = [tuple(map(float, p)) for p in preds]
    G = [tuple(map(float, g)) for g in gts]
    n_g = len(G)
    INF = float("inf")
    # state: mask of used gts -> (matched count, -total distance) best
    best = {0: (0, 0.0)}
    for px, py in P:
        nxt = dict(best)  # leave this prediction unmatched
        for mask, (cnt, dist) in best.items():
            for g in range(n_g):
                if mask >> g & 1:
                    continue
                d = math.hypot(px - G[g][0], py - G[g][1]) * spacing
                if d <= radius:
                    key = mask | (1 << g)
                    cand = (cnt + 1, dist + d)
                    cur = nxt.get(key, (-1, INF))
                    if cand[0] > cur[0] or (cand[0] == cur[0] and cand[1] < cur[1]):
                        nxt[key] = cand
        best = nxt
    top = max(c for c, _ in best.values())
    total = min(d for c, d in best.values() if c == top)
    return top, total


def ba_dense(scores, labels, thresholds):
    out = []
    for t in thresholds:
        tp = fn = tn = fp = 0
        for s, y in zip(scores, labels):
            pos = s >= t
            if y == 1:
                tp += pos
                fn += not pos
            else:
                fp += pos
                tn += not pos
        sens = tp / (tp + fn) if tp + fn else 0.0
        spec = tn / (tn + fp) if tn + fp else 0.0
        out.append(0.5 * (sens + spec))
    return out


# --------------------------------------------------------------------------- losses

def log_softmax_vec(z):
    m = max(z)
    s = sum(math.exp(v - m) for v in z)
    return [v - m - math.log(s) for v in z]


def ce_loop(logits, target, ignore=255):
    N, C, H, W = logits.shape
    tot, n = 0.0, 0
    for a in range(N):
        for i in range(H):
            for j in range(W):
                t = int(target[a, i, j])
                if t == ignore:
                    continue
                lp = log_softmax_vec([float(logits[a, c, i, j]) for c in range(C)])
                tot -= lp[t]
                n += 1
    return tot / n if n else 0.0


def focal_loop(logits, target, gamma, ignore=255):
    N, C, H, W = logits.shape
    tot, n = 0.0, 0
    for a in range(N):
        for i in range(H):
            for j in range(W):
                t = int(target[a, i, j])
                if t == ignore:
                    continue
                lp = log_softmax_vec([float(logits[a, c, i, j]) for c in range(C)])[t]
                tot -= (1 - math.exp(lp)) ** gamma * lp
                n += 1
    return tot / n if n else 0.0


def adice_loop(probs, target, eps=1e-6, ignore=255):
    """Generalised Dice, weights 1/(n_c+eps)^2 normalised over present classes."""
    N, C, H, W = probs.shape
    counts = [0.0] * C
    inter = [0.0] * C
    union = [0.0] * C
    for a in range(N):
        for i in range(H):
            for j in range(W):
                t = int(target[a, i, j])
                if t == ignore:
                    continue
                for c in range(C):
                    p = float(probs[a, c, i, j])
                    g = 1.0 if t == c else 0.0
                    counts[c] += g
                    inter[c] += p * g
                    union[c] += p + g
    w = [1.0 / (n + eps) ** 2 if n > 0 else 0.0 for n in counts]
    sw = sum(w)
    if sw == 0:
        return 0.0
    w = [x / sw for x in w]
    num = sum(wc * ic for wc, ic in zip(w, inter))
    den = sum(wc * uc for wc, uc in zip(w, union))
    return 1 - 2 * num / (den + eps)


def ntxent_loop(zw, zs, tau):
    """Textbook NT-Xent over 2N views, positives are the twin view."""
    z = [list(map(float, r)) for r in zw] + [list(map(float, r)) for r in zs]
    n = len(zw)
    tot = 0.0
    for i in range(2 * n):
        pos = i + n if i < n else i - n
        sims = [sum(a * b for a, b in zip(z[i], z[k])) / tau for k in range(2 * n)]
        denom = sum(math.exp(sims[k]) for k in range(2 * n) if k != i)
        tot -= sims[pos] - math.log(denom)
    return tot / (2 * n)


def cls_loop(logits, labels, gamma=2.0, wb=0.5, wf=0.25):
    def terms(z, y):
        p = 1 / (1 + math.exp(-z))
        pt = p if y == 1 else 1 - p
        return -math.log(pt), -((1 - pt) ** gamma) * math.log(pt)

    tot = 0.0
    for cls in (1, 0):
        rows = [terms(float(z), int(y)) for z, y in zip(logits, labels) if int(y) == cls]
        if rows:
            tot += wb * sum(r[0] for r in rows) / len(rows) + wf * sum(r[1] for r in rows) / len(rows)
    return tot


def domain_ce_loop(logits, ids):
    return sum(-log_softmax_vec(list(map(float, row)))[int(d)] for row, d in zip(logits, ids)) / len(ids)


# --------------------------------------------------------------------------- misc

def all_matchings(n_p, n_g):
    """Every partial injective map preds -> gts, for tiny brute-force cross checks."""
    for k in range(min(n_p, n_g) + 1):
        for ps in itertools.combinations(range(n_p), k):
            for gs in itertools.permutations(range(n_g), k):
                yield list(zip(ps, gs))
