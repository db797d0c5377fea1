"""Independent reference implementations shared by the unit and acceptance tests."""
import math

import numpy as np


def chord_oracle(src, pixel, half):
    """Length of the segment of the line src->pixel inside [-half, half]^3 (Liang-Barsky clipping)."""
    d = pixel - src
    t0, t1 = 0.0, 1.0
    for a in range(3):
        if d[a] == 0:
            if abs(src[a]) > half:
                return 0.0
            continue
        ta, tb = sorted(((-half - src[a]) / d[a], (half - src[a]) / d[a]))
        t0, t1 = max(t0, ta), min(t1, tb)
    return max(0.0, t1 - t0) * float(np.linalg.norm(d))


def world_pixels(geom):
    """Detector pixel centres expressed in the volume frame (inverse couch roll)."""
    a = math.radians(geom.couch_roll_deg)
    rot = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
    pts = geom.pixel_centres().reshape(-1, 3)
    return pts @ rot, rot.T @ geom.source


def ssim_direct(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Windowed SSIM straight from the definition, one window at a time."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i : i + size, j : j + size], b[i : i + size, j : j + size]
            ma, mb = np.sum(w * pa), np.sum(w * pb)
            va, vb = np.sum(w * (pa - ma) ** 2), np.sum(w * (pb - mb) ** 2)
            cov = np.sum(w * (pa - ma) * (pb - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def mmd_brute(x, y):
    d = x.shape[1]
    k = lambda u, v: (float(np.dot(u, v)) / d + 1.0) ** 3  # noqa: E731
    m, n = len(x), len(y)
    sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    syy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n)) / (m * n)
    return sxx + syy - 2 * sxy


def brute_air_fraction(img, r, c, size):
    n = 0
    for i in range(r, r + size):
        for j in range(c, c + size):
            n += img[i, j] < 0.02
    return n / (size * size)
