"""Independent brute-force reference computations used by the tests."""

from collections import deque

import numpy as np
from scipy import ndimage


def brute_minima(vals, boundary="open", neighborhood="edge4"):
    nr, nc = vals.shape
    steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if neighborhood == "vertex8":
        steps += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    out = []
    for r in range(nr):
        for c in range(nc):
            nb = []
            for dr, dc in steps:
                rr, cc = r + dr, c + dc
                if boundary == "torus":
                    rr, cc = rr % nr, cc % nc
                elif not (0 <= rr < nr and 0 <= cc < nc):
                    continue
                if (rr, cc) != (r, c):
                    nb.append(vals[rr, cc])
            if all(vals[r, c] < v for v in nb):
                out.append((r, c))
    return out, steps


def brute_na_total(vals, boundary="open"):
    """Sum over births u of 1/#{cells x: z_x >= u and all neighbours >= u}."""
    minima, steps = brute_minima(vals, boundary)
    nr, nc = vals.shape
    total = 0.0
    for r0, c0 in minima:
        u = vals[r0, c0]
        y = 0
        for r in range(nr):
            for c in range(nc):
                ok = vals[r, c] >= u
                for dr, dc in steps:
                    rr, cc = r + dr, c + dc
                    if boundary == "torus":
                        rr, cc = rr % nr, cc % nc
                    elif not (0 <= rr < nr and 0 <= cc < nc):
                        continue
                    ok = ok and vals[rr, cc] >= u
                y += ok
        total += 1.0 / y
    return total


def flood_components(mask, boundary="open"):
    """Edge-connected component count; scipy labelling for open boundaries, BFS on the torus."""
    if boundary == "open":
        return ndimage.label(mask)[1]
    nr, nc = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    count = 0
    for r in range(nr):
        for c in range(nc):
            if mask[r, c] and not seen[r, c]:
                count += 1
                q = deque([(r, c)])
                seen[r, c] = True
                while q:
                    a, b = q.popleft()
                    for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        x, y = (a + da) % nr, (b + db) % nc
                        if mask[x, y] and not seen[x, y]:
                            seen[x, y] = True
                            q.append((x, y))
    return count
