"""Independent reference implementations shared by several test modules."""

import math

import numpy as np

from nrd import core


def layout_sum(cin, hidden, classes):
    dims = [(cin, hidden), (hidden, hidden), (hidden, classes)]
    return sum(i * o + o for i, o in dims)


def chain_at(theta_vec, layout, x):
    """Scalar-loop evaluation of the three-layer chain on one input vector."""
    a = list(x)
    for n, l in enumerate(layout.layers):
        out = []
        for o in range(l.out_ch):
            acc = theta_vec[l.b_offset + o]
            for i in range(l.in_ch):
                acc += theta_vec[l.w_offset + o * l.in_ch + i] * a[i]
            out.append(max(acc, 0.0) if n < 2 else acc)
        a = out
    return np.array(a)


def brute_force_decode(theta_map, guidance, cfg):
    """Per output pixel: find the patch, evaluate the chain at the 4 neighbouring grid sites, interpolate."""
    layout = core.build_param_layout(cfg)
    hp, wp, _ = theta_map.shape
    r, s, c = cfg.r, cfg.s, cfg.num_classes
    out = np.zeros((hp * r, wp * r, c))
    cache = {}

    def site(pi, pj, gi, gj):
        key = (pi, pj, gi, gj)
        if key not in cache:
            x = []
            if cfg.use_coords:
                x += [gj / s, gi / s]
            if guidance is not None:
                x += list(guidance[pi * s + gi, pj * s + gj])
            cache[key] = chain_at(theta_map[pi, pj], layout, x)
        return cache[key]

    for y in range(hp * r):
        for x in range(wp * r):
            pi, pj = y // r, x // r
            ly, lx = y - pi * r, x - pj * r
            sy = min(max((ly + 0.5) * s / r - 0.5, 0.0), s - 1)
            sx = min(max((lx + 0.5) * s / r - 0.5, 0.0), s - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, s - 1), min(x0 + 1, s - 1)
            ty, tx = sy - y0, sx - x0
            top = site(pi, pj, y0, x0) * (1 - tx) + site(pi, pj, y0, x1) * tx
            bot = site(pi, pj, y1, x0) * (1 - tx) + site(pi, pj, y1, x1) * tx
            out[y, x] = top * (1 - ty) + bot * ty
    return out
