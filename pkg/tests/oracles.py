"""Independent reference implementations used by several test modules.

Everything here is written as literal loops so that it shares no code path
with the vectorised package functions.
"""
import math

import numpy as np


def patch_values(sample, grid, q):
    r, c = divmod(q, grid.cols)
    out = []
    for y in range(r * grid.patch_h, (r + 1) * grid.patch_h):
        for x in range(c * grid.patch_w, (c + 1) * grid.patch_w):
            out.append(float(sample[y][x]))
    return out


def naive_expl(samples, grid, q, sigma_x=1.0):
    total = 0.0
    for i in range(len(samples)):
        for j in range(len(samples)):
            a, b = patch_values(samples[i], grid, q), patch_values(samples[j], grid, q)
            total += sum((u - v) ** 2 for u, v in zip(a, b)) / (2 * sigma_x ** 2)
    return total


def naive_likeli(samples, grid, q, sigma_x=1.0):
    total = 0.0
    for i in range(len(samples)):
        for j in range(len(samples)):
            a, b = patch_values(samples[i], grid, q), patch_values(samples[j], grid, q)
            total += math.exp(-sum((u - v) ** 2 for u, v in zip(a, b)) / (2 * sigma_x ** 2))
    return total


def entropy_surrogate(samples, grid, q, visited, sigma_x=1.0):
    """Pairwise-distance entropy surrogate over the query set ``visited + [q]``.

    Equal-weight mixture of Gaussians centred on the ensemble members; the
    pairwise term for (i, j) is log of the product over every queried pixel
    of exp(d^2 / 2 sigma^2), summed over all ordered pairs.
    """
    locations = list(visited) + [q]
    total = 0.0
    for i in range(len(samples)):
        for j in range(len(samples)):
            prod = 1.0
            for loc in locations:
                a, b = patch_values(samples[i], grid, loc), patch_values(samples[j], grid, loc)
                for u, v in zip(a, b):
                    prod *= math.exp((u - v) ** 2 / (2 * sigma_x ** 2))
            total += math.log(prod)
    return total


def surrogate_argmax(samples, grid, visited, sigma_x=1.0):
    best, best_q = -math.inf, None
    for q in range(grid.n_candidates):
        if q in visited:
            continue
        v = entropy_surrogate(samples, grid, q, visited, sigma_x)
        if v > best:
            best, best_q = v, q
    return best_q


def worst_fd_error(params, loss_fn, grads, rng, per_tensor=6, h=1e-6, floor=1e-7):
    """Largest relative gap between analytic gradients and central differences
    over a random subset of coordinates of every tensor in *params*."""
    worst = 0.0
    for k, v in params.items():
        for i in rng.choice(v.size, size=min(v.size, per_tensor), replace=False):
            idx = np.unravel_index(i, v.shape)
            old = v[idx]
            v[idx] = old + h
            lp = loss_fn()
            v[idx] = old - h
            lm = loss_fn()
            v[idx] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - grads[k][idx]) / max(abs(fd), floor))
    return worst
