"""Independent reference computations shared by the test modules."""

import numpy as np

from objsep.miml import PARAM_NAMES, BasisBag, Hyper, batch_loss, init_params


def randomized_params(hyper: Hyper, seed: int):
    """Parameters with non-trivial biases, BN affine terms and running stats."""
    p = init_params(hyper, seed)
    rng = np.random.default_rng(1000 + seed)
    for k in PARAM_NAMES:
        if k.endswith(("_b", "beta")):
            p.arrays[k] = rng.normal(0, 0.3, p[k].shape)
        elif k.endswith("gamma"):
            p.arrays[k] = rng.uniform(0.5, 1.5, p[k].shape)
    for k in ("bn1_mean", "bn2_mean"):
        p.arrays[k] = rng.normal(0, 0.1, p[k].shape)
    for k in ("bn1_var", "bn2_var"):
        p.arrays[k] = rng.uniform(0.5, 2.0, p[k].shape)
    return p


def random_bags(hyper: Hyper, n: int, seed: int):
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(n):
        k = int(rng.integers(1, min(3, hyper.l - 1) + 1))
        labels = rng.choice(hyper.l, size=k, replace=False)
        bags.append(BasisBag(rng.uniform(0, 1, (hyper.m, hyper.f)), labels, f"bag{i}"))
    return bags


def central_difference(bags, params, name: str, h: float = 1e-5, mode: str = "eval"):
    """Central finite-difference gradient of the mean hinge loss w.r.t. one array."""
    a = params.arrays[name]
    grad = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        orig = a[idx]
        a[idx] = orig + h
        up = batch_loss(bags, params, mode)
        a[idx] = orig - h
        down = batch_loss(bags, params, mode)
        a[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(a, b, floor: float = 1e-6) -> float:
    """||a - b|| / max(||a||, ||b||, floor); the floor covers gradients that vanish exactly."""
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / den)


def brute_force_best_mean(table):
    """Best mean over all assignments of a square score table, by recursion."""
    n = len(table)

    def rec(row, used):
        if row == n:
            return 0.0
        return max(table[row][c] + rec(row + 1, used | {c}) for c in range(n) if c not in used)

    return rec(0, frozenset()) / n
