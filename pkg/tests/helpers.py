"""Shared test utilities: finite-difference gradients and small oracles."""
from __future__ import annotations

import numpy as np
import torch


def central_diff(f, x: torch.Tensor, index: tuple, h: float = 1e-5) -> float:
    """Central finite difference of scalar f w.r.t. x[index], double precision."""
    with torch.no_grad():
        orig = x[index].item()
        x[index] = orig + h
        plus = float(f())
        x[index] = orig - h
        minus = float(f())
        x[index] = orig
    return (plus - minus) / (2.0 * h)


def check_grad_against_fd(
    f,
    tensors: list[torch.Tensor],
    trials: int = 20,
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    seed: int = 0,
    abs_floor: float = 1e-7,
) -> None:
    """Compare autograd of scalar f() against central differences.

    Picks `trials` random coordinates across `tensors` (all requiring grad,
    double precision) and asserts relative error < rel_tol; coordinates where
    both gradients are below abs_floor count as agreeing.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        assert t.dtype == torch.float64, "finite-difference checks need float64"
        assert t.requires_grad
        if t.grad is not None:
            t.grad = None
    out = f()
    out.backward()
    grads = [t.grad.detach().clone() for t in tensors]
    for _ in range(trials):
        ti = int(rng.integers(0, len(tensors)))
        t = tensors[ti]
        index = tuple(int(rng.integers(0, s)) for s in t.shape)
        analytic = float(grads[ti][index])
        numeric = central_diff(f, t, index, h=h)
        scale = max(abs(analytic), abs(numeric))
        if scale < abs_floor:
            continue
        rel = abs(analytic - numeric) / scale
        assert rel < rel_tol, (
            f"gradient mismatch at tensor {ti} index {index}: "
            f"analytic {analytic!r} vs numeric {numeric!r} (rel {rel:.2e})"
        )


def bfs_components(same_class: np.ndarray, edge_ok_right: np.ndarray, edge_ok_down: np.ndarray):
    """Oracle connected components over a 4-neighbor grid.

    same_class: (H, W) int labels; edges connect equal labels where the
    corresponding edge mask is True.  Returns (H, W) component ids numbered
    by first appearance in row-major order.
    """
    h, w = same_class.shape
    comp = -np.ones((h, w), dtype=np.int64)
    next_id = 0
    for sy in range(h):
        for sx in range(w):
            if comp[sy, sx] >= 0:
                continue
            comp[sy, sx] = next_id
            stack = [(sy, sx)]
            while stack:
                y, x = stack.pop()
                if x + 1 < w and comp[y, x + 1] < 0:
                    if same_class[y, x] == same_class[y, x + 1] and edge_ok_right[y, x]:
                        comp[y, x + 1] = next_id
                        stack.append((y, x + 1))
                if y + 1 < h and comp[y + 1, x] < 0:
                    if same_class[y, x] == same_class[y + 1, x] and edge_ok_down[y, x]:
                        comp[y + 1, x] = next_id
                        stack.append((y + 1, x))
                if x - 1 >= 0 and comp[y, x - 1] < 0:
                    if same_class[y, x] == same_class[y, x - 1] and edge_ok_right[y, x - 1]:
                        comp[y, x - 1] = next_id
                        stack.append((y, x - 1))
                if y - 1 >= 0 and comp[y - 1, x] < 0:
                    if same_class[y, x] == same_class[y - 1, x] and edge_ok_down[y - 1, x]:
                        comp[y - 1, x] = next_id
                        stack.append((y - 1, x))
            next_id += 1
    return comp
