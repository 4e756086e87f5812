"""Central finite differences, used as the independent oracle for backward()."""
from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_grad(f: Callable[[dict[str, np.ndarray]], float],
                 params: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """d f / d params by central differences. ``f`` must not mutate its input."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = f(params)
            p[idx] = old - h
            fm = f(params)
            p[idx] = old
            g[idx] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       rtol: float = 1e-4, atol: float = 1e-7) -> float:
    """Worst elementwise |a-n| / max(|a|, |n|, atol/rtol).

    A result below ``rtol`` means every entry satisfies
    |a-n| <= rtol * max(|a|, |n|) or |a-n| <= atol.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
