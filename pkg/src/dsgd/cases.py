"""Manufactured solutions for the p-Laplace problem on the unit square."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import sympy as sp

__all__ = ["Case", "manufactured", "trigonometric", "exponential", "polynomial", "CASES"]

_x, _y = sp.symbols("x y", real=True)


@dataclass(frozen=True)
class Case:
    name: str
    p: float
    u: Callable
    grad_u: Callable
    f: Callable
    flux: Callable
    homogeneous: bool


def _vectorize(expr):
    fn = sp.lambdify((_x, _y), expr, "numpy")

    def call(points):
        pts = np.atleast_2d(points)
        out = np.broadcast_to(np.asarray(fn(pts[:, 0], pts[:, 1]), dtype=float), (len(pts),)).copy()
        bad = ~np.isfinite(out)
        if bad.any():
            # removable singularities where grad u vanishes (p != 2)
            shifted = pts[bad] + 1e-9
            out[bad] = np.asarray(fn(shifted[:, 0], shifted[:, 1]), dtype=float)
        return out

    return call


def _stack(*fns):
    def call(points):
        return np.stack([fn(points) for fn in fns], axis=-1)

    return call


def manufactured(expr, p: float, name: str = "custom", homogeneous: bool = False) -> Case:
    """Case for ``u = expr(x, y)`` with source ``f = -div(|grad u|^{p-2} grad u)``."""
    u = sp.sympify(expr)
    gx, gy = sp.diff(u, _x), sp.diff(u, _y)
    p_s = sp.nsimplify(p)
    if p_s == 2:
        fx, fy = gx, gy
    else:
        mag = (gx**2 + gy**2) ** ((p_s - 2) / 2)
        fx, fy = mag * gx, mag * gy
    f = sp.simplify(-(sp.diff(fx, _x) + sp.diff(fy, _y)))
    return Case(
        name=name,
        p=float(p),
        u=_vectorize(u),
        grad_u=_stack(_vectorize(gx), _vectorize(gy)),
        f=_vectorize(f),
        flux=_stack(_vectorize(fx), _vectorize(fy)),
        homogeneous=homogeneous,
    )


def trigonometric(p: float = 2.0) -> Case:
    return manufactured(sp.sin(sp.pi * _x) * sp.sin(sp.pi * _y), p, "trig", homogeneous=True)


def exponential(p: float = 1.75) -> Case:
    return manufactured(sp.exp(_x + sp.pi * _y), p, "exp")


def polynomial(degree: int, p: float = 2.0, seed: int = 0) -> Case:
    """Random polynomial of total degree ``degree`` (non-homogeneous boundary data)."""
    rng = np.random.default_rng(seed)
    expr = sum(sp.Float(rng.normal()) * _x**a * _y**(d - a)
               for d in range(degree + 1) for a in range(d + 1))
    return manufactured(expr, p, f"poly{degree}")


CASES = {"trig": trigonometric, "exp": exponential}
