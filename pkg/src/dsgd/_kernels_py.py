"""Pure numpy version of the compiled kernels (same signatures)."""

import numpy as np


def flux_contract(B, W, U, p, eps, jacobian=True):
    """Residual and tangent of sigma_eps(g) = (eps^2 + |g|^2)^((p-2)/2) g.

    ``B`` is (n_elem, n_points, dim, n_local), ``W`` (n_elem, n_points) and
    ``U`` (n_elem, n_local).  Returns ``(res, jac)`` with
    ``res[e] = sum_q W sigma(g_q) . B_q`` and ``jac`` its exact derivative.
    """
    g = np.einsum("eqdt,et->eqd", B, U)
    if p == 2.0:
        a = np.ones(g.shape[:2])
        b = np.zeros(g.shape[:2])
    else:
        s = eps * eps + (g * g).sum(-1)
        pos = s > 0
        safe = np.where(pos, s, 1.0)
        a = np.where(pos, safe ** (0.5 * (p - 2.0)), 0.0)
        b = np.where(pos, (p - 2.0) * a / safe, 0.0)
    gB = np.einsum("eqd,eqdt->eqt", g, B)
    res = np.einsum("eq,eqt->et", W * a, gB)
    if not jacobian:
        return res, np.zeros((0, 0, 0))
    jac = np.einsum("eq,eqdi,eqdj->eij", W * a, B, B, optimize=True)
    jac += np.einsum("eq,eqi,eqj->eij", W * b, gB, gB, optimize=True)
    return res, jac
