"""Outlier location under exponential tilts.

A rank-one tilt with profile Psi pushes an eigenvalue out of the bulk to the
largest z > r_inf where det(Id_{L^2} + 2 theta S_big (M(z) x Psi)) vanishes.
This module evaluates that determinant, its symmetrized eigenvalue form
(numerically kinder when Psi is positive definite), scans-and-bisects for the
largest root, and inverts theta -> Z(theta) to place the outlier at a target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .mde import DomainError, _cache_for
from .model import Profile, StructureSet, as_profile, s_big
from .rate import phi_maps


class TiltSearchError(RuntimeError):
    """No tilt bracket found for the requested target (numerical failure)."""


@dataclass
class OutlierSolve:
    theta: float
    psi: Profile
    Z: float
    bracket: tuple
    method: str
    residual: float


def _m_kron_psi(structure, z, psi):
    cache = _cache_for(structure)
    if z <= cache.r_inf:
        raise DomainError(f"z={z} must lie right of the edge {cache.r_inf}")
    return cache.m_matrix(float(z)), cache.r_inf


def outlier_det(structure: StructureSet, theta, psi, z) -> float:
    """det(Id + 2 theta S_big (M(z) x Psi)) for real z beyond the edge."""
    if theta < 0:
        raise ValueError("theta must be non-negative")
    psi = np.asarray(psi)
    m_mat, _ = _m_kron_psi(structure, z, psi)
    big = s_big(structure)
    if big.shape[0] == 0 or not big.any():
        return 1.0
    ident = np.eye(big.shape[0])
    val = np.linalg.det(ident + 2.0 * theta * big @ np.kron(m_mat, psi))
    return float(np.real(val))


def lambda_sym(structure: StructureSet, theta, z, psi) -> float:
    """Largest eigenvalue of sqrt(-M x 2 theta Psi) S_big sqrt(same).

    Similar to -2 theta S_big (M x Psi), so it hits 1 exactly where the
    outlier determinant vanishes with a sign change, but through a Hermitian
    eigenproblem. Requires positive definite psi (the square root must not
    collapse); lambda -> 0 linearly as theta -> 0.
    """
    if theta < 0:
        raise ValueError("theta must be non-negative")
    psi = np.asarray(psi)
    if np.linalg.eigvalsh(psi).min() <= 0:
        raise ValueError("psi must be positive definite for the symmetrized "
                         "form; use the determinant root instead")
    m_mat, _ = _m_kron_psi(structure, z, psi)
    big = s_big(structure)
    if big.shape[0] == 0 or not big.any():
        return 0.0
    q = np.kron(-m_mat, 2.0 * theta * psi)
    w, v = np.linalg.eigh(q)
    root = v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.conj().T
    return float(np.linalg.eigvalsh(root @ big @ root).max())


def _realized_bracket(structure, theta, psi):
    """Upper end of the z scan: any root satisfies
    1 <= 2 theta ||S_big|| ||Psi|| / (z - r_inf), so c0 + c1 theta with
    c1 = 4 ||S_big|| (||Psi|| + 1) clears it with slack."""
    cache = _cache_for(structure)
    big = s_big(structure)
    norm_s = np.linalg.norm(big, 2) if big.size else 0.0
    norm_psi = np.linalg.norm(psi, 2)
    norm_m1 = np.linalg.norm(cache.m_matrix(cache.r_inf + 1.0), 2)
    c0 = cache.r_inf + 1.0 + norm_s * norm_m1
    c1 = 4.0 * norm_s * (norm_psi + 1.0)
    return c0 + c1 * theta


def largest_outlier(structure: StructureSet, theta, psi,
                    method=None) -> OutlierSolve:
    """Largest z > r_inf solving the outlier equation, or Z = r_inf if none.

    Scans a log-spaced z grid downward from the realized bound c0 + c1 theta
    and bisects the first sign change of the determinant (or of lambda - 1
    when psi is positive definite), so the largest root is found first.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    prof = as_profile(psi)
    psi_mat = prof.psi
    cache = _cache_for(structure)
    r = cache.r_inf
    z_top = _realized_bracket(structure, theta, psi_mat)
    if method is None:
        pd = np.linalg.eigvalsh(psi_mat).min() > 1e-12
        method = "lambda-root" if pd else "det-root"
    if method == "lambda-root":
        def fun(z):
            return lambda_sym(structure, theta, z, psi_mat) - 1.0
    elif method == "det-root":
        def fun(z):
            return outlier_det(structure, theta, psi_mat, z)
    else:
        raise ValueError(f"unknown method {method!r}")

    guard = 1e-9 * (1.0 + abs(r))
    offsets = np.geomspace(guard, max(z_top - r, 2.0 * guard), 160)[::-1]
    zs = r + offsets
    prev_z, prev_f = None, None
    for z in zs:
        f = fun(float(z))
        if prev_f is not None and np.sign(f) != np.sign(prev_f) and prev_f != 0:
            root = brentq(fun, float(z), prev_z, xtol=1e-13, rtol=1e-15)
            return OutlierSolve(theta=float(theta), psi=prof, Z=float(root),
                                bracket=(float(z), float(prev_z)),
                                method=method, residual=abs(fun(float(root))))
        prev_z, prev_f = float(z), f
    return OutlierSolve(theta=float(theta), psi=prof, Z=float(r),
                        bracket=(float(r), float(z_top)), method=method,
                        residual=0.0)


def tilt_for_target(structure: StructureSet, x, psi, theta_steps=80) -> float:
    """Smallest theta whose tilt places the outlier at x, using phi_hat.

    Z_phi(theta) := largest_outlier at the profile phi_hat(theta, x, Psi).
    Continuation runs theta upward from theta_0 = -m(x)/2 by factors of 1.15
    until Z_phi brackets x, then bisects. Starting at theta_0 keeps the
    returned root the smallest one: Z_phi(theta_0) = r_inf < x always.
    """
    cache = _cache_for(structure)
    x = float(x)
    if x <= cache.r_inf:
        raise DomainError(f"x={x} must lie right of the edge {cache.r_inf}")
    psi = as_profile(psi).psi
    if np.linalg.eigvalsh(psi).min() <= 0:
        raise ValueError("psi must be positive definite")

    def z_of(theta):
        _, phi_hat = phi_maps(structure, theta, x, psi)
        return largest_outlier(structure, theta, phi_hat).Z

    theta0 = -cache.m_scalar(x) / 2.0
    trace = [(theta0, z_of(theta0))]
    theta_lo = theta0
    theta_hi = None
    for _ in range(theta_steps):
        theta = trace[-1][0] * 1.15
        z = z_of(theta)
        trace.append((theta, z))
        if z >= x:
            theta_hi = theta
            break
        theta_lo = theta
    if theta_hi is None:
        lines = ", ".join(f"(theta={t:.4g}, Z={z:.6g})" for t, z in trace[-6:])
        raise TiltSearchError(
            f"no tilt below {trace[-1][0]:.4g} reaches Z={x} "
            f"(scan tail: {lines})")
    return float(brentq(lambda t: z_of(t) - x, theta_lo, theta_hi,
                        xtol=1e-11, rtol=1e-14))
