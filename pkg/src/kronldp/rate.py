"""Rate function machinery: J, K, the profile maps and the inf-sup optimizer.

The objects here combine the real-axis spectral quantities (Stieltjes
transform, its inverse, the log potential) into the tilted free energy
F(theta, x, Psi) = beta (L J(x, theta) - K(theta, phi_hat)) and optimize it:
sup over theta on a compact interval, then inf over trace-one PSD profiles
Psi subject to Tr[Psi^T S(Psi)] >= eps, with eps driven down a geometric
ladder until the value stabilizes.

A note on K: the constant term is (ln det Psi + L ln L) / 2. With the other
sign the identity K(theta, phi_hat) = L J(x, theta) on 2 theta <= -m(x)
fails by exactly L ln L for every L >= 2, which would make F's plateau at 0
(the anchor of the whole variational formula) impossible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .mde import DomainError, _cache_for
from .model import Profile, StructureSet, apply_S, as_profile, stream


class DegenerateModelError(ValueError):
    """S annihilates every profile (all A_j = 0); no tilt changes the law."""


@dataclass
class RateBreakdown:
    theta: float
    x: float
    psi: Profile
    J: float
    K: float
    varphi: np.ndarray
    phi_hat: np.ndarray
    F: float


@dataclass
class RateResult:
    x: float
    value: float
    theta_star: float
    psi_star: Profile
    epsilon_used: float
    stability_flag: bool
    diagnostics: dict = field(default_factory=dict)


@dataclass
class OptConfig:
    """Knobs for the profile optimizer; defaults match the CLI."""
    starts: int = 8
    stab_tol: float = 1e-4
    max_rungs: int = 12
    nm_maxiter: int = 150
    seed: int = 0
    eps0: float | None = None


def _dagger(mat, beta):
    return mat.T if beta == 1 else mat.conj().T


def _quad_trace(structure, a, b, beta):
    """Tr[a' S(b')] with ' = transpose (beta 1) or conjugate transpose (beta 2)."""
    return float(np.trace(_dagger(a, beta)
                          @ apply_S(structure, _dagger(b, beta))).real)


def _check_beta(beta):
    if beta not in (1, 2):
        raise ValueError(f"beta must be 1 or 2, got {beta!r}")
    return beta


# ---------------------------------------------------------------------------
# pointwise quantities

def j_value(structure: StructureSet, x, theta) -> float:
    """Two-branch tilted log-potential functional J(x, theta), theta > 0."""
    if theta <= 0:
        raise ValueError("theta must be positive (callers use F(0) = 0 instead)")
    cache = _cache_for(structure)
    x = float(x)
    if x <= cache.r_inf:
        raise DomainError(f"x={x} must lie right of the edge {cache.r_inf}")
    m_x = float(np.trace(cache.m_matrix(x)).real) / structure.L
    head = -0.5 * (1.0 + np.log(2.0 * theta))
    if 2.0 * theta <= -m_x:
        t = cache.inverse_neg_m(2.0 * theta)
        return float(theta * t + head - 0.5 * cache.log_potential(t))
    return float(theta * x + head - 0.5 * cache.log_potential(x))


def k_value(structure: StructureSet, theta, psi, beta=1) -> float:
    """Tilted cumulant functional K(theta, psi); -inf for singular psi."""
    _check_beta(beta)
    if theta < 0:
        raise ValueError("theta must be non-negative")
    psi = np.asarray(psi)
    if psi.shape != (structure.L, structure.L):
        raise ValueError(f"psi must be {structure.L}x{structure.L}")
    if np.max(np.abs(psi - psi.conj().T)) > 1e-8:
        raise ValueError("psi must be symmetric/Hermitian")
    if np.linalg.eigvalsh(psi).min() < -1e-10:
        raise ValueError("psi must be positive semi-definite")
    L = structure.L
    sign, logdet = np.linalg.slogdet(psi)
    if sign <= 0 or not np.isfinite(logdet):
        return -np.inf
    pd = _dagger(psi, beta)
    quad = float(np.trace(pd @ apply_S(structure, pd)).real)
    lin = float(np.trace(_dagger(structure.a0, beta) @ psi).real)
    return (L * L * theta * theta * quad + L * theta * lin
            + 0.5 * (logdet + L * np.log(L)))


def phi_maps(structure: StructureSet, theta, x, psi):
    """The pair (varphi, phi_hat) entering K along the optimal tilt.

    varphi = -M(max{(-m)^{-1}(2 theta), x}) / (2 theta L), with the inverse
    read as r_inf when 2 theta exceeds the range of -m (the max then resolves
    to x); phi_hat adds (1 + m(x)/(2 theta))_+ Psi and has unit trace.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    cache = _cache_for(structure)
    x = float(x)
    if x <= cache.r_inf:
        raise DomainError(f"x={x} must lie right of the edge {cache.r_inf}")
    psi = as_profile(psi).psi
    L = structure.L
    m_mat = cache.m_matrix(x)
    m_x = float(np.trace(m_mat).real) / L
    two = 2.0 * theta
    if two < -m_x:
        point_mat = cache.m_matrix(cache.inverse_neg_m(two))
    else:
        point_mat = m_mat
    varphi = -point_mat / (two * L)
    plus = max(1.0 + m_x / two, 0.0)
    phi_hat = varphi + plus * psi
    return varphi, phi_hat


def f_value(structure: StructureSet, theta, x, psi, beta=1) -> float:
    """F(theta, x, psi) = beta (L J - K at phi_hat); F(0) := 0 by continuity."""
    _check_beta(beta)
    if theta < 0:
        raise ValueError("theta must be non-negative")
    if theta == 0:
        return 0.0
    _, phi_hat = phi_maps(structure, theta, x, psi)
    return beta * (structure.L * j_value(structure, x, theta)
                   - k_value(structure, theta, phi_hat, beta=beta))


def rate_breakdown(structure: StructureSet, theta, x, psi, beta=1) -> RateBreakdown:
    """All intermediate quantities behind one F evaluation."""
    _check_beta(beta)
    if theta <= 0:
        raise ValueError("theta must be positive for a breakdown")
    prof = as_profile(psi)
    varphi, phi_hat = phi_maps(structure, theta, x, prof.psi)
    j = j_value(structure, x, theta)
    k = k_value(structure, theta, phi_hat, beta=beta)
    f = beta * (structure.L * j - k)
    return RateBreakdown(theta=float(theta), x=float(x), psi=prof, J=j, K=k,
                         varphi=varphi, phi_hat=phi_hat, F=f)


def theta_cap(structure: StructureSet, m_cap, eta, eps) -> float:
    """Compact-interval endpoint -m(eta) + 4 (m_cap + b0) / (L^2 eps),
    with b0 = 2 L ||A_0||."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    cache = _cache_for(structure)
    if eta <= cache.r_inf:
        raise DomainError(f"eta={eta} must lie right of the edge {cache.r_inf}")
    b0 = 2.0 * structure.L * np.linalg.norm(structure.a0, 2)
    return float(-cache.m_scalar(float(eta))
                 + 4.0 * (float(m_cap) + b0) / (structure.L ** 2 * eps))


# ---------------------------------------------------------------------------
# sup over theta

@dataclass
class _CurveBase:
    """Profile-independent pieces of theta -> F(theta, x, .) for one x."""
    theta_x: float
    p: np.ndarray
    tpp: float
    lap: float
    u_x: float


def _curve_base(structure, x, beta) -> _CurveBase:
    cache = _cache_for(structure)
    L = structure.L
    m_mat = cache.m_matrix(float(x))
    m_x = float(np.trace(m_mat).real) / L
    p = -m_mat / (2.0 * L)
    return _CurveBase(theta_x=-m_x / 2.0, p=p,
                      tpp=_quad_trace(structure, p, p, beta),
                      lap=float(np.trace(_dagger(structure.a0, beta) @ p).real),
                      u_x=cache.log_potential(float(x)))


def _f_curve(structure, x, psi, beta, base=None):
    """Closed form of theta -> F(theta, x, psi) on theta >= theta_x.

    On that range phi_hat = P/theta + (1 - theta_x/theta) Psi with
    P = -M(x)/(2L), so all traces in K reduce to five precomputed numbers
    and only the log-determinant needs a per-theta evaluation.
    """
    if base is None:
        base = _curve_base(structure, x, beta)
    L = structure.L
    theta_x, p, tpp, lap, u_x = base.theta_x, base.p, base.tpp, base.lap, base.u_x
    tps = _quad_trace(structure, p, psi, beta)
    tss = _quad_trace(structure, psi, psi, beta)
    las = float(np.trace(_dagger(structure.a0, beta) @ psi).real)
    l_ln_l = L * np.log(L)

    def f_many(thetas):
        th = np.atleast_1d(np.asarray(thetas, dtype=float))
        c = 1.0 - theta_x / th
        mats = (p[None, :, :] / th[:, None, None]
                + c[:, None, None] * psi[None, :, :])
        sign, logdet = np.linalg.slogdet(mats)
        ct = c * th
        k = (L * L * (tpp + 2.0 * ct * tps + ct * ct * tss)
             + L * (lap + ct * las)
             + 0.5 * (logdet + l_ln_l))
        j = th * x - 0.5 * (1.0 + np.log(2.0 * th)) - 0.5 * u_x
        f = beta * (L * j - k)
        return np.where(sign > 0, f, -np.inf)

    return theta_x, f_many


def _sup_on_curve(theta_x, f_many, theta_hi, refine="golden"):
    """Maximize one F curve on [theta_x, theta_hi]: coarse 64-point grid
    (quadratically clustered toward theta_x), then local refinement.

    refine="golden" is the reference mode; "zoom" shrinks the bracket with
    batched grid evaluations instead, which costs far fewer python round
    trips inside the profile optimizer and agrees with golden to ~1e-12 in
    value (the curve is flat to second order at its maximum).
    """
    if theta_hi <= theta_x:
        theta_hi = theta_x * (1.0 + 1e-6) + 1e-9
    u = np.linspace(0.0, 1.0, 64)
    grid = theta_x + (theta_hi - theta_x) * u * u
    vals = f_many(grid)
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    th_best, f_best = float(grid[i]), float(vals[i])

    if refine == "zoom":
        for _ in range(5):
            xs = np.linspace(lo, hi, 17)
            ys = f_many(xs)
            j = int(np.argmax(ys))
            if ys[j] > f_best:
                th_best, f_best = float(xs[j]), float(ys[j])
            lo, hi = xs[max(j - 1, 0)], xs[min(j + 1, 16)]
    else:
        def neg(t):
            return -float(f_many(t)[0])

        res = None
        if 0 < i < len(grid) - 1 and vals[i] > vals[i - 1] and vals[i] > vals[i + 1]:
            try:
                res = minimize_scalar(neg, bracket=(lo, grid[i], hi),
                                      method="golden", options={"xtol": 1e-9})
            except ValueError:
                res = None
        if res is None:
            res = minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-10})
        if -float(res.fun) > f_best:
            th_best, f_best = float(res.x), -float(res.fun)

    if f_best <= 0.0 or not np.isfinite(f_best):
        return float(theta_x), 0.0
    return th_best, f_best


def sup_theta(structure: StructureSet, x, psi, beta=1, eps=None):
    """Maximize F over [theta_x, Theta(x+1, (r_inf+x)/2, eps)].

    Coarse grid of 64 points plus golden-section refinement around the best
    bracket. Returns (theta_star, F_star) with F_star >= 0 since
    F(theta_x) = 0 is always available.
    """
    _check_beta(beta)
    psi = as_profile(psi).psi
    cache = _cache_for(structure)
    x = float(x)
    if x <= cache.r_inf:
        raise DomainError(f"x={x} must lie right of the edge {cache.r_inf}")
    if eps is None:
        eps = max(_quad_trace(structure, psi, psi, beta), 1e-300)
    theta_x, f_many = _f_curve(structure, x, psi, beta)
    theta_hi = theta_cap(structure, x + 1.0, 0.5 * (cache.r_inf + x), eps)
    return _sup_on_curve(theta_x, f_many, theta_hi)


# ---------------------------------------------------------------------------
# inf over profiles

def _seed_factors(structure, cfg, rung, warm, complex_params):
    """Start factors C for one ladder rung: identity profile, the top
    eigenprojector of A_0, seeded random perturbations, and any warm factor."""
    L = structure.L
    seeds = [np.eye(L)]
    w, v = np.linalg.eigh(structure.a0)
    top = np.zeros((L, L), dtype=v.dtype)
    top[:, 0] = v[:, -1] if abs(w[-1]) > 1e-12 else np.eye(L)[:, 0]
    seeds.append(top)
    rng = stream(cfg.seed, 7, rung)
    while len(seeds) < max(cfg.starts, 2):
        c = np.eye(L) / np.sqrt(L) + 0.7 * rng.standard_normal((L, L))
        if complex_params:
            c = c + 0.7j * rng.standard_normal((L, L))
        seeds.append(c)
    if warm is not None:
        seeds.insert(0, np.array(warm))
    return seeds


def _pack(c, complex_params):
    if complex_params:
        return np.concatenate([np.real(c).ravel(), np.imag(c).ravel()])
    return np.real(c).ravel()


def _unpack(v, L, complex_params):
    if complex_params:
        return v[:L * L].reshape(L, L) + 1j * v[L * L:].reshape(L, L)
    return v.reshape(L, L)


def rate_function(structure: StructureSet, x, beta=None, opt_config=None,
                  warm_start=None) -> RateResult:
    """Rate of the upper tail at x: inf over profiles of sup over tilts.

    Profiles are parametrized as C C*/Tr(C C*) (PSD and trace one for free),
    the constraint Tr[Psi' S(Psi)] >= eps is kept by projecting infeasible
    iterates toward Id/L plus a penalty, and eps runs down a geometric ladder
    seeded with the previous rung's optimum, which makes the ladder values
    non-increasing by construction.
    """
    beta = _check_beta(structure.beta if beta is None else beta)
    cfg = opt_config or OptConfig()
    cache = _cache_for(structure)
    x = float(x)
    if x <= cache.r_inf:
        raise DomainError(f"x={x} must lie right of the edge {cache.r_inf}")
    L = structure.L
    id_l = np.eye(L) / L
    q0 = _quad_trace(structure, id_l, id_l, beta)
    if q0 <= 1e-14:
        raise DegenerateModelError(
            "Tr[Psi S(Psi)] vanishes for every profile; the variational "
            "rate function is not defined for a noiseless model")

    if L == 1:
        one = np.ones((1, 1))
        th, val = sup_theta(structure, x, one, beta=beta, eps=q0)
        return RateResult(x=x, value=val, theta_star=th, psi_star=as_profile(one),
                          epsilon_used=q0, stability_flag=True,
                          diagnostics={"ladder": [(q0, val)], "fevals": 1,
                                       "starts": 1})

    complex_params = not structure.is_real
    evals = {"n": 0}
    base = _curve_base(structure, x, beta)

    def psi_from_vec(v):
        c = _unpack(v, L, complex_params)
        g = c @ c.conj().T
        tr = float(np.trace(g).real)
        if not np.isfinite(tr) or tr <= 1e-300:
            return None
        return g / tr

    def qform(p):
        return _quad_trace(structure, p, p, beta)

    def project_feasible(psi, q, eps):
        """Smallest blend s with Tr[((1-s)psi + s Id/L)' S(same)] >= eps."""
        t_pi = _quad_trace(structure, psi, id_l, beta)
        # q(s) = (1-s)^2 q + 2 s (1-s) t_pi + s^2 q0, q(1) = q0 >= eps
        coeffs = [q - 2.0 * t_pi + q0, 2.0 * (t_pi - q), q - eps]
        roots = np.roots(coeffs) if abs(coeffs[0]) > 1e-300 else \
            np.array([-coeffs[2] / coeffs[1]]) if abs(coeffs[1]) > 1e-300 else \
            np.array([])
        s_candidates = [float(r.real) for r in roots
                        if abs(r.imag) < 1e-10 and 0.0 < r.real <= 1.0]
        s = min(s_candidates) if s_candidates else 1.0
        return (1.0 - s) * psi + s * id_l, s

    def sup_fast(psi, th_hi):
        theta_x, f_many = _f_curve(structure, x, psi, beta, base=base)
        return _sup_on_curve(theta_x, f_many, th_hi, refine="zoom")

    def objective(v, eps, th_hi):
        evals["n"] += 1
        psi = psi_from_vec(v)
        if psi is None:
            return 1e6
        q = qform(psi)
        s = 0.0
        if q < eps:
            psi, s = project_feasible(psi, q, eps)
        try:
            _, f = sup_fast(psi, th_hi)
        except (ValueError, np.linalg.LinAlgError):
            return 1e6
        return f + (5.0 * s * (1.0 + abs(f)) if s > 0 else 0.0)

    eps0 = cfg.eps0 if cfg.eps0 is not None else q0
    ladder = []
    warm_c = np.array(warm_start) if warm_start is not None else None
    best = None  # (value, theta, psi, eps)
    stable = False
    prev_val = None
    for rung in range(cfg.max_rungs):
        eps = eps0 * 2.0 ** (-rung)
        th_hi = theta_cap(structure, x + 1.0, 0.5 * (cache.r_inf + x), eps)
        rung_best = None
        for c0 in _seed_factors(structure, cfg, rung, warm_c, complex_params):
            v0 = _pack(c0, complex_params)
            out = minimize(objective, v0, args=(eps, th_hi), method="Nelder-Mead",
                           options={"maxiter": cfg.nm_maxiter, "fatol": 1e-9,
                                    "xatol": 1e-8})
            if rung_best is None or out.fun < rung_best[0]:
                rung_best = (out.fun, out.x)
        psi = psi_from_vec(rung_best[1])
        if psi is None:
            psi = id_l
        q = qform(psi)
        if q < eps:
            psi, _ = project_feasible(psi, q, eps)
        th, val = sup_fast(psi, th_hi)
        ladder.append((eps, val))
        # warm-start the next rung with a factor of the *projected* profile:
        # it is feasible there too, so the next rung can only improve on val
        w_psi, v_psi = np.linalg.eigh(psi)
        warm_c = v_psi @ np.diag(np.sqrt(np.clip(w_psi, 0.0, None)))
        best = (val, th, psi, eps)
        if prev_val is not None and abs(val - prev_val) <= cfg.stab_tol * max(1.0, abs(val)):
            stable = True
            break
        prev_val = val

    val, th, psi, eps = best
    return RateResult(x=x, value=float(val), theta_star=float(th),
                      psi_star=as_profile(psi), epsilon_used=float(eps),
                      stability_flag=stable,
                      diagnostics={"ladder": ladder, "fevals": evals["n"],
                                   "starts": cfg.starts})


def rate_curve(structure: StructureSet, x_grid, beta=None,
               opt_config=None) -> list:
    """Rate function on a grid, warm-starting each point from the previous."""
    results = []
    warm = None
    for x in x_grid:
        res = rate_function(structure, x, beta=beta, opt_config=opt_config,
                            warm_start=warm)
        results.append(res)
        w, v = np.linalg.eigh(res.psi_star.psi)
        warm = v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))
    return results
