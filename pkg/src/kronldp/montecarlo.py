"""Sampling-based checks of the deterministic predictions.

Everything here estimates a quantity the other modules compute exactly:
lambda_1 draws against the support edge, pooled spectra against the density,
block resolvent traces against M(z), window probabilities P(|lambda_1 - x|
<= delta) against the rate function, tilted means against the outlier root,
and profiles of uniform sphere vectors against the renormalized-Wishart law.

Replicates are grouped into fixed-size batches and batch b draws from the
derived stream (seed, b), so estimates are bit-identical for a given integer
master seed no matter how batches would be scheduled; weight and indicator
sums go through math.fsum, which rounds exactly and is therefore
order-independent. Passing a Generator instead of an integer seed is allowed
but serializes the batches onto that one stream.

The direct tail counter never diagonalizes a matrix it can certify instead: a
Cholesky factorization of (x - delta)Id - X proves lambda_1 < x - delta, and
only draws failing the certificate (a vanishing fraction in the large
deviation regime) fall back to an eigensolve. For the scalar structures the
long 1e7-rep runs use (opt-in) the tridiagonal beta-Hermite reduction, which
has exactly the GOE/GUE eigenvalue law at a fraction of the cost; window
membership is then two vectorized Sturm negative-pivot counts per draw and
needs no eigensolve at all.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import eigh as scipy_eigh
from scipy.stats import beta as _beta_dist

from .mde import right_edge
from .model import (Generator, Profile, as_profile, profile_vector,
                    rho_profile, sample_kronecker, sample_tilted, stream,
                    structure_hash, _assemble, _draw_blocks)
from .outlier import largest_outlier, tilt_for_target

_DENSE_BUFFER = 3.2e7  # batch buffer budget, in matrix entries
_TRI_BATCH = 32768


# ---------------------------------------------------------------------------
# result records

@dataclass(frozen=True)
class TailEstimate:
    """Window-probability estimate for {|lambda_1 - x| <= delta}."""

    x: float
    delta: float
    N: int
    reps: int
    hits: int
    p_hat: float
    rate_hat: float  # -ln(p_hat)/N, +inf when nothing was hit
    ci_low: float
    ci_high: float
    method: str  # "direct" | "importance"
    ess: float | None = None
    unreliable: bool = False


@dataclass(frozen=True)
class TiltCheck:
    """Empirical mean of lambda_1 under a tilt vs the predicted outlier Z."""

    theta: float
    N: int
    reps: int
    mean_lambda1: float
    sd_lambda1: float
    se_mean: float
    predicted_z: float
    discrepancy: float  # (mean - Z) / se_mean


@dataclass(frozen=True)
class ProfileHistogram:
    """Summary of rho(u) for u uniform on the real (NL-1)-sphere."""

    L: int
    N: int
    reps: int
    mean_profile: np.ndarray
    mean_se: np.ndarray
    entry_sd: np.ndarray
    det_mode: float
    det_frac_below_half: float  # fraction with det rho < L^-L / 2
    # L = 2 only: binned density over (psi_11, Re psi_12), else None
    p_edges: np.ndarray | None = None
    c_edges: np.ndarray | None = None
    counts: np.ndarray | None = None
    empirical_density: np.ndarray | None = None
    analytic_density: np.ndarray | None = None


@dataclass
class SimConfig:
    """Plumbing for a simulation campaign (seeds, sizes, replication)."""

    master_seed: int
    N_schedule: list
    reps: int
    parallel_width: int = 1

    def __post_init__(self):
        if self.master_seed <= 0 or self.reps <= 0 or self.parallel_width <= 0:
            raise ValueError("master_seed, reps and parallel_width must be positive")
        if not self.N_schedule or any(n <= 0 for n in self.N_schedule):
            raise ValueError("N_schedule must be a non-empty list of positive sizes")


# ---------------------------------------------------------------------------
# shared helpers

def _substream(rng, index):
    """Derived stream (seed, index) for integer seeds, the generator itself
    otherwise (sequential fallback, still reproducible for a caller-owned rng)."""
    if isinstance(rng, Generator):
        return rng
    return stream(rng, index)


def _batch_size(nl, reps):
    cap = max(1, int(_DENSE_BUFFER // (nl * nl)))
    return max(1, min(512, cap, reps))


def _clopper_pearson(hits, reps, alpha=0.05):
    lo = 0.0 if hits == 0 else float(_beta_dist.ppf(alpha / 2, hits, reps - hits + 1))
    hi = 1.0 if hits == reps else float(_beta_dist.ppf(1 - alpha / 2, hits + 1, reps - hits))
    return lo, hi


def _window(lam, x, delta, one_sided):
    if one_sided:
        return lam >= x - delta
    return abs(lam - x) <= delta


def _tilt_moments(structure, u):
    """mu = <u,(A0 x Id)u> and T2 = sum_j Tr[C_j^2] for the weight exponent."""
    ub = np.asarray(u).reshape(structure.L, -1)
    gram = ub.conj() @ ub.T
    mu = float(np.real(np.sum(structure.a0 * gram)))
    t2 = 0.0
    for aj in structure.a:
        cj = ub.T @ aj.T @ np.conj(ub)
        t2 += float(np.real(np.trace(cj @ cj)))
    return mu, t2


# ---------------------------------------------------------------------------
# lambda_1 draws and spectra

def simulate_lambda1(structure, n, reps, rng) -> list:
    """Independent draws of (lambda_1, rho(v_1)) at size N."""
    if n < 1 or reps < 1:
        raise ValueError("N and reps must be >= 1")
    gen = stream(rng)
    out = []
    for _ in range(reps):
        s = sample_kronecker(structure, n, gen)
        out.append((s.lambda1, as_profile(rho_profile(s.v1, structure.L))))
    return out


def empirical_spectrum(structure, n, reps, rng=0, bins=200, span=None):
    """Pooled eigenvalue histogram over reps draws, unit mass per matrix.

    Returns (density, edges) as np.histogram does; with the default span the
    histogram covers every pooled eigenvalue, so the density integrates to 1.
    """
    if n < 1 or reps < 1:
        raise ValueError("N and reps must be >= 1")
    if span is not None and not span[1] > span[0]:
        raise ValueError("span must have positive width")
    gen = stream(rng)
    eigs = np.empty((reps, structure.L * n))
    for r in range(reps):
        x = _assemble(structure, _draw_blocks(structure, n, gen), n)
        eigs[r] = np.linalg.eigvalsh(x)
    density, edges = np.histogram(eigs.ravel(), bins=bins, range=span, density=True)
    return density, edges


def block_resolvent_trace(structure, n, reps, z, rng=0) -> np.ndarray:
    """Average over reps of the L x L matrix of per-block normalized resolvent
    traces (1/N) Tr[(X - z)^-1_{ij}]; the finite-N counterpart of M(z)."""
    if n < 1 or reps < 1:
        raise ValueError("N and reps must be >= 1")
    z = complex(z)
    if z.imag <= 0 and z.real <= right_edge(structure).r_inf + 1e-8:
        raise ValueError("z must have positive imaginary part or lie right of the support")
    gen = stream(rng)
    L = structure.L
    acc = np.zeros((L, L), dtype=complex)
    for _ in range(reps):
        x = _assemble(structure, _draw_blocks(structure, n, gen), n)
        vals, vecs = np.linalg.eigh(x)
        if np.abs(vals - z).min() < 1e-8:
            raise ValueError("z within 1e-8 of a sampled eigenvalue; resolvent ill-conditioned")
        vr = vecs.reshape(L, n, L * n)
        cross = np.einsum("ikm,jkm->ijm", vr, vr.conj())
        acc += cross @ (1.0 / (vals - z)) / n
    return acc / reps


# ---------------------------------------------------------------------------
# direct window counting

def _dense_hits(structure, x, delta, n, reps, rng, one_sided):
    L = structure.L
    nl = L * n
    lower = x - delta
    eye = np.eye(nl, dtype=structure.a0.dtype)
    bs = _batch_size(nl, reps)
    hits = 0
    done = 0
    batch = 0
    while done < reps:
        m = min(bs, reps - done)
        gen = _substream(rng, batch)
        xs = np.empty((m, nl, nl), dtype=structure.a0.dtype)
        for r in range(m):
            xs[r] = _assemble(structure, _draw_blocks(structure, n, gen), n)
        try:
            np.linalg.cholesky(lower * eye - xs)
            certified = True  # every lambda_1 in the batch is below the window
        except np.linalg.LinAlgError:
            certified = False
        if not certified:
            for r in range(m):
                try:
                    np.linalg.cholesky(lower * eye - xs[r])
                    continue
                except np.linalg.LinAlgError:
                    pass
                lam = float(scipy_eigh(xs[r], subset_by_index=[nl - 1, nl - 1],
                                       eigvals_only=True)[0])
                hits += _window(lam, x, delta, one_sided)
        done += m
        batch += 1
    return hits


def _sturm_below(d, e2, t):
    """Per row: number of eigenvalues of the tridiagonal (diag d, e^2 = e2)
    lying below t, by counting negative pivots of the shifted LDL sweep."""
    m, n = d.shape
    cnt = (d[:, 0] - t < 0).astype(np.int64)
    q = d[:, 0] - t
    for i in range(1, n):
        q = np.where(np.abs(q) < 1e-120, -1e-120, q)
        q = d[:, i] - t - e2[:, i - 1] / q
        cnt += q < 0
    return cnt


def _tridiagonal_hits(structure, x, delta, n, reps, rng, one_sided):
    a = float(np.real(structure.a[0][0, 0]))
    c = float(np.real(structure.a0[0, 0]))
    if a == 0.0:
        return reps * int(_window(c, x, delta, one_sided))
    # lambda_1(X) < s  <=>  all eigenvalues of W below (s-c)/a   (a > 0)
    #                  <=>  no eigenvalue of W below (s-c)/a     (a < 0)
    df = np.arange(n - 1, 0, -1, dtype=float)
    hits = 0
    done = 0
    batch = 0
    while done < reps:
        m = min(_TRI_BATCH, reps - done)
        gen = _substream(rng, batch)
        if structure.beta == 1:
            d = gen.standard_normal((m, n)) * math.sqrt(2.0 / n)
            e2 = gen.chisquare(df, (m, n - 1)) / n if n > 1 else np.empty((m, 0))
        else:
            d = gen.standard_normal((m, n)) * math.sqrt(1.0 / n)
            e2 = gen.chisquare(2.0 * df, (m, n - 1)) / (2 * n) if n > 1 else np.empty((m, 0))

        def below(s):
            cnt = _sturm_below(d, e2, (s - c) / a)
            return cnt == n if a > 0 else cnt == 0

        if one_sided:
            hit = ~below(x - delta)
        else:
            hit = ~below(x - delta) & below(x + delta)
        hits += int(hit.sum())
        done += m
        batch += 1
    return hits


def _tridiagonal_ok(structure):
    return structure.L == 1 and structure.k == 1


def tail_probability(structure, x, delta, n, reps, rng, one_sided=False,
                     sampler="dense") -> TailEstimate:
    """Direct-count estimate of P(|lambda_1 - x| <= delta) with an exact
    binomial (Clopper-Pearson) interval.

    sampler="tridiagonal" switches to the beta-Hermite reduction (same
    eigenvalue law, no dense matrices; scalar structures only) for long runs;
    "auto" picks it whenever it applies. Matched-seed comparisons against
    importance_tail require the default dense sampler.
    """
    if reps < 1 or n < 1:
        raise ValueError("N and reps must be >= 1")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if sampler == "auto":
        sampler = "tridiagonal" if _tridiagonal_ok(structure) else "dense"
    if sampler == "tridiagonal":
        if not _tridiagonal_ok(structure):
            raise ValueError("tridiagonal sampling needs a scalar structure (L=1, k=1)")
        hits = _tridiagonal_hits(structure, x, delta, n, reps, rng, one_sided)
    elif sampler == "dense":
        hits = _dense_hits(structure, x, delta, n, reps, rng, one_sided)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    p_hat = hits / reps
    rate_hat = math.inf if hits == 0 else -math.log(p_hat) / n
    lo, hi = _clopper_pearson(hits, reps)
    return TailEstimate(x=float(x), delta=float(delta), N=n, reps=reps, hits=hits,
                        p_hat=p_hat, rate_hat=rate_hat, ci_low=lo, ci_high=hi,
                        method="direct")


# ---------------------------------------------------------------------------
# importance sampling

def importance_tail(structure, x, delta, n, reps, rng, psi=None, theta=None,
                    one_sided=False) -> TailEstimate:
    """Tilted estimate of P(|lambda_1 - x| <= delta).

    Draws X under the exponential tilt exp(beta N theta <u,Xu>) with a fixed
    u realizing psi (default Id/L) and reweights by the exact density ratio

        w = exp(beta N theta (theta T2 - T1)),
        T1 = <u,Xu> - mu,  mu = <u,(A0 x Id)u>,  T2 = sum_j Tr[(U A_j^T U*)^2],

    the closed form of exp(-beta N theta <u,Xu> + Lambda). theta defaults to
    the tilt whose predicted outlier sits at the window's lower edge x - delta
    (tilting to x itself would push most of the mass past the window).

    The reported interval scales the binomial bounds for the tilted hit count
    by the mean hit weight; unlike the direct case it is a heuristic. ess is
    the effective sample size of the hit estimator; below 10 the estimate is
    flagged unreliable.
    """
    if reps < 1 or n < 1:
        raise ValueError("N and reps must be >= 1")
    if delta <= 0:
        raise ValueError("delta must be positive")
    psi = as_profile(np.eye(structure.L) / structure.L if psi is None else psi)
    if theta is None:
        if x - delta <= right_edge(structure).r_inf:
            raise ValueError("window lower edge x - delta must exceed the support "
                             "edge; pass theta explicitly otherwise")
        theta = tilt_for_target(structure, x - delta, psi)
    elif theta < 0:
        raise ValueError("theta must be >= 0")

    bs = _batch_size(structure.L * n, reps)
    u = profile_vector(structure, psi, n, _substream(rng, reps))
    mu, t2 = _tilt_moments(structure, u)
    beta = structure.beta

    w_hit, w_hit_sq, w_all = [], [], []
    hits = 0
    done = 0
    batch = 0
    while done < reps:
        m = min(bs, reps - done)
        gen = _substream(rng, batch)
        for _ in range(m):
            s = sample_tilted(structure, n, theta, u, gen, keep_matrix=True)
            quad = float(np.real(np.vdot(u, s.matrix @ u)))
            w = math.exp(beta * n * theta * (theta * t2 - (quad - mu)))
            w_all.append(w)
            if _window(s.lambda1, x, delta, one_sided):
                hits += 1
                w_hit.append(w)
                w_hit_sq.append(w * w)
        done += m
        batch += 1

    sum_hit = math.fsum(w_hit)
    p_hat = sum_hit / reps
    rate_hat = math.inf if p_hat <= 0 else -math.log(p_hat) / n
    ess = sum_hit * sum_hit / math.fsum(w_hit_sq) if hits else 0.0
    lo, hi = _clopper_pearson(hits, reps)
    scale = sum_hit / hits if hits else 1.0
    return TailEstimate(x=float(x), delta=float(delta), N=n, reps=reps, hits=hits,
                        p_hat=p_hat, rate_hat=rate_hat, ci_low=lo * scale,
                        ci_high=hi * scale, method="importance", ess=ess,
                        unreliable=ess < 10)


def tilted_outlier_check(structure, theta, psi, n, reps, rng=0) -> TiltCheck:
    """Empirical mean of lambda_1 under the tilt vs the predicted root Z(theta).

    Z = r_inf (no crossing of the outlier equation) is a valid prediction: it
    says the tilt is too weak to pull lambda_1 off the bulk edge.
    """
    if reps < 2:
        raise ValueError("reps must be >= 2 to report a spread")
    psi = as_profile(psi)
    z_pred = largest_outlier(structure, theta, psi).Z
    u = profile_vector(structure, psi, n, _substream(rng, 1))
    gen = _substream(rng, 0)
    lams = np.array([sample_tilted(structure, n, theta, u, gen).lambda1
                     for _ in range(reps)])
    mean = float(lams.mean())
    sd = float(lams.std(ddof=1))
    se = sd / math.sqrt(reps)
    disc = (mean - z_pred) / se if se > 0 else math.inf * np.sign(mean - z_pred)
    return TiltCheck(theta=float(theta), N=n, reps=reps, mean_lambda1=mean,
                     sd_lambda1=sd, se_mean=se, predicted_z=z_pred,
                     discrepancy=float(disc))


# ---------------------------------------------------------------------------
# profiles of uniform sphere vectors

def _wishart_density_bins(n, p_edges, c_edges, rule=24):
    """Bin-averaged normalized density of (psi_11, Re psi_12) for L = 2:
    proportional to det(psi)^((n-3)/2) on the lens det > 0. The edges must
    cover the full support for the normalization to be correct."""
    power = (n - 3) / 2.0
    nodes, weights = leggauss(rule)
    p_edges = np.asarray(p_edges, dtype=float)
    c_edges = np.asarray(c_edges, dtype=float)
    pm, ph = (p_edges[:-1] + p_edges[1:]) / 2, np.diff(p_edges) / 2
    cm, ch = (c_edges[:-1] + c_edges[1:]) / 2, np.diff(c_edges) / 2
    pp = pm[:, None] + ph[:, None] * nodes[None, :]          # (bp, rule)
    cc = cm[:, None] + ch[:, None] * nodes[None, :]          # (bc, rule)
    det = (pp * (1.0 - pp))[:, None, :, None] - (cc * cc)[None, :, None, :]
    f = np.where(det > 0, np.abs(det) ** power, 0.0)
    mass = np.einsum("a,b,iajb->ij", weights, weights,
                     np.swapaxes(f, 1, 2)) * ph[:, None] * ch[None, :]
    mass /= mass.sum()
    return mass / (np.diff(p_edges)[:, None] * np.diff(c_edges)[None, :])


def profile_histogram(L, n, reps, rng, bins=20) -> ProfileHistogram:
    """Sample rho(u) for u uniform on the real NL-sphere and summarize it.

    For L = 2 the summary carries a binned density over (psi_11, Re psi_12)
    next to the bin-averaged analytic law with exponent (N-L-1)/2.
    """
    if L < 1 or n < L:
        raise ValueError("need L >= 1 and N >= L")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    gen = stream(rng)
    psis = np.empty((reps, L, L))
    done = 0
    while done < reps:
        m = min(reps - done, max(1, int(2e7 // (L * n))))
        g = gen.standard_normal((m, L, n))
        g /= np.linalg.norm(g.reshape(m, -1), axis=1)[:, None, None]
        psis[done:done + m] = np.einsum("ria,rja->rij", g, g)
        done += m
    dets = np.linalg.det(psis)

    mean = psis.mean(axis=0)
    sd = psis.std(axis=0, ddof=1)
    hist, det_edges = np.histogram(dets, bins=200, range=(0.0, float(L) ** -L))
    det_mode = float((det_edges[np.argmax(hist)] + det_edges[np.argmax(hist) + 1]) / 2)
    frac = float(np.mean(dets < 0.5 * float(L) ** -L))

    if L != 2:
        return ProfileHistogram(L=L, N=n, reps=reps, mean_profile=mean,
                                mean_se=sd / math.sqrt(reps), entry_sd=sd,
                                det_mode=det_mode, det_frac_below_half=frac)
    p_edges = np.linspace(0.0, 1.0, bins + 1)
    c_edges = np.linspace(-0.5, 0.5, bins + 1)
    counts, _, _ = np.histogram2d(psis[:, 0, 0], psis[:, 0, 1],
                                  bins=[p_edges, c_edges])
    emp = counts / (reps * np.diff(p_edges)[:, None] * np.diff(c_edges)[None, :])
    ana = _wishart_density_bins(n, p_edges, c_edges)
    return ProfileHistogram(L=L, N=n, reps=reps, mean_profile=mean,
                            mean_se=sd / math.sqrt(reps), entry_sd=sd,
                            det_mode=det_mode, det_frac_below_half=frac,
                            p_edges=p_edges, c_edges=c_edges, counts=counts,
                            empirical_density=emp, analytic_density=ana)


# ---------------------------------------------------------------------------
# records

def estimate_record(est: TailEstimate, structure, seed) -> dict:
    """JSON-ready record of a TailEstimate with provenance fields."""
    from . import __version__

    rec = {"kind": "tail_estimate", "structure": structure_hash(structure),
           "seed": int(seed), "version": __version__}
    for name in ("x", "delta", "N", "reps", "hits", "p_hat", "rate_hat",
                 "ci_low", "ci_high", "method", "ess", "unreliable"):
        val = getattr(est, name)
        if isinstance(val, float) and math.isinf(val):
            val = "inf"
        rec[name] = val
    return rec


def write_jsonl(path, records):
    """Append records (dicts) to a JSON-lines file, one per line."""
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
