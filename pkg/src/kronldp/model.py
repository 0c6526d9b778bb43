"""Structure matrices, superoperators and Gaussian Kronecker samplers.

The model is X = sum_j A_j (x) W_j + A_0 (x) Id_N with deterministic L x L
matrices A_j and independent GOE (beta=1) or GUE (beta=2) blocks W_j. This
module owns the deterministic data (`StructureSet`), the superoperators
S[T] = sum_j A_j T A_j and S = sum_j A_j (x) A_j, the samplers (plain and
tilted), and the block profile map rho.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.linalg import eigh as scipy_eigh


class StructureError(ValueError):
    """A structure set violates the model assumptions."""


@dataclass(frozen=True)
class StructureSet:
    """Deterministic model data: dimensions, symmetry class and matrices.

    Immutable after construction; safe for concurrent shared reads. Use
    :func:`make_structure` or :func:`structure_from_dict` instead of calling
    the constructor with raw arrays.
    """

    L: int
    k: int
    beta: int
    a0: np.ndarray
    a: np.ndarray  # shape (k, L, L); empty (0, L, L) when k = 0

    def __post_init__(self):
        self.a0.setflags(write=False)
        self.a.setflags(write=False)

    @property
    def is_real(self) -> bool:
        return self.beta == 1


def make_structure(a0, a_list, beta=1) -> StructureSet:
    """Build a validated StructureSet from A_0 and the list [A_1, ..., A_k]."""
    mats = [np.array(m, dtype=np.complex128) for m in (list(a_list) if a_list is not None else [])]
    a0c = np.array(a0, dtype=np.complex128)
    if a0c.ndim != 2 or a0c.shape[0] != a0c.shape[1]:
        raise StructureError("A0 must be a square matrix")
    L = a0c.shape[0]
    for i, m in enumerate(mats):
        if m.shape != (L, L):
            raise StructureError(f"A{i + 1} has shape {m.shape}, expected ({L}, {L})")
    if beta == 1:
        for name, m in [("A0", a0c)] + [(f"A{i + 1}", m) for i, m in enumerate(mats)]:
            if np.any(m.imag != 0):
                raise StructureError(f"{name} has complex entries but beta=1")
        a0c = a0c.real
        mats = [m.real for m in mats]
    a = np.array(mats) if mats else np.zeros((0, L, L), dtype=a0c.dtype)
    s = StructureSet(L=L, k=a.shape[0], beta=int(beta), a0=a0c, a=a)
    violations = validate(s)
    if violations:
        raise StructureError("; ".join(violations))
    return s


def validate(structure: StructureSet) -> list:
    """Return every invariant violation as a human-readable string.

    Empty list means the structure satisfies the model assumptions.
    """
    v = []
    L, k, beta = structure.L, structure.k, structure.beta
    if L < 1:
        v.append("L must be >= 1")
    if k < 0:
        v.append("k must be >= 0")
    if beta not in (1, 2):
        v.append("beta must be 1 or 2")
    mats = [("A0", structure.a0)] + [(f"A{j + 1}", m) for j, m in enumerate(structure.a)]
    for name, mat in mats:
        if mat.shape != (L, L):
            v.append(f"{name} has shape {mat.shape}, expected ({L}, {L})")
            continue
        if not np.all(np.isfinite(mat)):
            v.append(f"{name} has non-finite entries")
            continue
        if beta == 1:
            if np.iscomplexobj(mat) and np.any(mat.imag != 0):
                v.append(f"{name} has complex entries but beta=1")
            elif not np.allclose(mat, mat.T, atol=1e-12, rtol=0.0):
                v.append(f"{name} is not symmetric")
        else:
            if not np.allclose(mat, mat.conj().T, atol=1e-12, rtol=0.0):
                v.append(f"{name} is not Hermitian")
    return v


def structure_hash(structure: StructureSet) -> str:
    """Short stable content hash, used to key caches and tag output files."""
    h = hashlib.sha256()
    h.update(f"{structure.L},{structure.k},{structure.beta}".encode())
    h.update(np.ascontiguousarray(structure.a0).tobytes())
    h.update(np.ascontiguousarray(structure.a).tobytes())
    return h.hexdigest()[:16]


def _entry(x):
    if isinstance(x, (list, tuple)):
        return complex(x[0], x[1])
    return float(x)


def structure_from_dict(doc) -> StructureSet:
    """Parse the JSON schema {"L", "k", "beta", "A0", "A"}; complex as [re, im]."""
    try:
        beta = int(doc["beta"])
        a0 = [[_entry(x) for x in row] for row in doc["A0"]]
        a_list = [[[_entry(x) for x in row] for row in mat] for mat in doc.get("A", [])]
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise StructureError(f"malformed structure document: {exc!r}") from exc
    s = make_structure(a0, a_list, beta=beta)
    if "L" in doc and int(doc["L"]) != s.L:
        raise StructureError(f"declared L={doc['L']} but A0 is {s.L}x{s.L}")
    if "k" in doc and int(doc["k"]) != s.k:
        raise StructureError(f"declared k={doc['k']} but {s.k} matrices given")
    return s


def structure_to_dict(structure: StructureSet) -> dict:
    def enc(mat):
        if structure.beta == 1:
            return [[float(x) for x in row] for row in np.real(mat)]
        return [[[float(x.real), float(x.imag)] for x in row] for row in mat]

    return {
        "L": structure.L,
        "k": structure.k,
        "beta": structure.beta,
        "A0": enc(structure.a0),
        "A": [enc(m) for m in structure.a],
    }


# ---------------------------------------------------------------------------
# superoperators

def apply_S(structure: StructureSet, t) -> np.ndarray:
    """S[T] = sum_j A_j T A_j (linear, PSD-preserving on Hermitian PSD T)."""
    t = np.asarray(t)
    if t.shape != (structure.L, structure.L):
        raise ValueError(f"T has shape {t.shape}, expected ({structure.L}, {structure.L})")
    out = np.zeros((structure.L, structure.L), dtype=np.result_type(t, structure.a0))
    for aj in structure.a:
        out += aj @ t @ aj
    return out


def s_big(structure: StructureSet) -> np.ndarray:
    """S = sum_j A_j (x) A_j on L^2-dimensional vectors, lexicographic index (a, b)."""
    L = structure.L
    out = np.zeros((L * L, L * L), dtype=structure.a0.dtype)
    for aj in structure.a:
        out += np.kron(aj, aj)
    return out


# ---------------------------------------------------------------------------
# sampling

@dataclass
class KroneckerSample:
    """One draw of the NL x NL model with its top eigenpair."""

    N: int
    seed: int | None
    lambda1: float
    v1: np.ndarray
    spectrum: np.ndarray | None = None
    matrix: np.ndarray | None = field(default=None, repr=False)


def stream(seed, *path) -> Generator:
    """Counter-based RNG stream for (master seed, task index...) derivations.

    An integer seed plus a path of task indices gives an independent,
    reproducible Philox stream; a Generator passes through unchanged.
    """
    if isinstance(seed, Generator):
        return seed
    return Generator(Philox(SeedSequence((int(seed),) + tuple(int(p) for p in path))))


def _draw_blocks(structure: StructureSet, n, rng) -> np.ndarray:
    """Draw W_1..W_k, shape (k, N, N). GOE: entry variance (1+delta_ij)/N;
    GUE: variance 1/N for every entry. Entry (a, b) of W_j symmetrizes the
    (a*N+b)-th standard normal of the stream, so it is addressable from
    (seed, j, a, b)."""
    k = structure.k
    if structure.beta == 1:
        g = rng.standard_normal((k, n, n))
        return (g + np.swapaxes(g, -1, -2)) / np.sqrt(2.0 * n)
    g = rng.standard_normal((k, n, n)) + 1j * rng.standard_normal((k, n, n))
    g /= np.sqrt(2.0)
    return (g + np.conj(np.swapaxes(g, -1, -2))) / np.sqrt(2.0 * n)


def _assemble(structure: StructureSet, blocks, n) -> np.ndarray:
    """X = sum_j A_j (x) W_j + A_0 (x) Id."""
    x = np.kron(structure.a0, np.eye(n, dtype=structure.a0.dtype))
    for aj, wj in zip(structure.a, blocks):
        x += np.kron(aj, wj)
    return x


def _top_eig(x, want_spectrum=False):
    n = x.shape[0]
    if want_spectrum:
        vals, vecs = np.linalg.eigh(x)
        return vals[-1], vecs[:, -1], vals[::-1].copy()
    vals, vecs = scipy_eigh(x, subset_by_index=[n - 1, n - 1])
    return vals[0], vecs[:, 0], None


def sample_kronecker(structure: StructureSet, n, rng, with_spectrum=False,
                     keep_matrix=False) -> KroneckerSample:
    """Draw X = sum_j A_j (x) W_j + A_0 (x) Id and return its top eigenpair."""
    if n < 1:
        raise ValueError("N must be >= 1")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = stream(rng)
    x = _assemble(structure, _draw_blocks(structure, n, gen), n)
    lam, v1, spec = _top_eig(x, with_spectrum)
    return KroneckerSample(N=n, seed=seed, lambda1=float(lam), v1=v1, spectrum=spec,
                           matrix=x if keep_matrix else None)


def tilt_matrix(structure: StructureSet, u) -> np.ndarray:
    """D = sum_j A_j (x) (U A_j^T U*) for the block matrix U of the unit vector u.

    The tilted sample is X~ + 2 theta D; D is the deterministic finite-rank
    shift produced by tilting the Gaussian law with exp(beta N theta <u, X u>).
    The transpose on the inner A_j comes from <u,(A (x) W)u> = Tr[W U A^T U*];
    it only matters when A_j has complex entries.
    """
    u = np.asarray(u)
    L = structure.L
    n = u.size // L
    ublocks = u.reshape(L, n)  # row a = block u_a
    d = np.zeros((L * n, L * n), dtype=np.result_type(u, structure.a0))
    for aj in structure.a:
        bj = ublocks.T @ aj.T @ np.conj(ublocks)  # U A_j^T U*, U = ublocks.T (columns u_a)
        d += np.kron(aj, bj)
    return d


def sample_tilted(structure: StructureSet, n, theta, u, rng, with_spectrum=False,
                  keep_matrix=False) -> KroneckerSample:
    """Draw from the tilted measure: a fresh sample plus the shift 2 theta D."""
    if theta < 0:
        raise ValueError("theta must be >= 0")
    u = np.asarray(u)
    if u.size != n * structure.L:
        raise ValueError(f"u has length {u.size}, expected N*L = {n * structure.L}")
    if abs(np.linalg.norm(u) - 1.0) > 1e-10:
        raise ValueError("u must be a unit vector")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = stream(rng)
    x = _assemble(structure, _draw_blocks(structure, n, gen), n)
    if theta > 0:
        x = x + 2.0 * theta * tilt_matrix(structure, u)
    lam, v1, spec = _top_eig(x, with_spectrum)
    return KroneckerSample(N=n, seed=seed, lambda1=float(lam), v1=v1, spectrum=spec,
                           matrix=x if keep_matrix else None)


# ---------------------------------------------------------------------------
# profiles

@dataclass(frozen=True)
class Profile:
    """Trace-one positive semi-definite L x L matrix (eigenvector profile)."""

    psi: np.ndarray

    def __post_init__(self):
        psi = np.asarray(self.psi)
        if psi.ndim != 2 or psi.shape[0] != psi.shape[1]:
            raise ValueError("profile must be a square matrix")
        if not np.allclose(psi, psi.conj().T, atol=1e-10):
            raise ValueError("profile must be symmetric/Hermitian")
        if abs(np.trace(psi).real - 1.0) > 1e-12:
            raise ValueError(f"profile trace {np.trace(psi)!r} != 1")
        w = np.linalg.eigvalsh(psi)
        if w.min() < -1e-12:
            raise ValueError(f"profile not PSD: min eigenvalue {w.min():.3e}")
        psi = psi.copy()
        psi.setflags(write=False)
        object.__setattr__(self, "psi", psi)

    @property
    def L(self) -> int:
        return self.psi.shape[0]


def as_profile(psi) -> Profile:
    """Coerce a matrix (or Profile) to a validated Profile."""
    if isinstance(psi, Profile):
        return psi
    return Profile(np.asarray(psi, dtype=np.result_type(np.asarray(psi), np.float64)))


def rho_profile(w1, L, w2=None) -> np.ndarray:
    """Block Gram matrix rho(w)_{ij} = <w_i, w_j> of an NL vector.

    With two vectors, returns the symmetrized bilinear form
    rho(w, w')_{ij} = <w_i, w'_j> + <w'_i, w_j>.
    """
    w1 = np.asarray(w1)
    if w1.size % L:
        raise ValueError(f"vector length {w1.size} not divisible by L={L}")
    b1 = w1.reshape(L, -1)
    if w2 is None:
        return b1.conj() @ b1.T
    w2 = np.asarray(w2)
    if w2.size != w1.size:
        raise ValueError("both vectors must have the same length")
    b2 = w2.reshape(L, -1)
    return b1.conj() @ b2.T + b2.conj() @ b1.T


def profile_vector(structure: StructureSet, psi, n, rng) -> np.ndarray:
    """Unit NL vector u with rho(u) = psi exactly (within 1e-12).

    Built as u_a = sum_b conj(C)_{ab} f_b from a factorization psi = C C* and
    random orthonormal f_1..f_L; the conjugate on C is what makes the Gram
    matrix come out as psi rather than its transpose.
    """
    L = structure.L
    if n < L:
        raise ValueError(f"N={n} cannot host {L} orthonormal block directions")
    psi = as_profile(psi).psi
    gen = stream(rng)
    w, v = np.linalg.eigh(psi)
    c = v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))  # psi = c c*
    if structure.beta == 1:
        g = gen.standard_normal((n, L))
    else:
        g = gen.standard_normal((n, L)) + 1j * gen.standard_normal((n, L))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.real(np.diagonal(r)) + (np.real(np.diagonal(r)) == 0))
    blocks = (np.conj(c) @ q.T)  # row a = u_a
    u = blocks.reshape(-1)
    return u / np.linalg.norm(u)
