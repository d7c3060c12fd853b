"""Symmetric tensor algebra.

Rank-m symmetric tensors over C^d are stored with one coefficient per
nondecreasing multi-index (lexicographic order), so a contraction costs
O(C(d+m-1, m)) stored terms instead of d^m.  The module also provides
the recovery-side inverse of contraction (least squares over a sample
plan), admissible probe pairs, and the orthonormal cutoff frames used
by plane-concentrated amplitudes.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "SymTensor", "SymTensorField", "AdmissiblePair",
    "RankDeficient", "NotOrthonormal", "DegenerateZeta",
    "sym_index_count", "sym_indices", "index_multiplicity",
    "contract", "reconstruct_from_contractions",
    "make_admissible_pair", "cutoff_frame", "determining_sample_plan",
]

INDEX_ORDER = "nondecreasing-lexicographic"


class RankDeficient(ValueError):
    """Sample set does not determine the tensor.

    Carries the dimension of the null space and an orthonormal basis of
    it (rows), expressed in stored-coefficient coordinates.
    """

    def __init__(self, null_dim, null_space):
        super().__init__(f"sample plan is rank deficient (null space dim {null_dim})")
        self.null_dim = int(null_dim)
        self.null_space = null_space


class NotOrthonormal(ValueError):
    pass


class DegenerateZeta(ValueError):
    pass


def sym_index_count(d: int, m: int) -> int:
    """Number of independent coefficients: C(d+m-1, m)."""
    if d < 1:
        raise ValueError("slot dimension must be >= 1")
    if m < 0:
        raise ValueError("rank must be >= 0")
    return math.comb(d + m - 1, m)


@lru_cache(maxsize=None)
def sym_indices(d: int, m: int):
    """All nondecreasing multi-indices of length m, lexicographic."""
    return tuple(itertools.combinations_with_replacement(range(d), m))


def index_multiplicity(index) -> int:
    """Number of distinct permutations of a multi-index."""
    counts = {}
    for j in index:
        counts[j] = counts.get(j, 0) + 1
    out = math.factorial(len(index))
    for c in counts.values():
        out //= math.factorial(c)
    return out


@lru_cache(maxsize=None)
def _distinct_permutations(index):
    """Distinct permutations of `index`, in a fixed deterministic order."""
    return tuple(sorted(set(itertools.permutations(index))))


class SymTensor:
    """Symmetric tensor of rank `rank` over slot dimension `dim`.

    Coefficients are one value per nondecreasing multi-index; access by
    arbitrary index tuples is symmetric automatically.
    """

    def __init__(self, dim: int, rank: int, coeffs=None):
        self.dim = int(dim)
        self.rank = int(rank)
        n = sym_index_count(self.dim, self.rank)
        if coeffs is None:
            self.coeffs = np.zeros(n, dtype=complex)
        else:
            coeffs = np.asarray(coeffs, dtype=complex).reshape(-1)
            if coeffs.size != n:
                raise ValueError(f"expected {n} coefficients, got {coeffs.size}")
            self.coeffs = coeffs.copy()
        self.indices = sym_indices(self.dim, self.rank)
        self._pos = {idx: i for i, idx in enumerate(self.indices)}

    @classmethod
    def from_entries(cls, dim, rank, entries):
        """Build from a {multi-index: value} mapping (any index order)."""
        t = cls(dim, rank)
        for idx, value in entries.items():
            t[idx] = value
        return t

    @classmethod
    def random(cls, dim, rank, rng, complex_valued=False):
        n = sym_index_count(dim, rank)
        coeffs = rng.standard_normal(n)
        if complex_valued:
            coeffs = coeffs + 1j * rng.standard_normal(n)
        return cls(dim, rank, coeffs)

    def __getitem__(self, index):
        if self.rank == 0:
            return self.coeffs[0]
        return self.coeffs[self._pos[tuple(sorted(index))]]

    def __setitem__(self, index, value):
        if self.rank == 0:
            self.coeffs[0] = value
        else:
            self.coeffs[self._pos[tuple(sorted(index))]] = value

    def contract(self, vecs):
        return contract(self, vecs)

    def contract_slots(self, vec, times: int) -> "SymTensor":
        """Contract `times` slots with a fixed vector, yielding rank-(m-times)."""
        if times < 0 or times > self.rank:
            raise ValueError("bad contraction count")
        if times == 0:
            return SymTensor(self.dim, self.rank, self.coeffs)
        vec = np.asarray(vec, dtype=complex)
        out = SymTensor(self.dim, self.rank - times)
        for J in out.indices:
            total = 0.0 + 0.0j
            for extra in itertools.product(range(self.dim), repeat=times):
                w = np.prod(vec[list(extra)]) if times else 1.0
                if w != 0:
                    total += self[tuple(J) + extra] * w
            out[J] = total
        return out

    def dense(self):
        """Full d^m array (small cases only; used by test oracles too)."""
        out = np.zeros((self.dim,) * self.rank, dtype=complex)
        for idx, c in zip(self.indices, self.coeffs):
            for p in _distinct_permutations(idx):
                out[p] = c
        return out

    def frobenius(self) -> float:
        """Frobenius norm of the full tensor (multiplicity-weighted)."""
        w = np.array([index_multiplicity(i) for i in self.indices], dtype=float)
        return float(np.sqrt(np.sum(w * np.abs(self.coeffs) ** 2)))

    def __add__(self, other):
        self._check_same(other)
        return SymTensor(self.dim, self.rank, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check_same(other)
        return SymTensor(self.dim, self.rank, self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return SymTensor(self.dim, self.rank, self.coeffs * scalar)

    __rmul__ = __mul__

    def _check_same(self, other):
        if (self.dim, self.rank) != (other.dim, other.rank):
            raise ValueError("tensor shape mismatch")

    def __repr__(self):
        return f"SymTensor(dim={self.dim}, rank={self.rank})"


def _canonical_vec_order(vecs):
    """Sort vectors by their byte image so the contraction sum order is
    independent of the caller's argument order (exact FP invariance)."""
    arrs = [np.asarray(v, dtype=complex) for v in vecs]
    return sorted(arrs, key=lambda a: a.tobytes())


def contract(T: SymTensor, vecs) -> complex:
    """Multilinear contraction T(v_1, ..., v_m).

    Agrees with the naive d^m sum; symmetric in the input vectors.
    """
    if len(vecs) != T.rank:
        raise ValueError(f"rank-{T.rank} tensor needs {T.rank} vectors, got {len(vecs)}")
    if T.rank == 0:
        return complex(T.coeffs[0])
    arrs = _canonical_vec_order(vecs)
    for a in arrs:
        if a.shape != (T.dim,):
            raise ValueError("vector dimension mismatch")
    total = 0.0 + 0.0j
    for idx, c in zip(T.indices, T.coeffs):
        if c == 0:
            continue
        s = 0.0 + 0.0j
        for perm in _distinct_permutations(idx):
            prod = 1.0 + 0.0j
            for slot, j in enumerate(perm):
                prod *= arrs[slot][j]
            s += prod
        total += c * s
    return complex(total)


def _sample_row(d, m, vecs):
    """Row of the reconstruction matrix: basis contractions for one sample."""
    arrs = _canonical_vec_order(vecs)
    row = np.zeros(sym_index_count(d, m), dtype=complex)
    for i, idx in enumerate(sym_indices(d, m)):
        s = 0.0 + 0.0j
        for perm in _distinct_permutations(idx):
            prod = 1.0 + 0.0j
            for slot, j in enumerate(perm):
                prod *= arrs[slot][j]
            s += prod
        row[i] = s
    return row


def reconstruct_from_contractions(samples, d: int, m: int, real: bool = False,
                                  rank_tol: float = 1e-8) -> SymTensor:
    """Least-squares inverse of `contract` over a sample set.

    samples: iterable of (vecs, value) with len(vecs) == m.  With
    real=True the real and imaginary parts of every sample enter as
    separate equations and the recovered coefficients are real.

    Raises RankDeficient when the assembled system does not determine
    the tensor (relative singular-value threshold `rank_tol`).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples")
    rows, values = [], []
    for vecs, value in samples:
        if len(vecs) != m:
            raise ValueError("sample arity mismatch")
        rows.append(_sample_row(d, m, vecs))
        values.append(complex(value))
    A = np.array(rows)
    y = np.array(values)
    if real:
        A = np.vstack([A.real, A.imag])
        y = np.concatenate([y.real, y.imag])
    # explicit rank check before the normal equations
    svals = np.linalg.svd(A, compute_uv=False)
    ncoef = sym_index_count(d, m)
    rank = int(np.sum(svals > rank_tol * svals[0]))
    if rank < ncoef:
        _, _, vh = np.linalg.svd(A)
        null_space = vh[rank:].conj()  # rows v with A @ v = 0
        raise RankDeficient(ncoef - rank, null_space)
    AH = A.conj().T
    coeffs = np.linalg.solve(AH @ A, AH @ y)
    return SymTensor(d, m, coeffs)


@dataclass(frozen=True)
class AdmissiblePair:
    """Pair (zeta, zeta_tilde) of complex null vectors with a shared
    unit real part and independent imaginary parts."""

    zeta: np.ndarray
    zeta_tilde: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "zeta", np.asarray(self.zeta, dtype=complex))
        object.__setattr__(self, "zeta_tilde", np.asarray(self.zeta_tilde, dtype=complex))

    def residuals(self):
        z, zt = self.zeta, self.zeta_tilde
        out = {
            "zeta_null": abs(z @ z),
            "zeta_tilde_null": abs(zt @ zt),
            "shared_real": float(np.max(np.abs(z.real - zt.real))),
            "unit_real": abs(np.linalg.norm(z.real) - 1.0),
        }
        # Im zeta_tilde must not be a real multiple of Im zeta
        a, b = z.imag, zt.imag
        cross = np.linalg.norm(b - (a @ b) / max(a @ a, 1e-300) * a)
        out["im_independent"] = float(cross)
        return out

    def validate(self, tol=1e-12):
        r = self.residuals()
        for key in ("zeta_null", "zeta_tilde_null", "shared_real", "unit_real"):
            if r[key] > tol:
                raise ValueError(f"admissible pair violates {key}: {r[key]:.3e}")
        if r["im_independent"] <= tol:
            raise ValueError("Im(zeta_tilde) is parallel to Im(zeta)")
        return self

    @property
    def dot(self) -> float:
        """zeta . zeta_tilde = 1 - Im(zeta).Im(zeta_tilde) > 0."""
        return float(np.real(self.zeta @ self.zeta_tilde))

    @property
    def direction(self) -> np.ndarray:
        """The shared real part; the probe ray runs along it."""
        return self.zeta.real.copy()


def make_admissible_pair(xi, eta, mu, tol=1e-12) -> AdmissiblePair:
    """(xi + i eta, xi + i mu) from an orthonormal triple."""
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if xi.shape != eta.shape or xi.shape != mu.shape or xi.ndim != 1:
        raise NotOrthonormal("vectors must share one dimension")
    if xi.size < 3:
        raise NotOrthonormal("need n >= 3")
    for name, v in (("xi", xi), ("eta", eta), ("mu", mu)):
        if abs(np.linalg.norm(v) - 1.0) > tol:
            raise NotOrthonormal(f"{name} is not unit length")
    for (na, a), (nb, b) in itertools.combinations(
            (("xi", xi), ("eta", eta), ("mu", mu)), 2):
        if abs(a @ b) > tol:
            raise NotOrthonormal(f"{na} and {nb} are not orthogonal")
    pair = AdmissiblePair(xi + 1j * eta, xi + 1j * mu)
    pair.validate(tol=max(tol, 4e-16 * xi.size))
    return pair


def cutoff_frame(zeta, tol=1e-8):
    """Orthonormal vectors orthogonal to Re(zeta) and Im(zeta).

    Deterministic: Gram-Schmidt seeded by the standard basis in index
    order, skipping near-parallel candidates.
    """
    zeta = np.asarray(zeta, dtype=complex)
    n = zeta.size
    re, im = zeta.real.copy(), zeta.imag.copy()
    nr = np.linalg.norm(re)
    ni = np.linalg.norm(im)
    if nr < tol or ni < tol:
        raise DegenerateZeta("Re(zeta) or Im(zeta) vanishes")
    u1 = re / nr
    v = im - (u1 @ im) * u1
    if np.linalg.norm(v) < tol * ni:
        raise DegenerateZeta("Re(zeta) and Im(zeta) are parallel")
    u2 = v / np.linalg.norm(v)
    frame = []
    basis = [u1, u2]
    for i in range(n):
        if len(frame) == n - 2:
            break
        v = np.zeros(n)
        v[i] = 1.0
        for b in basis:
            v = v - (b @ v) * b
        norm = np.linalg.norm(v)
        if norm > tol:
            w = v / norm
            frame.append(w)
            basis.append(w)
    if len(frame) != n - 2:
        raise DegenerateZeta("could not complete the cutoff frame")
    return frame


def _standard_basis(d):
    return [np.eye(d)[i] for i in range(d)]


def determining_sample_plan(d: int, m: int):
    """Sample vec-lists that determine a rank-m symmetric tensor.

    Slots 1-2 run over admissible pairs built on ordered orthonormal
    triples of standard-basis vectors (both signs of the second
    imaginary part); slots 3..m hold a repeated real direction drawn
    from the basis vectors and, for two or more trailing slots, their
    pairwise +/- sums.  Mirrors what the recovery pipeline can reach.
    """
    if m == 0:
        return [()]
    e = _standard_basis(d)
    if m == 1:
        return [(e[i],) for i in range(d)]
    if d < 3:
        raise ValueError("admissible-pair plans need slot dimension >= 3")
    pairs = []
    for i in range(d):
        for j, k in itertools.permutations([a for a in range(d) if a != i], 2):
            for sign in (1.0, -1.0):
                pairs.append((e[i] + 1j * e[j], e[i] + sign * 1j * e[k]))
    reps = m - 2
    if reps == 0:
        tails = [()]
    else:
        dirs = list(e)
        if reps >= 2:
            for i, j in itertools.combinations(range(d), 2):
                dirs.append(e[i] + e[j])
                dirs.append(e[i] - e[j])
        tails = [(v,) * reps for v in dirs]
    plan = []
    for z, zt in pairs:
        for tail in tails:
            plan.append((z, zt) + tail)
    return plan


class SymTensorField:
    """One SymTensor per grid node, sharing (dim, rank).

    values has shape (npoints, ncoeff) in stored-index order.
    """

    def __init__(self, dim, rank, grid_id, values):
        self.dim = int(dim)
        self.rank = int(rank)
        self.grid_id = str(grid_id)
        values = np.asarray(values, dtype=complex)
        ncoef = sym_index_count(self.dim, self.rank)
        if values.ndim != 2 or values.shape[1] != ncoef:
            raise ValueError(f"values must have shape (npoints, {ncoef})")
        if not np.all(np.isfinite(values)):
            raise ValueError("tensor field contains non-finite values")
        self.values = values

    def at(self, i) -> SymTensor:
        return SymTensor(self.dim, self.rank, self.values[i])

    def __len__(self):
        return self.values.shape[0]

    def to_json(self) -> str:
        flat = np.empty(2 * self.values.size)
        flat[0::2] = self.values.real.reshape(-1)
        flat[1::2] = self.values.imag.reshape(-1)
        return json.dumps({
            "dim": self.dim,
            "rank": self.rank,
            "grid_id": self.grid_id,
            "index_order": INDEX_ORDER,
            "values": flat.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "SymTensorField":
        doc = json.loads(text)
        if doc.get("index_order") != INDEX_ORDER:
            raise ValueError(f"unsupported index order {doc.get('index_order')!r}")
        flat = np.asarray(doc["values"], dtype=float)
        values = flat[0::2] + 1j * flat[1::2]
        ncoef = sym_index_count(doc["dim"], doc["rank"])
        return cls(doc["dim"], doc["rank"], doc["grid_id"],
                   values.reshape(-1, ncoef))
