"""Freudenthal (Kuhn) triangulation of [0, 1]^d and the barycentric
partition-of-unity approximant built from local Taylor polynomials.

Each grid cube of side 1/N is split into d! simplices, one per ordering of the
fractional offsets of a point inside the cube. The approximant is

    p(x) = sum_v psi_v(x) T_v(x),

with psi_v the barycentric hat functions of the lattice vertices and T_v the
order-t Taylor polynomial of f at v. At most d + 1 hat functions are active at
any point, which gives the sup-norm bound (d + 1) B d^t N^(-zeta).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class DomainError(ValueError):
    pass


class MembershipError(ValueError):
    pass


class ConstructionError(RuntimeError):
    pass


MEMBERSHIP_TOL = 1e-9


@dataclass(frozen=True)
class HolderSpec:
    """Smoothness zeta = t + sigma with sigma in (0, 1] and Hoelder constant B."""

    zeta: float
    B: float
    t: int | None = None

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError("smoothness must be positive")
        if not self.B > 0:
            raise ValueError("Hoelder constant must be positive")
        if self.t is None:
            object.__setattr__(self, "t", int(math.ceil(self.zeta)) - 1)
        sigma = self.zeta - self.t
        if not 0.0 < sigma <= 1.0:
            raise ValueError(f"t={self.t} incompatible with zeta={self.zeta}")

    @property
    def sigma(self) -> float:
        return self.zeta - self.t


@dataclass(frozen=True)
class SimplexId:
    """Simplex S_{v,pi}: ``base`` holds the integer lattice index of v and
    ``perm`` lists coordinates by increasing offset (0-based)."""

    base: tuple[int, ...]
    perm: tuple[int, ...]

    @property
    def d(self) -> int:
        return len(self.base)

    def vertex_indices(self) -> np.ndarray:
        """Integer lattice indices of the d + 1 vertices, shape (d+1, d).

        Vertex k adds unit steps along the k coordinates with the largest offsets.
        """
        d = self.d
        out = np.tile(np.asarray(self.base, dtype=np.int64), (d + 1, 1))
        for k in range(1, d + 1):
            out[k:, self.perm[d - k]] += 1
        return out

    def vertices(self, N: int) -> np.ndarray:
        return self.vertex_indices() / N

    def contains(self, x, N: int, tol: float = MEMBERSHIP_TOL) -> bool:
        u = N * np.asarray(x, dtype=float) - np.asarray(self.base)
        s = u[list(self.perm)]
        return bool(s[0] >= -tol and s[-1] <= 1.0 + tol and np.all(np.diff(s) >= -tol))


def _check_point(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DomainError("expected a single point")
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise DomainError(f"point {x} lies outside [0, 1]^d")
    return x


def locate_simplex(x, N: int) -> SimplexId:
    """The simplex containing x; ties in the offsets are broken by coordinate index."""
    x = _check_point(x)
    base = np.minimum(np.floor(N * x).astype(np.int64), N - 1)
    u = N * x - base
    perm = np.argsort(u, kind="stable")
    return SimplexId(tuple(int(b) for b in base), tuple(int(p) for p in perm))


def simplices_containing(x, N: int, tol: float = 1e-12) -> list[SimplexId]:
    """Every simplex of the mesh that contains x (more than one on shared faces)."""
    x = _check_point(x)
    d = x.shape[0]
    nx = N * x
    choices = []
    for l in range(d):
        fl = math.floor(nx[l])
        cand = {min(fl, N - 1)}
        if abs(nx[l] - round(nx[l])) <= tol:
            r = int(round(nx[l]))
            cand |= {c for c in (r - 1, r) if 0 <= c <= N - 1}
        choices.append(sorted(cand))
    found = []
    for base in itertools.product(*choices):
        for perm in itertools.permutations(range(d)):
            s = SimplexId(tuple(base), perm)
            if s.contains(x, N, tol):
                found.append(s)
    return found


def barycentric(x, simplex: SimplexId, N: int) -> np.ndarray:
    """Barycentric coordinates of x with respect to ``simplex.vertices(N)``."""
    x = _check_point(x)
    if x.shape[0] != simplex.d:
        raise DomainError("dimension mismatch")
    s = (N * x - np.asarray(simplex.base))[list(simplex.perm)]
    lam = np.empty(simplex.d + 1)
    lam[0] = 1.0 - s[-1]
    lam[1:-1] = s[:0:-1] - s[-2::-1]
    lam[-1] = s[0]
    if np.any(lam < -MEMBERSHIP_TOL):
        raise MembershipError(f"point {x} is not in simplex {simplex}")
    return lam


def pou_weight(vertex: Sequence[int], x, N: int) -> float:
    """Hat function of the lattice vertex with integer index ``vertex`` at x."""
    simplex = locate_simplex(x, N)
    lam = barycentric(x, simplex, N)
    target = np.asarray(vertex, dtype=np.int64)
    hits = np.all(simplex.vertex_indices() == target, axis=1)
    return float(lam[hits][0]) if hits.any() else 0.0


def multi_indices(d: int, t: int) -> list[tuple[int, ...]]:
    """All alpha with |alpha|_1 <= t in graded-lexicographic order."""
    out = []
    for deg in range(t + 1):
        level = [a for a in itertools.product(range(deg + 1), repeat=d) if sum(a) == deg]
        out.extend(sorted(level, reverse=True))
    return out


# ---------------------------------------------------------------------------
# derivative oracles

DerivativeOracle = Callable[[tuple, np.ndarray], np.ndarray]


def ridge_sine_oracle(w: Sequence[float], phase: float = 0.0) -> DerivativeOracle:
    """Derivatives of f(x) = sin(w . x + phase)."""
    w = np.asarray(w, dtype=float)

    def oracle(alpha, x):
        k = sum(alpha)
        s = np.atleast_2d(x) @ w + phase
        return np.sin(s + k * np.pi / 2.0) * float(np.prod(w ** np.asarray(alpha)))

    return oracle


def ridge_sine_holder_constant(w: Sequence[float], t: int) -> float:
    """A valid Hoelder constant for sin(w . x + phase) on the cube, any sigma in (0, 1].

    Derivatives of order k are bounded by |w|_inf^k and the order-t
    derivatives are Lipschitz in the sup-norm with constant |w|_inf^t |w|_1.
    Distances in the cube are at most 1, so the Lipschitz constant also
    bounds every sigma-Hoelder quotient.
    """
    w = np.abs(np.asarray(w, dtype=float))
    winf, w1 = float(w.max()), float(w.sum())
    bound = max(winf ** k for k in range(t + 1))
    return max(bound, winf ** t * w1)


def polynomial_oracle(coeffs: dict[tuple[int, ...], float]) -> DerivativeOracle:
    """Exact derivatives of sum_beta c_beta x^beta."""

    def oracle(alpha, x):
        x = np.atleast_2d(x)
        total = np.zeros(x.shape[0])
        for beta, c in coeffs.items():
            if any(a > b for a, b in zip(alpha, beta)):
                continue
            factor = c
            for a, b in zip(alpha, beta):
                factor *= math.perm(b, a)
            total += factor * np.prod(x ** (np.asarray(beta) - np.asarray(alpha)), axis=1)
        return total

    return oracle


def finite_difference_oracle(f: Callable[[np.ndarray], np.ndarray], N: int,
                             h: float | None = None) -> DerivativeOracle:
    """Central differences along each coordinate (tensor-product stencils)."""
    step = h if h is not None else max(1e-5, 1e-7 * N)

    def oracle(alpha, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        stencils = []
        for l, a in enumerate(alpha):
            if a == 0:
                continue
            pts = [(a / 2.0 - j, (-1) ** j * math.comb(a, j)) for j in range(a + 1)]
            stencils.append([(l, off, c) for off, c in pts])
        total = np.zeros(x.shape[0])
        for combo in itertools.product(*stencils) if stencils else [()]:
            shift = np.zeros(x.shape[1])
            c = 1.0
            for l, off, cc in combo:
                shift[l] += off * step
                c *= cc
            total += c * np.asarray(f(x + shift), dtype=float)
        return total / step ** sum(alpha)

    return oracle


# ---------------------------------------------------------------------------
# approximant


@dataclass(frozen=True, eq=False)
class SimplicialApproximant:
    N: int
    d: int
    spec: HolderSpec
    alphas: tuple[tuple[int, ...], ...]
    coeffs: np.ndarray  # ((N+1)^d, len(alphas)), vertices in row-major index order

    def coefficient(self, vertex: Sequence[int], alpha: Sequence[int]) -> float:
        flat = int(np.ravel_multi_index(tuple(vertex), (self.N + 1,) * self.d))
        return float(self.coeffs[flat, self.alphas.index(tuple(alpha))])

    def __call__(self, x):
        return evaluate(self, x)


def build_approximant(oracle: DerivativeOracle, spec: HolderSpec, N: int, d: int) -> SimplicialApproximant:
    """Store tau_{v,alpha} = d^alpha f(v) / alpha! at every lattice vertex."""
    if N < 1 or d < 1:
        raise ValueError("N and d must be positive")
    alphas = tuple(multi_indices(d, spec.t))
    grid = np.array(list(itertools.product(range(N + 1), repeat=d)), dtype=float) / N
    coeffs = np.empty((grid.shape[0], len(alphas)))
    for j, alpha in enumerate(alphas):
        fact = float(np.prod([math.factorial(a) for a in alpha]))
        try:
            vals = np.asarray(oracle(alpha, grid), dtype=float).ravel()
        except Exception as exc:  # report the first vertex that fails
            for v in grid:
                try:
                    oracle(alpha, v[None, :])
                except Exception:
                    raise ConstructionError(
                        f"derivative {alpha} failed at vertex {tuple(float(c) for c in v)}") from exc
            raise ConstructionError(f"derivative {alpha} failed") from exc
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise ConstructionError(
                f"derivative {alpha} is not finite at vertex {tuple(float(c) for c in grid[bad[0]])}")
        coeffs[:, j] = vals / fact
    return SimplicialApproximant(N, d, spec, alphas, coeffs)


def _check_rows(x, d: int) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(x, dtype=float))
    if rows.shape[1] != d:
        raise DomainError("dimension mismatch")
    if not np.all(np.isfinite(rows)) or np.any(rows < 0.0) or np.any(rows > 1.0):
        raise DomainError("points must lie in [0, 1]^d")
    return rows


def active_vertices(x, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Lattice indices (n, d+1, d) of the simplex vertices around each row of x
    and the matching barycentric weights (n, d+1)."""
    rows = np.atleast_2d(np.asarray(x, dtype=float))
    rows = _check_rows(rows, rows.shape[1])
    n, d = rows.shape
    base = np.minimum(np.floor(N * rows).astype(np.int64), N - 1)
    u = N * rows - base
    perm = np.argsort(u, axis=1, kind="stable")
    s = np.take_along_axis(u, perm, axis=1)
    lam = np.empty((n, d + 1))
    lam[:, 0] = 1.0 - s[:, -1]
    lam[:, 1:-1] = s[:, :0:-1] - s[:, -2::-1]
    lam[:, -1] = s[:, 0]
    verts = np.repeat(base[:, None, :], d + 1, axis=1)
    ar = np.arange(n)
    for k in range(1, d + 1):
        verts[ar[:, None], np.arange(k, d + 1)[None, :], perm[:, d - k][:, None]] += 1
    return verts, lam


def pou_matrix(x, N: int) -> np.ndarray:
    """Dense (n, (N+1)^d) matrix of psi_v(x); columns in row-major vertex order."""
    verts, lam = active_vertices(x, N)
    n, _, d = verts.shape
    flat = np.ravel_multi_index(tuple(verts[..., l] for l in range(d)), (N + 1,) * d)
    out = np.zeros((n, (N + 1) ** d))
    np.add.at(out, (np.arange(n)[:, None], flat), lam)
    return out


def evaluate(approx: SimplicialApproximant, x):
    """p(x) for one point (d,) or rows (n, d)."""
    single = np.asarray(x).ndim == 1
    rows = _check_rows(x, approx.d)
    N, d = approx.N, approx.d
    n = rows.shape[0]
    verts, lam = active_vertices(rows, N)
    flat = np.ravel_multi_index(tuple(verts[..., l] for l in range(d)), (N + 1,) * d)
    diff = rows[:, None, :] - verts / N                     # (n, d+1, d)
    t = approx.spec.t
    powers = np.ones((t + 1,) + diff.shape)
    for p in range(1, t + 1):
        powers[p] = powers[p - 1] * diff
    taylor = np.zeros((n, d + 1))
    coeffs = approx.coeffs[flat]                            # (n, d+1, M)
    for j, alpha in enumerate(approx.alphas):
        mono = np.ones((n, d + 1))
        for l, a in enumerate(alpha):
            if a:
                mono = mono * powers[a, :, :, l]
        taylor += coeffs[:, :, j] * mono
    out = np.sum(lam * taylor, axis=1)
    return float(out[0]) if single else out


def taylor_at(approx: SimplicialApproximant, vertex: Sequence[int], x) -> float:
    """Local Taylor polynomial T_v(x) stored for the lattice vertex with index ``vertex``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(vertex, dtype=float) / approx.N
    total = 0.0
    for alpha in approx.alphas:
        total += approx.coefficient(vertex, alpha) * float(np.prod((x - v) ** np.asarray(alpha)))
    return total


def error_certificate(spec: HolderSpec, d: int, N: int) -> float:
    """Sup-norm bound (d + 1) B d^t N^(-zeta)."""
    if N < 1:
        raise ValueError("N must be positive")
    return (d + 1) * spec.B * d ** spec.t * N ** (-spec.zeta)


@dataclass(frozen=True)
class SizeRecommendation:
    N: int
    delta: float
    depth: int
    size: int
    weight_bound: float


def network_size_recommendation(epsilon: float, spec: HolderSpec, d: int,
                                overlap: str = "simplicial") -> SizeRecommendation:
    """Mesh resolution and product accuracy reaching sup error epsilon.

    ``overlap`` selects the number of overlapping local pieces: d + 1 for the
    simplicial partition, 2^d for the tensor-product one. Depth, size and
    weight bound are the orders log(1/delta), d^t (N+1)^d log(1/delta) and
    epsilon^(-d/zeta) with unit constants; treat them as advisory.
    """
    if not 0.0 < epsilon < 1.0:
        raise DomainError("epsilon must lie in (0, 1)")
    if overlap == "simplicial":
        k = d + 1
    elif overlap == "tensor":
        k = 2 ** d
    else:
        raise ValueError(f"unknown overlap {overlap!r}")
    t, B, z = spec.t, spec.B, spec.zeta
    N = int(math.ceil(epsilon ** (-1.0 / z) * (2.0 * k * B * d ** t) ** (1.0 / z)))
    delta = epsilon / (2.0 * (t + 1) * k * (d + t) * B * d ** t)
    depth = int(math.ceil(math.log(1.0 / delta))) + 1
    size = d ** t * (N + 1) ** d * depth
    return SizeRecommendation(N, delta, depth, size, epsilon ** (-d / z))


# ---------------------------------------------------------------------------
# export


def format_approximant(approx: SimplicialApproximant) -> str:
    s = approx.spec
    lines = [f"d: {approx.d}", f"N: {approx.N}", f"zeta: {s.zeta!r}", f"t: {s.t}", f"B: {s.B!r}"]
    grid = itertools.product(range(approx.N + 1), repeat=approx.d)
    for idx, row in zip(grid, approx.coeffs):
        lines.append(" ".join(str(i) for i in idx) + " : " + " ".join(f"{c:.17g}" for c in row))
    return "\n".join(lines) + "\n"


def parse_approximant(text: str) -> SimplicialApproximant:
    lines = text.splitlines()
    head = dict(line.split(":", 1) for line in lines[:5])
    d, N = int(head["d"]), int(head["N"])
    spec = HolderSpec(float(head["zeta"]), float(head["B"]), int(head["t"]))
    rows = [[float(v) for v in line.split(":", 1)[1].split()] for line in lines[5:] if line.strip()]
    return SimplicialApproximant(N, d, spec, tuple(multi_indices(d, spec.t)), np.array(rows))


def save_approximant(approx: SimplicialApproximant, path) -> None:
    Path(path).write_text(format_approximant(approx))
