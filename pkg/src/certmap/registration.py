"""Robust frame-to-frame registration with certified error bounds.

Given matched points ``b_i = R a_i + t + e_i`` with ``|e_i| <= delta_i`` (``a`` in
frame k, ``b`` in frame k+1), :func:`register` estimates ``(R, t)`` by
graduated non-convexity on a truncated least squares cost, rotation first
(on translation-free point differences), then translation, and returns
worst-case bounds ``|R - R_hat|_F <= epsilon_r`` and ``|t - t_hat| <= epsilon_t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .geom import (
    RotoTranslation,
    canonical_quat,
    check_rotation,
    omega1_stack,
    omega2_stack,
    quat_to_rotation,
)
from .linalg import symmetric_eigh, symmetric_eigvals_batch

DEGENERACY_FLOOR = 1e-6  # meters; shorter point differences are dropped from the graph
OBSERVABILITY_FLOOR = 1e-12
_CENTER_RETRIES = 10


class RegistrationError(ValueError):
    """Base class for registration failures; ``stage`` names the failing step."""

    stage: str | None = None


class DegenerateGraph(RegistrationError):
    pass


class AmbiguousRotation(RegistrationError):
    pass


class UnobservableRotation(RegistrationError):
    pass


class NoConsensus(RegistrationError):
    pass


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    a: np.ndarray
    b: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=float).reshape(-1, 3)
        b = np.array(self.b, dtype=float).reshape(-1, 3)
        delta = np.array(self.delta, dtype=float).reshape(-1)
        if not (len(a) == len(b) == len(delta)):
            raise ValueError(f"length mismatch: |a|={len(a)}, |b|={len(b)}, |delta|={len(delta)}")
        if len(a) < 4:
            raise ValueError(f"need at least 4 correspondences, got {len(a)}")
        if np.any(~(delta > 0)):
            raise ValueError("all noise bounds delta_i must be positive")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("correspondences must be finite")
        for arr in (a, b, delta):
            arr.flags.writeable = False
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "delta", delta)

    def __len__(self) -> int:
        return len(self.a)


@dataclass(frozen=True, eq=False)
class PairGraph:
    """Edges over correspondences, with the translation-free differences cached."""

    n_vertices: int
    edges: np.ndarray  # (E, 2) int
    a_ij: np.ndarray
    b_ij: np.ndarray
    delta_ij: np.ndarray

    def __len__(self) -> int:
        return len(self.edges)

    @classmethod
    def from_edges(cls, c: CorrespondenceSet, edges) -> PairGraph:
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("self-loops are not allowed")
        if edges.size and (edges.min() < 0 or edges.max() >= len(c)):
            raise ValueError("edge references a vertex outside the correspondence set")
        key = np.sort(edges, axis=1)
        if len(np.unique(key, axis=0)) != len(key):
            raise ValueError("duplicate edges")
        i, j = edges[:, 0], edges[:, 1]
        a_ij = c.a[i] - c.a[j]
        if np.any(np.linalg.norm(a_ij, axis=1) <= DEGENERACY_FLOOR):
            raise DegenerateGraph("edge shorter than the degeneracy floor")
        return cls(len(c), edges, a_ij, c.b[i] - c.b[j], c.delta[i] + c.delta[j])

    def subgraph(self, edge_ids) -> PairGraph:
        ids = np.asarray(edge_ids)
        return PairGraph(self.n_vertices, self.edges[ids], self.a_ij[ids], self.b_ij[ids], self.delta_ij[ids])


@dataclass(frozen=True)
class GncConfig:
    max_iterations: int = 100
    mu_update_factor: float = 1.4
    convergence_tol: float = 1e-6
    noise_multiplier: float = 1.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.mu_update_factor > 1.0:
            raise ValueError("mu_update_factor must exceed 1")
        if not (self.convergence_tol > 0 and self.noise_multiplier > 0):
            raise ValueError("convergence_tol and noise_multiplier must be positive")


class GncSolution(NamedTuple):
    estimate: np.ndarray  # unit quaternion for rotation, 3-vector for translation
    weights: np.ndarray
    converged: bool
    iterations: int


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    rotation_estimate: np.ndarray
    translation_estimate: np.ndarray
    epsilon_r: float
    epsilon_t: float
    rotation_weights: np.ndarray
    translation_weights: np.ndarray
    converged: bool
    diagnostics: dict = field(default_factory=dict)

    @property
    def transform(self) -> RotoTranslation:
        """Estimated frame-k to frame-(k+1) transform: ``b = R a + t``."""
        return RotoTranslation(self.rotation_estimate, self.translation_estimate)


# --------------------------------------------------------------------------
# graph construction


@lru_cache(maxsize=8)
def _complete_edges(n: int) -> np.ndarray:
    i, j = np.triu_indices(n, 1)
    out = np.stack([i, j], axis=1).astype(np.int64)
    out.flags.writeable = False
    return out


def build_pair_graph(c: CorrespondenceSet, fraction: float, rng_seed=0) -> PairGraph:
    """Sample ``ceil(fraction * N(N-1)/2)`` distinct edges uniformly from the complete graph.

    Edges whose frame-k difference is shorter than ``DEGENERACY_FLOOR`` are
    skipped and replaced by further samples while any remain.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"graph fraction must be in (0, 1], got {fraction}")
    n = len(c)
    total = n * (n - 1) // 2
    wanted = min(total, math.ceil(fraction * total))
    if wanted < 3:
        raise DegenerateGraph(f"fraction {fraction} of {total} edges leaves {wanted} < 3 edges")
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(total)
    complete = _complete_edges(n)
    picked = complete[order[:wanted]]
    ok = np.linalg.norm(c.a[picked[:, 0]] - c.a[picked[:, 1]], axis=1) > DEGENERACY_FLOOR
    if not ok.all():
        rest = complete[order[wanted:]]
        rest_ok = np.linalg.norm(c.a[rest[:, 0]] - c.a[rest[:, 1]], axis=1) > DEGENERACY_FLOOR
        refill = rest[rest_ok][: int((~ok).sum())]
        picked = np.concatenate([picked[ok], refill])
    if len(picked) < 3:
        raise DegenerateGraph(f"only {len(picked)} non-degenerate edges available")
    i, j = picked[:, 0], picked[:, 1]
    return PairGraph(n, picked, c.a[i] - c.a[j], c.b[i] - c.b[j], c.delta[i] + c.delta[j])


# --------------------------------------------------------------------------
# rotation


def _edge_q_terms(g: PairGraph) -> np.ndarray:
    """Per-edge symmetric 4x4 matrices ``O1(b)^T O2(a) + O2(a)^T O1(b)``."""
    zeros = np.zeros((len(g), 1))
    a_bar = np.hstack([g.a_ij, zeros])
    b_bar = np.hstack([g.b_ij, zeros])
    x = np.matmul(np.swapaxes(omega1_stack(b_bar), 1, 2), omega2_stack(a_bar))
    return x + np.swapaxes(x, 1, 2)


def _smallest_eigvec(q_mat: np.ndarray) -> np.ndarray:
    if not np.allclose(q_mat, q_mat.T, rtol=0.0, atol=1e-9 * max(1.0, np.abs(q_mat).max())):
        raise AssertionError("WLS matrix is not symmetric")
    w, v = symmetric_eigh(q_mat)
    if w[1] - w[0] <= 1e-9 * max(1.0, abs(w[0]), abs(w[3])):
        raise AmbiguousRotation(f"smallest eigenvalues {w[0]:.6g}, {w[1]:.6g} are not separated")
    return canonical_quat(v[:, 0])


def wls_matrix(g: PairGraph, weights) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    return -np.einsum("e,eij->ij", weights, _edge_q_terms(g))


def wls_objective(g: PairGraph, weights, rotation) -> float:
    """``sum_e w_e |b_e - R a_e|^2``."""
    res = g.b_ij - g.a_ij @ np.asarray(rotation).T
    return float(np.dot(np.asarray(weights, dtype=float), np.einsum("ij,ij->i", res, res)))


def wls_rotation(g: PairGraph, weights) -> np.ndarray:
    """Closed-form weighted least squares rotation as a canonical unit quaternion.

    The minimizer is the eigenvector of the smallest eigenvalue of
    ``Q = -sum_e w_e (O1(b_e)^T O2(a_e) + O2(a_e)^T O1(b_e))``.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(g),):
        raise ValueError(f"expected {len(g)} weights, got shape {weights.shape}")
    if np.count_nonzero(weights > 0) < 3:
        raise AmbiguousRotation("fewer than 3 edges carry positive weight")
    return _smallest_eigvec(wls_matrix(g, weights))


def _tls_weights(s: np.ndarray, mu: float) -> np.ndarray:
    """GNC-TLS weights for squared residuals normalized by the squared truncation."""
    lo = mu / (mu + 1.0)
    hi = (mu + 1.0) / mu
    w = np.empty_like(s)
    inner = s <= lo
    outer = s >= hi
    mid = ~(inner | outer)
    w[inner] = 1.0
    w[outer] = 0.0
    w[mid] = np.sqrt(mu * (mu + 1.0) / s[mid]) - mu
    return np.clip(w, 0.0, 1.0)


def _initial_mu(s: np.ndarray) -> float:
    denom = 2.0 * float(s.max()) - 1.0
    if denom <= 0.0:
        return 1e6
    return float(np.clip(1.0 / denom, 1e-6, 1e6))


def _gnc(solve, residual_sq, thresh_sq, cfg: GncConfig, min_support: int):
    """Shared GNC-TLS loop. Returns (estimate, weights, converged, iterations)."""
    w = np.ones(len(thresh_sq))
    x = solve(w)
    s = residual_sq(x) / thresh_sq
    best = (float(np.sum(np.minimum(s, 1.0) * thresh_sq)), x, w)
    mu = _initial_mu(s)
    for it in range(1, cfg.max_iterations + 1):
        w_new = _tls_weights(s, mu)
        if np.count_nonzero(w_new > 0) < min_support:
            return best[1], best[2], False, it
        x = solve(w_new)
        s = residual_sq(x) / thresh_sq
        cost = float(np.sum(np.minimum(s, 1.0) * thresh_sq))
        if cost < best[0]:
            best = (cost, x, w_new)
        change = float(np.max(np.abs(w_new - w)))
        w = w_new
        if change < cfg.convergence_tol:
            return x, w, True, it
        mu *= cfg.mu_update_factor
    return best[1], best[2], False, cfg.max_iterations


def gnc_tls_rotation(g: PairGraph, cfg: GncConfig | None = None) -> GncSolution:
    """Truncated least squares rotation over graph edges, solved by GNC.

    Each edge is truncated at ``delta_ij * noise_multiplier``.
    """
    cfg = cfg or GncConfig()
    terms = _edge_q_terms(g)
    thresh_sq = (g.delta_ij * cfg.noise_multiplier) ** 2

    def solve(w):
        if np.count_nonzero(w > 0) < 3:
            raise AmbiguousRotation("fewer than 3 edges carry positive weight")
        return _smallest_eigvec(-np.einsum("e,eij->ij", w, terms))

    def residual_sq(q):
        res = g.b_ij - g.a_ij @ quat_to_rotation(q).T
        return np.einsum("ij,ij->i", res, res)

    q, w, converged, its = _gnc(solve, residual_sq, thresh_sq, cfg, min_support=3)
    return GncSolution(q, w, converged, its)


def gnc_tls_translation(c: CorrespondenceSet, rotation, cfg: GncConfig | None = None) -> GncSolution:
    """Truncated least squares translation given a rotation estimate.

    The inner weighted problem is solved by the weighted mean of ``b_i - R a_i``.
    """
    cfg = cfg or GncConfig()
    r = check_rotation(rotation)
    d = c.b - c.a @ r.T
    thresh_sq = (c.delta * cfg.noise_multiplier) ** 2

    def solve(w):
        total = w.sum()
        if total <= 0.0:
            raise NoConsensus("all translation weights collapsed to zero")
        return (w @ d) / total

    def residual_sq(t):
        res = d - t
        return np.einsum("ij,ij->i", res, res)

    t, w, converged, its = _gnc(solve, residual_sq, thresh_sq, cfg, min_support=1)
    if not np.any(w > 0):
        raise NoConsensus("all translation weights collapsed to zero")
    return GncSolution(t, w, converged, its)


# --------------------------------------------------------------------------
# bounds


def _bound_terms(g: PairGraph, rotation) -> tuple[np.ndarray, np.ndarray]:
    """Unit edge directions and per-edge ``z = (|b - R a| + delta) / |a|``."""
    r = np.asarray(rotation, dtype=float)
    norms = np.linalg.norm(g.a_ij, axis=1)
    phi = np.linalg.norm(g.b_ij - g.a_ij @ r.T, axis=1)
    return g.a_ij / norms[:, None], (phi + g.delta_ij) / norms


def rotation_bound_full(g: PairGraph, rotation) -> float:
    """Frobenius-norm rotation error bound from every edge of ``g``.

    ``sqrt(2 |z|^2 / (s2^2 + s3^2))`` with ``s2 >= s3`` the two smaller
    singular values of the 3 x |E| matrix of unit edge directions.
    """
    if len(g) < 3:
        raise UnobservableRotation("need at least 3 edges")
    units, z = _bound_terms(g, rotation)
    gram = units.T @ units  # 3x3; shares the squared singular values of A
    lam = symmetric_eigh(gram)[0]
    spread = max(lam[0], 0.0) + max(lam[1], 0.0)
    if spread < OBSERVABILITY_FLOOR * max(1.0, len(g) / 3.0):
        raise UnobservableRotation(f"edge directions are (nearly) collinear: s2^2 + s3^2 = {spread:.3g}")
    return math.sqrt(2.0 * float(z @ z) / spread)


def _adjacency(g: PairGraph):
    src = np.concatenate([g.edges[:, 0], g.edges[:, 1]])
    eid = np.concatenate([np.arange(len(g)), np.arange(len(g))])
    order = np.argsort(src, kind="stable")
    degree = np.bincount(src, minlength=g.n_vertices)
    offsets = np.concatenate([[0], np.cumsum(degree)])
    return degree, offsets, eid[order]


def _three_edge_bounds(units: np.ndarray, z: np.ndarray, triples: np.ndarray) -> np.ndarray:
    """Bound for each row of edge-index triples; NaN where the star is unobservable."""
    cols = units[triples]  # (B, 3 edges, 3 coords)
    gram = np.matmul(np.swapaxes(cols, 1, 2), cols)
    lam = symmetric_eigvals_batch(gram)
    spread = np.maximum(lam[:, 0], 0.0) + np.maximum(lam[:, 1], 0.0)
    zz = np.sum(z[triples] ** 2, axis=1)
    out = np.full(len(triples), np.nan)
    ok = spread >= OBSERVABILITY_FLOOR
    out[ok] = np.sqrt(2.0 * zz[ok] / spread[ok])
    return out


def sample_star_triples(g: PairGraph, iterations: int, rng_seed=0) -> np.ndarray:
    """Edge-index triples ``(i,j), (i,k), (i,l)`` sharing a center, one row per iteration.

    Rows are -1 where no center with degree >= 3 was found within the retry
    budget. Draws are laid out per iteration, so a shorter run is a prefix of
    a longer one with the same seed.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    degree, offsets, adj = _adjacency(g)
    rng = np.random.default_rng(rng_seed)
    u = rng.random((iterations, _CENTER_RETRIES + 3))
    n = g.n_vertices
    cand = np.minimum((u[:, :_CENTER_RETRIES] * n).astype(np.int64), n - 1)
    ok = degree[cand] >= 3
    found = ok.any(axis=1)
    center = cand[np.arange(iterations), np.argmax(ok, axis=1)]
    d = degree[center].astype(np.float64)
    j1 = np.floor(u[:, -3] * d).astype(np.int64)
    j2 = np.floor(u[:, -2] * (d - 1)).astype(np.int64)
    j3 = np.floor(u[:, -1] * (d - 2)).astype(np.int64)
    j2 = j2 + (j2 >= j1)
    lo, hi = np.minimum(j1, j2), np.maximum(j1, j2)
    j3 = j3 + (j3 >= lo)
    j3 = j3 + (j3 >= hi)
    picks = np.stack([j1, j2, j3], axis=1)
    picks = np.minimum(picks, np.maximum(degree[center] - 1, 0)[:, None])
    triples = adj[np.minimum(offsets[center][:, None] + picks, len(adj) - 1)]
    triples[~found] = -1
    return triples


def rotation_bound_trace(g: PairGraph, rotation, iterations: int, rng_seed=0) -> np.ndarray:
    """Running minimum of the three-edge bound after each sampling iteration (inf until a valid sample)."""
    triples = sample_star_triples(g, iterations, rng_seed)
    units, z = _bound_terms(g, rotation)
    valid = triples[:, 0] >= 0
    per_iter = np.full(iterations, np.inf)
    if valid.any():
        b = _three_edge_bounds(units, z, triples[valid])
        per_iter[valid] = np.where(np.isnan(b), np.inf, b)
    return np.minimum.accumulate(per_iter)


def rotation_bound_sampled(g: PairGraph, rotation, iterations: int = 1000, rng_seed=0) -> float:
    """Tightest three-edge (star subgraph) rotation bound found by random sampling."""
    best = float(rotation_bound_trace(g, rotation, iterations, rng_seed)[-1])
    if not math.isfinite(best):
        raise UnobservableRotation("no observable three-edge star found")
    return best


def translation_bound(c: CorrespondenceSet, rotation, translation, epsilon_r: float) -> float:
    """``min_i (epsilon_r |a_i| + |b_i - R a_i - t| + delta_i)`` over all points."""
    if epsilon_r < 0:
        raise ValueError("epsilon_r must be nonnegative")
    r = np.asarray(rotation, dtype=float)
    phi = c.b - c.a @ r.T - np.asarray(translation, dtype=float)
    terms = epsilon_r * np.linalg.norm(c.a, axis=1) + np.linalg.norm(phi, axis=1) + c.delta
    return float(terms.min())


# --------------------------------------------------------------------------


def _stage(name: str, fn, *args):
    try:
        return fn(*args)
    except RegistrationError as exc:
        exc.stage = name
        if not str(exc).startswith(name):
            exc.args = (f"{name}: {exc}",)
        raise


def register(
    c: CorrespondenceSet,
    fraction: float = 0.05,
    iterations: int = 1000,
    cfg: GncConfig | None = None,
    rng_seed=0,
) -> RegistrationResult:
    """Estimate the frame-k to frame-(k+1) rototranslation with certified bounds.

    The estimate maps frame-k points into frame k+1: ``b ≈ R_hat a + t_hat``.
    """
    cfg = cfg or GncConfig()
    graph_seed, bound_seed = np.random.SeedSequence(rng_seed).spawn(2)
    g = _stage("build_pair_graph", build_pair_graph, c, fraction, graph_seed)
    rot = _stage("gnc_tls_rotation", gnc_tls_rotation, g, cfg)
    r_hat = quat_to_rotation(rot.estimate)
    eps_r = _stage("rotation_bound_sampled", rotation_bound_sampled, g, r_hat, iterations, bound_seed)
    trans = _stage("gnc_tls_translation", gnc_tls_translation, c, r_hat, cfg)
    eps_t = translation_bound(c, r_hat, trans.estimate, eps_r)
    return RegistrationResult(
        rotation_estimate=r_hat,
        translation_estimate=np.asarray(trans.estimate, dtype=float),
        epsilon_r=eps_r,
        epsilon_t=eps_t,
        rotation_weights=rot.weights,
        translation_weights=trans.weights,
        converged=bool(rot.converged and trans.converged),
        diagnostics={
            "edges": len(g),
            "rotation_iterations": rot.iterations,
            "translation_iterations": trans.iterations,
            "graph": g,
        },
    )


# --------------------------------------------------------------------------
# text I/O: one "a_x a_y a_z b_x b_y b_z delta" record per line, '#' comments


def _parse_records(lines, source: str) -> np.ndarray:
    rows = []
    for lineno, line in lines:
        fields = line.split()
        if len(fields) != 7:
            raise ValueError(f"{source}:{lineno}: expected 7 columns, got {len(fields)}")
        try:
            rows.append([float(x) for x in fields])
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    return np.array(rows, dtype=float).reshape(-1, 7)


def load_correspondences(path) -> CorrespondenceSet:
    text = Path(path).read_text()
    lines = [(n, ln.split("#", 1)[0].strip()) for n, ln in enumerate(text.splitlines(), 1)]
    rec = _parse_records([(n, ln) for n, ln in lines if ln], str(path))
    return CorrespondenceSet(rec[:, 0:3], rec[:, 3:6], rec[:, 6])


def load_correspondence_frames(path) -> dict[int, CorrespondenceSet]:
    """Multi-frame file: a ``# frame K`` comment starts the records matching frame K-1 to K."""
    frames: dict[int, list] = {}
    current = 1
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = raw.strip()
        if stripped.startswith("#"):
            words = stripped[1:].split()
            if len(words) == 2 and words[0] == "frame":
                current = int(words[1])
            continue
        body = stripped.split("#", 1)[0].strip()
        if body:
            frames.setdefault(current, []).append((n, body))
    out = {}
    for k, lines in frames.items():
        rec = _parse_records(lines, str(path))
        out[k] = CorrespondenceSet(rec[:, 0:3], rec[:, 3:6], rec[:, 6])
    return out


def save_correspondences(path, c: CorrespondenceSet, header: str | None = None) -> None:
    rec = np.hstack([c.a, c.b, c.delta[:, None]])
    head = "a_x a_y a_z b_x b_y b_z delta"
    if header:
        head = header + "\n" + head
    np.savetxt(path, rec, fmt="%.17g", header=head, comments="# ")
