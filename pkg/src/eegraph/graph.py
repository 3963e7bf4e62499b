"""Graph representation, Laplacians and the Chebyshev spectral convolution.

The trainable graph is a fixed fully-connected base adjacency multiplied
elementwise by a real-valued mask.  The convolution operator works on the
scaled Laplacian L~ = 2L/lambda_max - I and evaluates the Chebyshev
recurrence with matrix-vector products only; every forward has a matching
explicit backward, including the mask path through degree normalisation
and the dominant eigenvalue.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from eegraph.tensor import DimensionError, Tensor, glorot_uniform


class GraphWarning(RuntimeWarning):
    """Degenerate graph conditions: isolated nodes, eigenvalue fallback."""


# ---------------------------------------------------------------------------
# adjacency


class BaseAdjacency:
    """Fixed all-ones-off-diagonal adjacency; immutable after construction."""

    def __init__(self, entries: np.ndarray):
        entries = np.array(entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise DimensionError(f"adjacency must be square, got {entries.shape}")
        if np.any(np.diag(entries) != 0.0):
            raise ValueError("base adjacency must have a zero diagonal")
        entries.setflags(write=False)
        self.entries = entries
        self.n_nodes = entries.shape[0]

    @classmethod
    def fully_connected(cls, n_nodes: int = 64) -> "BaseAdjacency":
        entries = np.ones((n_nodes, n_nodes)) - np.eye(n_nodes)
        return cls(entries)

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(self.entries))


class AdjacencyMask:
    """Trainable elementwise multiplier on the base adjacency.

    ``values`` is a Tensor so the mask can join a parameter list; ``frozen``
    marks pruned entries which are pinned at exactly zero and receive no
    gradient.  The mask is real-valued and unconstrained otherwise: the graph
    is treated as directed, so asymmetric masks are legal.
    """

    def __init__(self, values: Tensor, frozen: np.ndarray):
        if values.data.shape != frozen.shape:
            raise DimensionError("mask values and frozen flags must share a shape")
        self.values = values
        self.frozen = np.asarray(frozen, dtype=bool)

    @classmethod
    def ones_like(cls, base: BaseAdjacency) -> "AdjacencyMask":
        # Alg-style init: the mask starts as a copy of the base pattern.
        values = Tensor(base.entries.copy(), name="adjacency_mask")
        return cls(values, np.zeros_like(base.entries, dtype=bool))

    @property
    def n_nodes(self) -> int:
        return self.values.data.shape[0]

    def live_mask(self, base: BaseAdjacency) -> np.ndarray:
        return (base.entries != 0.0) & ~self.frozen

    def density(self, base: BaseAdjacency) -> float:
        return np.count_nonzero(self.values.data) / base.n_edges

    def gate_gradient(self) -> None:
        """Zero accumulated gradient on frozen entries."""
        if self.values.grad is not None:
            self.values.grad[self.frozen] = 0.0

    def copy(self) -> "AdjacencyMask":
        values = Tensor(self.values.data.copy(), name=self.values.name)
        return AdjacencyMask(values, self.frozen.copy())

    def export_text(self, path) -> None:
        """Write live entries as ``row col value`` triples with a density header."""
        lines = [f"# nodes={self.n_nodes} density={np.count_nonzero(self.values.data)}/"
                 f"{self.n_nodes * (self.n_nodes - 1)}"]
        rows, cols = np.nonzero(self.values.data)
        for r, c in zip(rows, cols):
            lines.append(f"{r} {c} {float(self.values.data[r, c])!r}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def import_text(cls, path, n_nodes: int = 64) -> "AdjacencyMask":
        values = np.zeros((n_nodes, n_nodes))
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                r, c, v = line.split()
                values[int(r), int(c)] = float(v)
        frozen = values == 0.0
        np.fill_diagonal(frozen, False)  # diagonal is structural, not pruned
        return cls(Tensor(values, name="adjacency_mask"), frozen)


def effective_adjacency(base: BaseAdjacency, mask: AdjacencyMask) -> np.ndarray:
    """A = A_base (elementwise *) mask; frozen entries are exactly zero."""
    if base.entries.shape != mask.values.data.shape:
        raise DimensionError("base and mask shapes differ")
    out = base.entries * mask.values.data
    out[mask.frozen] = 0.0
    return out


def effective_adjacency_backward(grad_adj: np.ndarray, base: BaseAdjacency,
                                 mask: AdjacencyMask) -> None:
    grad = grad_adj * base.entries
    grad[mask.frozen] = 0.0
    mask.values.add_grad(grad)


# ---------------------------------------------------------------------------
# Laplacians


def normalized_laplacian(adj: np.ndarray, warn: bool = True):
    """L = I - D^{-1/2} A D^{-1/2} with D the (signed) row-sum degree.

    Nodes with non-positive degree get a zero row/column in D^{-1/2}, so their
    Laplacian row reduces to the identity row; a :class:`GraphWarning` flags
    the degeneracy (masked graphs can isolate nodes).

    Returns (L, cache) where cache feeds :func:`normalized_laplacian_backward`.
    """
    adj = np.asarray(adj, dtype=np.float64)
    n = adj.shape[0]
    deg = adj.sum(axis=1)
    bad = deg <= 0.0
    if warn and np.any(bad):
        warnings.warn(
            f"{int(bad.sum())} node(s) with non-positive degree; their rows are "
            "treated as isolated", GraphWarning, stacklevel=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(bad, 0.0, deg ** -0.5)
    lap = np.eye(n) - (s[:, None] * adj) * s[None, :]
    cache = (adj, s, deg, bad)
    return lap, cache


def normalized_laplacian_backward(grad_lap: np.ndarray, cache) -> np.ndarray:
    """Gradient through L = I - S A S including S's dependence on the degree."""
    adj, s, deg, bad = cache
    grad_m = -np.asarray(grad_lap)
    # direct term: dM/dA at fixed S
    grad_adj = (s[:, None] * grad_m) * s[None, :]
    # degree term: s_k = d_k^{-1/2}, d_k = sum_l A_kl
    ga = grad_m * adj
    row_term = ga @ s                                # sum_j dM_kj A_kj s_j
    col_term = ga.T @ s                              # sum_i dM_ik A_ik s_i
    with np.errstate(divide="ignore", invalid="ignore"):
        ds_dd = np.where(bad, 0.0, -0.5 * deg ** -1.5)
    grad_deg = (row_term + col_term) * ds_dd
    grad_adj += grad_deg[:, None]                    # d_k depends on the whole row k
    return grad_adj


def power_iteration(mat: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000,
                    seed: int = 7) -> tuple[float, np.ndarray, bool]:
    """Dominant eigenvalue/eigenvector of a square matrix.

    Returns (lambda, vector, converged).  The Rayleigh estimate is checked
    every few matrix applications; convergence means successive estimates
    settled within ``tol``.  Once they have, iteration continues toward
    machine precision on a bounded budget (about twice the applications
    spent reaching ``tol``), so downstream spectral identities hold tighter
    than the contract requires without pathological matrices burning the
    whole allowance.  ``max_iter`` caps total matrix applications.
    """
    n = mat.shape[0]
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(n)
    q /= np.sqrt(q @ q)
    lam = 0.0
    hit_at = -1
    stride = 8
    applied = 0
    while applied < max_iter:
        for _ in range(min(stride, max_iter - applied)):
            q = mat @ q
            applied += 1
        norm = np.sqrt(q @ q)
        if norm < 1e-300:
            return 0.0, q, False
        q /= norm
        z = mat @ q
        lam_new = q @ z
        delta = abs(lam_new - lam)
        lam = lam_new
        scale = max(1.0, abs(lam))
        if hit_at < 0 and delta <= tol * scale:
            hit_at = applied
        if delta <= 1e-14 * scale:
            break
        if hit_at >= 0 and applied > 2 * hit_at + 200:
            break
    return float(lam), q, hit_at >= 0


@dataclass
class ScaledLaplacian:
    """L~ = 2L/lambda_max - I with the spectrum mapped into [-1, 1].

    ``fallback`` records that power iteration failed (or lambda_max was not a
    usable positive value) and lambda_max = 2.0 was substituted.
    """

    matrix: np.ndarray
    lambda_max: float
    fallback: bool = False
    _cache: tuple | None = field(default=None, repr=False)


def scale_laplacian(lap: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000,
                    warn: bool = True) -> ScaledLaplacian:
    """Affinely rescale a Laplacian by its dominant eigenvalue (Chebyshev domain).

    lambda_max comes from power iteration; non-convergence or a non-positive
    estimate falls back to lambda_max = 2.0 with a :class:`GraphWarning`.
    The backward pass differentiates through lambda_max using the dominant
    left/right eigenvectors, so mask gradients see the full chain.
    """
    lap = np.asarray(lap, dtype=np.float64)
    n = lap.shape[0]
    lam, vec_r, ok_r = power_iteration(lap, tol=tol, max_iter=max_iter)
    if np.max(np.abs(lap - lap.T)) < 1e-12:
        lam_l, vec_l, ok_l = lam, vec_r, ok_r
    else:
        lam_l, vec_l, ok_l = power_iteration(lap.T, tol=tol, max_iter=max_iter)
    fallback = not (ok_r and ok_l) or lam <= tol or abs(lam - lam_l) > 1e-4 * max(1.0, abs(lam))
    if fallback:
        if warn:
            warnings.warn(
                f"power iteration unusable (lambda={lam:.3e}); falling back to "
                "lambda_max=2.0", GraphWarning, stacklevel=2)
        lam = 2.0
        cache = (lap, lam, None, None)
    else:
        cache = (lap, lam, vec_r, vec_l)
    matrix = (2.0 / lam) * lap - np.eye(n)
    return ScaledLaplacian(matrix=matrix, lambda_max=lam, fallback=fallback, _cache=cache)


def scale_laplacian_backward(grad_scaled: np.ndarray, scaled: ScaledLaplacian) -> np.ndarray:
    """d(loss)/dL given d(loss)/dL~, including the lambda_max(L) term."""
    lap, lam, vec_r, vec_l = scaled._cache
    grad_lap = (2.0 / lam) * np.asarray(grad_scaled)
    if not scaled.fallback and vec_r is not None:
        # dL~/dlam = -2 L / lam^2 ; dlam/dL = w v^T / (w . v)
        dlam = -(2.0 / lam ** 2) * float((np.asarray(grad_scaled) * lap).sum())
        denom = float(vec_l @ vec_r)
        if abs(denom) > 1e-12:
            grad_lap += dlam * np.outer(vec_l, vec_r) / denom
    return grad_lap


def masked_scaled_laplacian(base: BaseAdjacency, mask: AdjacencyMask,
                            warn: bool = True):
    """Full chain base*mask -> normalized Laplacian -> scaled Laplacian.

    Returns (ScaledLaplacian, cache); the matching backward routes a gradient
    on L~ back into ``mask.values.grad`` with frozen entries gated.
    """
    adj = effective_adjacency(base, mask)
    lap, lap_cache = normalized_laplacian(adj, warn=warn)
    scaled = scale_laplacian(lap, warn=warn)
    return scaled, (lap_cache, scaled)


def masked_scaled_laplacian_backward(grad_scaled: np.ndarray, cache,
                                     base: BaseAdjacency, mask: AdjacencyMask) -> None:
    lap_cache, scaled = cache
    grad_lap = scale_laplacian_backward(grad_scaled, scaled)
    grad_adj = normalized_laplacian_backward(grad_lap, lap_cache)
    effective_adjacency_backward(grad_adj, base, mask)


# ---------------------------------------------------------------------------
# Chebyshev convolution


class ChebLayerWeights:
    """Chebyshev filter coefficients, one (in x out) mixing matrix per tap."""

    def __init__(self, theta: Tensor):
        if theta.data.ndim != 3:
            raise DimensionError("theta must have shape (K, in_channels, out_channels)")
        self.theta = theta

    @classmethod
    def init(cls, rng: np.random.Generator, order: int, in_channels: int,
             out_channels: int, name: str = "theta") -> "ChebLayerWeights":
        data = glorot_uniform(rng, in_channels * order, out_channels,
                              (order, in_channels, out_channels))
        return cls(Tensor(data, name=name))

    @property
    def order(self) -> int:
        return self.theta.data.shape[0]


def _cheb_stack(x: np.ndarray, lap: np.ndarray, order: int) -> np.ndarray:
    """Stack [T_0(L~)x, ..., T_{K-1}(L~)x] via the three-term recurrence."""
    xs = np.empty((order, *x.shape))
    xs[0] = x
    if order > 1:
        xs[1] = lap @ x
    for k in range(2, order):
        xs[k] = 2.0 * (lap @ xs[k - 1]) - xs[k - 2]
    return xs


def cheb_conv(x: np.ndarray, scaled: ScaledLaplacian, weights: ChebLayerWeights) -> np.ndarray:
    """Spectral filter sum_k theta_k T_k(L~) x, batched over leading axes.

    ``x`` is (n, in_ch) or (batch, n, in_ch); T_k(L~) is never materialised,
    only matrix-vector products against the recurrence stack.
    """
    theta = weights.theta.data
    order = theta.shape[0]
    if order < 1:
        raise DimensionError("Chebyshev order must be >= 1")
    if x.shape[-1] != theta.shape[1]:
        raise DimensionError(
            f"input channels {x.shape[-1]} != theta in_channels {theta.shape[1]}")
    if x.shape[-2] != scaled.matrix.shape[0]:
        raise DimensionError(
            f"node count {x.shape[-2]} != Laplacian size {scaled.matrix.shape[0]}")
    xs = _cheb_stack(x, scaled.matrix, order)
    return np.einsum("k...ni,kio->...no", xs, theta, optimize=True)


def cheb_conv_backward(grad_out: np.ndarray, x: np.ndarray, scaled: ScaledLaplacian,
                       weights: ChebLayerWeights, need_dlap: bool = True):
    """Backward for :func:`cheb_conv`.

    Recomputes the recurrence stack from ``x`` (cheaper than caching it for
    wide layers), accumulates dtheta into ``weights``, and returns
    (dx, dL~ or None).  The reverse recurrence mirrors
    X_k = 2 L~ X_{k-1} - X_{k-2}.
    """
    theta = weights.theta.data
    order = theta.shape[0]
    lap = scaled.matrix
    xs = _cheb_stack(x, lap, order)

    weights.theta.add_grad(np.einsum("k...ni,...no->kio", xs, grad_out, optimize=True))

    # adjoints of each T_k(L~) x, seeded by the channel mix
    adj = [np.einsum("...no,io->...ni", grad_out, theta[k], optimize=True)
           for k in range(order)]
    dlap = np.zeros_like(lap) if need_dlap else None
    for k in range(order - 1, 1, -1):
        if need_dlap:
            dlap += 2.0 * np.einsum("...ni,...mi->nm", adj[k], xs[k - 1], optimize=True)
        adj[k - 1] = adj[k - 1] + 2.0 * (lap.T @ adj[k])
        adj[k - 2] = adj[k - 2] - adj[k]
    if order > 1:
        if need_dlap:
            dlap += np.einsum("...ni,...mi->nm", adj[1], xs[0], optimize=True)
        adj[0] = adj[0] + lap.T @ adj[1]
    return adj[0], dlap
