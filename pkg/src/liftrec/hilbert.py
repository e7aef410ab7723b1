"""Discrete grids, Hilbert structures and bivariate fields.

A discrete Hilbert structure is an SPD Gram matrix ``G`` together with a
whitening factor ``L`` satisfying ``L^T L = G``.  Whitening turns every
weighted inner product into the Euclidean one, so all singular value
computations downstream (nuclear norms, tangent projections, certificates)
run on whitened matrices with plain Euclidean geometry.

Conventions fixed here and relied on everywhere else:

* a bivariate field stores values with rows indexed by the first (x)
  variable and columns by the second (y) variable;
* the associated operator maps the x-space into the y-space, so "apply the
  field to a" reads ``values.T @ a`` in suitable coordinates;
* the discrete reproducing kernel of a structure is ``G^{-1}``, whose
  column j represents the evaluation functional at node j.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import NumericFailure

INNER_PRODUCT_KINDS = ("l2", "h1", "h2", "laplacian_seminorm")


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on an interval with composite trapezoid weights."""

    n: int
    a: float
    b: float
    h: float
    nodes: np.ndarray
    quad_weights: np.ndarray

    @property
    def length(self):
        return self.b - self.a


def build_grid_1d(n, a=0.0, b=1.0):
    """Build a uniform 1-D grid.

    Parameters
    ----------
    n : int
        Node count, at least 3.
    a, b : float
        Interval endpoints with ``b > a``.

    Returns
    -------
    Grid1D
    """
    if n < 3:
        raise ValueError(f"need at least 3 nodes, got n={n}")
    if not b > a:
        raise ValueError(f"need b > a, got a={a}, b={b}")
    h = (b - a) / (n - 1)
    nodes = np.linspace(a, b, n)
    weights = np.full(n, h)
    weights[0] = weights[-1] = 0.5 * h
    return Grid1D(n=n, a=float(a), b=float(b), h=h, nodes=nodes, quad_weights=weights)


@dataclass(frozen=True)
class Grid2D:
    """Uniform tensor grid on a square with trapezoid area/arc-length weights.

    Nodes are flattened in row-major order, ``flat = ix * ny + iy``.  The
    boundary index runs counterclockwise starting at the (a, a) corner, so
    that ``boundary_arclength`` parameterizes the boundary loop.
    """

    nx: int
    ny: int
    a: float
    b: float
    h: float
    xs: np.ndarray           # flattened x coordinate per node
    ys: np.ndarray           # flattened y coordinate per node
    area_weights: np.ndarray
    interior_index: np.ndarray
    boundary_index: np.ndarray
    boundary_normals: np.ndarray
    boundary_weights: np.ndarray
    boundary_arclength: np.ndarray

    @property
    def n_nodes(self):
        return self.nx * self.ny

    @property
    def interior_weights(self):
        return self.area_weights[self.interior_index]

    def flat(self, ix, iy):
        return ix * self.ny + iy


def build_grid_2d(nx, ny, a=0.0, b=1.0):
    """Build a uniform grid on the square [a, b]^2.

    Requires matching spacing on both axes (square cells).
    """
    if nx < 3 or ny < 3:
        raise ValueError("need at least 3 nodes per axis")
    if not b > a:
        raise ValueError(f"need b > a, got a={a}, b={b}")
    hx = (b - a) / (nx - 1)
    hy = (b - a) / (ny - 1)
    if abs(hx - hy) > 1e-14 * abs(b - a):
        raise ValueError("grid cells must be square")
    h = hx
    x1 = np.linspace(a, b, nx)
    y1 = np.linspace(a, b, ny)
    xs = np.repeat(x1, ny)
    ys = np.tile(y1, nx)

    w1x = np.full(nx, h)
    w1x[0] = w1x[-1] = 0.5 * h
    w1y = np.full(ny, h)
    w1y[0] = w1y[-1] = 0.5 * h
    area = np.kron(w1x, w1y)

    def flat(ix, iy):
        return ix * ny + iy

    interior = np.array(
        [flat(ix, iy) for ix in range(1, nx - 1) for iy in range(1, ny - 1)],
        dtype=int,
    )

    # boundary loop, counterclockwise from (a, a)
    loop = []
    normals = []
    for ix in range(nx - 1):                      # bottom edge, y = a
        loop.append(flat(ix, 0))
        normals.append((0.0, -1.0))
    for iy in range(ny - 1):                      # right edge, x = b
        loop.append(flat(nx - 1, iy))
        normals.append((1.0, 0.0))
    for ix in range(nx - 1, 0, -1):               # top edge, y = b
        loop.append(flat(ix, ny - 1))
        normals.append((0.0, 1.0))
    for iy in range(ny - 1, 0, -1):               # left edge, x = a
        loop.append(flat(0, iy))
        normals.append((-1.0, 0.0))
    boundary = np.array(loop, dtype=int)
    normals = np.array(normals, dtype=float)
    # corners get the diagonal outward direction
    corner_normals = {
        flat(0, 0): (-1.0, -1.0),
        flat(nx - 1, 0): (1.0, -1.0),
        flat(nx - 1, ny - 1): (1.0, 1.0),
        flat(0, ny - 1): (-1.0, 1.0),
    }
    for k, node in enumerate(boundary):
        if node in corner_normals:
            v = np.array(corner_normals[node])
            normals[k] = v / np.linalg.norm(v)

    n_bdry = boundary.size
    bweights = np.full(n_bdry, h)                 # closed uniform loop
    arclength = h * np.arange(n_bdry)

    return Grid2D(
        nx=nx, ny=ny, a=float(a), b=float(b), h=h, xs=xs, ys=ys,
        area_weights=area, interior_index=interior, boundary_index=boundary,
        boundary_normals=normals, boundary_weights=bweights,
        boundary_arclength=arclength,
    )


# ---------------------------------------------------------------------------
# difference matrices (second-order: central inside, one-sided at endpoints)


def first_difference_1d(grid):
    """Full-grid first-derivative matrix, exact on quadratics."""
    n, h = grid.n, grid.h
    d = np.zeros((n, n))
    for j in range(1, n - 1):
        d[j, j - 1] = -0.5 / h
        d[j, j + 1] = 0.5 / h
    d[0, 0:3] = np.array([-1.5, 2.0, -0.5]) / h
    d[-1, -3:] = np.array([0.5, -2.0, 1.5]) / h
    return d


def second_difference_1d(grid):
    """Full-grid second-derivative matrix, exact on quadratics."""
    n, h = grid.n, grid.h
    d = np.zeros((n, n))
    for j in range(1, n - 1):
        d[j, j - 1] = 1.0 / h ** 2
        d[j, j] = -2.0 / h ** 2
        d[j, j + 1] = 1.0 / h ** 2
    d[0, 0:4] = np.array([2.0, -5.0, 4.0, -1.0]) / h ** 2
    d[-1, -4:] = np.array([-1.0, 4.0, -5.0, 2.0]) / h ** 2
    return d


def _axis_differences_2d(grid):
    """First-derivative matrices along x and y on the flattened 2-D grid."""
    gx = build_grid_1d(grid.nx, grid.a, grid.b)
    gy = build_grid_1d(grid.ny, grid.a, grid.b)
    d1x = first_difference_1d(gx)
    d1y = first_difference_1d(gy)
    dx = np.kron(d1x, np.eye(grid.ny))
    dy = np.kron(np.eye(grid.nx), d1y)
    return dx, dy


# ---------------------------------------------------------------------------
# inner products


@dataclass
class InnerProduct:
    """Discrete Hilbert structure: SPD Gram, whitener and reproducing kernel.

    Attributes
    ----------
    dim : int
        Space dimension.
    gram : ndarray
        The SPD Gram matrix G.
    whitener : ndarray
        Upper triangular L with ``L.T @ L == G`` (Cholesky factor).
    kind : str
        One of ``l2``, ``h1``, ``h2``, ``laplacian_seminorm``, ``identity``.
    integral_vector : ndarray or None
        Representation of integration against 1: ``integral(f) = integral_vector @ f``.
        Present for quadrature-backed structures and coefficient spaces with
        known basis integrals.
    """

    dim: int
    gram: np.ndarray
    whitener: np.ndarray
    kind: str
    integral_vector: np.ndarray | None = None
    _kernel: np.ndarray | None = field(default=None, repr=False)

    @property
    def kernel(self):
        """Discrete reproducing kernel G^{-1}; column j evaluates at node j."""
        if self._kernel is None:
            ident = np.eye(self.dim)
            self._kernel = scipy.linalg.cho_solve((self.whitener, False), ident)
        return self._kernel

    def inner(self, u, v):
        return float(u @ self.gram @ v)

    def norm(self, u):
        return float(np.linalg.norm(self.whitener @ u))

    def whiten_vec(self, u):
        return self.whitener @ u

    def unwhiten_vec(self, w):
        return scipy.linalg.solve_triangular(self.whitener, w, lower=False)

    def unwhiten_transpose(self, w):
        """Compute ``L^{-T} w``; used to whiten kernel-weighted fields stably."""
        return scipy.linalg.solve_triangular(self.whitener.T, w, lower=True)


def _cholesky_or_raise(gram, kind):
    try:
        return scipy.linalg.cholesky(gram, lower=False)
    except scipy.linalg.LinAlgError as exc:
        eigs = np.linalg.eigvalsh(gram)
        raise NumericFailure(
            f"Gram matrix for kind={kind!r} is not SPD after assembly: "
            f"eigenvalue range [{eigs[0]:.3e}, {eigs[-1]:.3e}]"
        ) from exc


def assemble_inner_product(grid, kind):
    """Assemble a Gram matrix and its whitening factor on a grid.

    Parameters
    ----------
    grid : Grid1D or Grid2D
    kind : str
        ``l2``: quadrature weights only.
        ``h1``: l2 plus first-derivative energy.
        ``h2``: h1 plus second-derivative energy (1-D grids only).
        ``laplacian_seminorm``: second-derivative energy on the zero-boundary
        interior subspace (1-D grids only; dimension n - 2).

    Returns
    -------
    InnerProduct
    """
    if kind not in INNER_PRODUCT_KINDS:
        raise ValueError(f"unknown inner product kind {kind!r}")

    if isinstance(grid, Grid1D):
        w = grid.quad_weights
        wmat = np.diag(w)
        if kind == "laplacian_seminorm":
            # Dirichlet Laplacian on interior nodes, measured with interior
            # quadrature weights; SPD because the Dirichlet matrix is invertible.
            n = grid.n
            h = grid.h
            lap = np.zeros((n - 2, n - 2))
            for j in range(n - 2):
                lap[j, j] = -2.0 / h ** 2
                if j > 0:
                    lap[j, j - 1] = 1.0 / h ** 2
                if j < n - 3:
                    lap[j, j + 1] = 1.0 / h ** 2
            gram = lap.T @ np.diag(w[1:-1]) @ lap
            whitener = _cholesky_or_raise(gram, kind)
            return InnerProduct(dim=n - 2, gram=gram, whitener=whitener, kind=kind)
        gram = wmat.copy()
        if kind in ("h1", "h2"):
            d1 = first_difference_1d(grid)
            gram = gram + d1.T @ wmat @ d1
        if kind == "h2":
            d2 = second_difference_1d(grid)
            gram = gram + d2.T @ wmat @ d2
        whitener = _cholesky_or_raise(gram, kind)
        return InnerProduct(
            dim=grid.n, gram=gram, whitener=whitener, kind=kind,
            integral_vector=w.copy(),
        )

    if isinstance(grid, Grid2D):
        if kind in ("h2", "laplacian_seminorm"):
            raise ValueError(f"kind {kind!r} is not supported on 2-D grids")
        w = grid.area_weights
        gram = np.diag(w)
        if kind == "h1":
            dx, dy = _axis_differences_2d(grid)
            gram = gram + dx.T @ np.diag(w) @ dx + dy.T @ np.diag(w) @ dy
        whitener = _cholesky_or_raise(gram, kind)
        return InnerProduct(
            dim=grid.n_nodes, gram=gram, whitener=whitener, kind=kind,
            integral_vector=w.copy(),
        )

    raise TypeError(f"unsupported grid type {type(grid)!r}")


def identity_inner_product(dim, integrals=None):
    """Euclidean structure for coefficient spaces (orthonormal bases)."""
    ident = np.eye(dim)
    return InnerProduct(
        dim=dim, gram=ident.copy(), whitener=ident.copy(), kind="identity",
        integral_vector=None if integrals is None else np.asarray(integrals, float),
    )


# ---------------------------------------------------------------------------
# bivariate fields


@dataclass
class BivariateField:
    """Value matrix F[j, k] ~ F(x_j, y_k) with Hilbert structures on each axis."""

    x_space: InnerProduct
    y_space: InnerProduct
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if self.values.shape != (self.x_space.dim, self.y_space.dim):
            raise ValueError(
                f"values shape {self.values.shape} does not match spaces "
                f"({self.x_space.dim}, {self.y_space.dim})"
            )


def rank_one_field(x_space, y_space, u, v):
    """Field with values ``outer(u, v)``, the discrete tensor product."""
    return BivariateField(x_space, y_space, np.outer(u, v))


def whiten(fld):
    """Whitened coordinates ``L_x @ values @ L_y.T`` of a field.

    In these coordinates the Hilbert-Schmidt inner product is Frobenius and
    every downstream SVD-based quantity is Euclidean.
    """
    return fld.x_space.whitener @ fld.values @ fld.y_space.whitener.T


def unwhiten(matrix, x_space, y_space):
    """Invert :func:`whiten`; round trip is the identity to round-off."""
    matrix = np.asarray(matrix, float)
    if matrix.shape != (x_space.dim, y_space.dim):
        raise ValueError(
            f"matrix shape {matrix.shape} does not match spaces "
            f"({x_space.dim}, {y_space.dim})"
        )
    tmp = scipy.linalg.solve_triangular(x_space.whitener, matrix, lower=False)
    vals = scipy.linalg.solve_triangular(y_space.whitener, tmp.T, lower=False).T
    return BivariateField(x_space, y_space, vals)


def field_inner(f, g):
    """Hilbert-Schmidt inner product of two fields with common structures."""
    return float(np.sum(whiten(f) * whiten(g)))


def diag_restrict(fld):
    """Restriction to the diagonal, ``F(x, y) -> F(x, x)``.

    Linear in the field; requires a square value matrix (both variables on
    the same grid).
    """
    vals = fld.values if isinstance(fld, BivariateField) else np.asarray(fld)
    if vals.shape[0] != vals.shape[1]:
        raise ValueError(f"diagonal restriction needs a square matrix, got {vals.shape}")
    return np.diag(vals).copy()


def integrate_second_variable(fld):
    """Integrate a field over its second variable, ``F -> int F(., y) dy``.

    Uses the y-structure's quadrature weights (grid case) or basis integrals
    (coefficient case).
    """
    wy = fld.y_space.integral_vector
    if wy is None:
        raise ValueError(
            "y space carries no integration data (need quadrature weights or "
            "basis integrals)"
        )
    return fld.values @ wy
