"""Lagrange P1/P2 finite elements on triangles.

Scalar spaces number their dofs as vertices first, then (for P2) one dof per
edge in ``mesh.edges`` order.  Vector spaces stack two copies: every
x-component dof, then every y-component dof.

Vector spaces built with ``normal_bc=True`` carry the constraint
``sigma . n = 0``: on an axis-aligned boundary side the normal component of
each boundary node is fixed to zero (corner nodes get both components
fixed).  Assembled matrices zero the constrained rows and columns and put a
unit diagonal where a vector space meets itself.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.sparse as sp

from .mesh import LOCAL_EDGES, Mesh
from .sparse import AssemblyPattern

DEFAULT_QUAD_DEGREE = 6

_RULES = {
    # (orbit kind, parameter, weight); weights sum to the reference area 1/2
    1: [("c", None, 0.5)],
    2: [("s3", 1.0 / 6.0, 1.0 / 6.0)],
    4: [("s3", 0.44594849091596488632, 0.11169079483900573285),
        ("s3", 0.09157621350977074346, 0.054975871827660933819)],
    5: [("c", None, 0.1125),
        ("s3", 0.47014206410511508977, 0.066197076394253090369),
        ("s3", 0.1012865073234563388, 0.062969590272413576298)],
    6: [("s3", 0.24928674517091042129, 0.058393137863189683013),
        ("s3", 0.06308901449150222834, 0.02542245318510340846),
        ("s6", (0.053145049844816947353, 0.31035245103378440542), 0.041425537809186787597)],
}
# degree 3 borrows the degree-4 rule (the 4-point degree-3 rule has a negative weight)
_RULE_FOR_DEGREE = {1: 1, 2: 2, 3: 4, 4: 4, 5: 5, 6: 6}


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (nq, 2) reference coordinates
    weights: np.ndarray  # (nq,)
    degree: int


def quadrature(degree):
    """Symmetric rule on the reference triangle exact for polynomials of ``degree``."""
    if degree not in _RULE_FOR_DEGREE:
        raise ValueError(f"quadrature degree must be in 1..6, got {degree}")
    exact_to = _RULE_FOR_DEGREE[degree]
    pts, wts = [], []
    for kind, a, w in _RULES[exact_to]:
        if kind == "c":
            bary = [(1 / 3, 1 / 3, 1 / 3)]
        elif kind == "s3":
            b = 1.0 - 2.0 * a
            bary = [(a, a, b), (a, b, a), (b, a, a)]
        else:
            x, y = a
            z = 1.0 - x - y
            bary = [(x, y, z), (y, x, z), (x, z, y), (z, x, y), (y, z, x), (z, y, x)]
        for l0, l1, l2 in bary:
            pts.append((l1, l2))
            wts.append(w)
    return QuadratureRule(np.array(pts), np.array(wts), exact_to)


def reference_basis(degree, points):
    """Values ``(np, nloc)`` and reference gradients ``(np, nloc, 2)``."""
    points = np.atleast_2d(points)
    xi, eta = points[:, 0], points[:, 1]
    lam = np.stack([1.0 - xi - eta, xi, eta], axis=1)
    dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    n = len(points)
    if degree == 1:
        return lam, np.broadcast_to(dlam, (n, 3, 2)).copy()
    if degree != 2:
        raise ValueError(f"unsupported element degree {degree}")
    vals = np.empty((n, 6))
    grads = np.empty((n, 6, 2))
    for i in range(3):
        vals[:, i] = lam[:, i] * (2 * lam[:, i] - 1)
        grads[:, i] = (4 * lam[:, i] - 1)[:, None] * dlam[i]
    for j, (a, b) in enumerate(LOCAL_EDGES):
        vals[:, 3 + j] = 4 * lam[:, a] * lam[:, b]
        grads[:, 3 + j] = 4 * (lam[:, a, None] * dlam[b] + lam[:, b, None] * dlam[a])
    return vals, grads


class Tabulation(NamedTuple):
    """Basis data at the quadrature points of every element."""
    values: np.ndarray  # (nq, nloc)
    grads: np.ndarray  # (nt, nq, nloc, 2) physical gradients
    weights: np.ndarray  # (nt, nq) quadrature weight times |det J|
    points: np.ndarray  # (nt, nq, 2) physical coordinates


class FeSpace:
    """Continuous Lagrange space of degree 1 or 2 with 1 or 2 components."""

    def __init__(self, mesh: Mesh, degree=1, components=1, normal_bc=None):
        if degree not in (1, 2):
            raise ValueError(f"degree must be 1 or 2, got {degree}")
        if components not in (1, 2):
            raise ValueError(f"components must be 1 or 2, got {components}")
        self.mesh = mesh
        self.degree = degree
        self.components = components
        if degree == 1:
            self.dof_map = mesh.triangles.copy()
            self.nodes = mesh.vertices.copy()
        else:
            self.dof_map = np.hstack([mesh.triangles, mesh.n_vertices + mesh.triangle_edges])
            mid = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
            self.nodes = np.vstack([mesh.vertices, mid])
        self.n_scalar = len(self.nodes)
        self.n_dofs = components * self.n_scalar
        self.n_local = self.dof_map.shape[1]
        if normal_bc is None:
            normal_bc = components == 2
        self.boundary_dof_info = self._normal_constraints() if normal_bc else []
        self.constrained_dofs = np.array(sorted({d for d, _, _ in self.boundary_dof_info}), dtype=np.int64)
        self._tabs = {}
        self._patterns = {}

    def __repr__(self):
        kind = "vector" if self.components == 2 else "scalar"
        return f"FeSpace(P{self.degree} {kind}, n_dofs={self.n_dofs})"

    @property
    def is_vector(self):
        return self.components == 2

    @cached_property
    def element_dofs(self):
        """Global dofs of each element, x-block then y-block for vector spaces."""
        if self.components == 1:
            return self.dof_map
        return np.hstack([self.dof_map, self.dof_map + self.n_scalar])

    @cached_property
    def free_mask(self):
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.constrained_dofs] = False
        return mask

    def _normal_constraints(self):
        if self.components != 2:
            raise ValueError("normal boundary constraints need a vector space")
        mesh = self.mesh
        node_normals = {}
        for b, e in enumerate(mesh.boundary_edges):
            n = mesh.boundary_normals[b]
            nodes = list(mesh.edges[e])
            if self.degree == 2:
                nodes.append(mesh.n_vertices + e)
            for node in nodes:
                node_normals.setdefault(int(node), []).append(n)
        info = []
        for node in sorted(node_normals):
            comps = {}
            for n in node_normals[node]:
                axis = int(np.argmax(np.abs(n)))
                if abs(abs(n[axis]) - 1.0) > 1e-12:
                    raise NotImplementedError(
                        f"sigma.n = 0 is only imposed on axis-aligned boundaries; node {node} has normal {n}")
                comps.setdefault(axis, n)
            for c in sorted(comps):
                info.append((c * self.n_scalar + node, c, comps[c].copy()))
        return info

    def tabulate(self, quad_degree=DEFAULT_QUAD_DEGREE):
        tab = self._tabs.get(quad_degree)
        if tab is None:
            rule = quadrature(quad_degree)
            values, ref_grads = reference_basis(self.degree, rule.points)
            J, det, inv_T = self.mesh.jacobians()
            grads = np.einsum("tij,qlj->tqli", inv_T, ref_grads)
            weights = np.abs(det)[:, None] * rule.weights[None, :]
            origin = self.mesh.vertices[self.mesh.triangles[:, 0]]
            points = origin[:, None, :] + np.einsum("tij,qj->tqi", J, rule.points)
            tab = self._tabs[quad_degree] = Tabulation(values, grads, weights, points)
        return tab

    def interpolate(self, func, t=0.0):
        """Nodal interpolant of ``func(x, y, t)``."""
        vals = np.asarray(func(self.nodes[:, 0], self.nodes[:, 1], t), dtype=float)
        if self.components == 1:
            coef = np.broadcast_to(vals, (self.n_scalar,)).astype(float)
        else:
            coef = np.concatenate([np.broadcast_to(vals[..., 0], (self.n_scalar,)),
                                   np.broadcast_to(vals[..., 1], (self.n_scalar,))])
        return FeFunction(self, coef)

    def zero(self):
        return FeFunction(self, np.zeros(self.n_dofs))


@dataclass
class FeFunction:
    space: FeSpace
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.n_dofs,):
            raise ValueError(f"expected {self.space.n_dofs} coefficients, got {self.coefficients.shape}")

    def copy(self):
        return FeFunction(self.space, self.coefficients.copy())

    def _local(self):
        sp_ = self.space
        c = self.coefficients
        if sp_.components == 1:
            return c[sp_.dof_map]  # (nt, nloc)
        return np.stack([c[sp_.dof_map], c[sp_.dof_map + sp_.n_scalar]], axis=-1)  # (nt, nloc, 2)

    def at_quadrature(self, quad_degree=DEFAULT_QUAD_DEGREE):
        """Values and gradients at every quadrature point.

        Scalar: ``(nt, nq)`` and ``(nt, nq, 2)``.  Vector: ``(nt, nq, 2)`` and
        ``(nt, nq, 2, 2)`` with ``grad[..., i, j] = d_j sigma_i``.
        """
        tab = self.space.tabulate(quad_degree)
        loc = self._local()
        if self.space.components == 1:
            return loc @ tab.values.T, np.matmul(loc[:, None, None, :], tab.grads)[:, :, 0, :]
        vals = np.matmul(tab.values, loc)
        grads = np.matmul(np.swapaxes(loc, 1, 2)[:, None], tab.grads)
        return vals, grads

    def evaluate(self, t, p):
        """Value and physical gradient at reference point ``p`` of triangle ``t``."""
        return evaluate(self, t, p)


def evaluate(fn: FeFunction, t, p):
    space = fn.space
    _, _, inv_T = space.mesh.element_geometry(t)
    vals, ref_grads = reference_basis(space.degree, np.asarray(p, dtype=float).reshape(1, 2))
    grads = ref_grads[0] @ inv_T.T  # (nloc, 2)
    dofs = space.dof_map[t]
    if space.components == 1:
        c = fn.coefficients[dofs]
        return float(vals[0] @ c), grads.T @ c
    c = np.stack([fn.coefficients[dofs], fn.coefficients[dofs + space.n_scalar]], axis=1)  # (nloc, 2)
    return vals[0] @ c, c.T @ grads


class FormTag(enum.Enum):
    MASS = "mass"
    STIFFNESS = "stiffness"
    A_FORM = "a_form"  # (grad u, grad v) + (u, v)
    B_FORM = "b_form"  # (div, div) + (rot, rot) + (s, t)
    CONV_U_SIGMA = "conv_u_sigma"  # (w sigma, grad ubar); scalar test, vector trial
    CONV_GRADU = "conv_gradu"  # 2 (w grad u, sigmabar); vector test, scalar trial
    # Newton-only linearisation terms
    CONV_U_FROZEN_SIGMA = "conv_u_frozen_sigma"  # (u s, grad ubar), s frozen vector field
    CONV_U_FROZEN_GRADW = "conv_u_frozen_gradw"  # 2 (u grad w, sigmabar), w frozen scalar


class RhsTag(enum.Enum):
    L2_SOURCE = "l2_source"
    U_SQUARED = "u_squared"


_ARITY = {
    FormTag.STIFFNESS: (1, 1),
    FormTag.A_FORM: (1, 1),
    FormTag.B_FORM: (2, 2),
    FormTag.CONV_U_SIGMA: (1, 2),
    FormTag.CONV_GRADU: (2, 1),
    FormTag.CONV_U_FROZEN_SIGMA: (1, 1),
    FormTag.CONV_U_FROZEN_GRADW: (2, 1),
}


def _vector_basis(tab, nloc):
    """Divergence and scalar curl ``(nt, nq, 2*nloc)`` of the vector basis."""
    G = tab.grads
    div = np.concatenate([G[..., 0], G[..., 1]], axis=-1)
    rot = np.concatenate([-G[..., 1], G[..., 0]], axis=-1)
    return div, rot


def _block_diag_local(K):
    nt, a, b = K.shape
    out = np.zeros((nt, 2 * a, 2 * b))
    out[:, :a, :b] = K
    out[:, a:, b:] = K
    return out


def _scatter(local, test, trial):
    pattern = test._patterns.get(trial)
    if pattern is None:
        rows = np.broadcast_to(test.element_dofs[:, :, None], local.shape)
        cols = np.broadcast_to(trial.element_dofs[:, None, :], local.shape)
        pattern = test._patterns[trial] = AssemblyPattern(rows, cols, (test.n_dofs, trial.n_dofs))
    return pattern.matrix(local)


def _gram(a, b):
    """``sum_q a[t, q, i, ...] * b[t, q, j, ...]`` as a batched matmul, shape (t, i, j)."""
    nt, nq, ni = a.shape[:3]
    a = np.swapaxes(a, 1, 2).reshape(nt, ni, -1)
    b = np.swapaxes(b, 1, 2).reshape(nt, b.shape[2], -1)
    return a @ np.swapaxes(b, 1, 2)


def _weighted_products(W, va, vb):
    """``sum_q W[t, q] va[q, i] vb[q, j]`` for element-independent basis values."""
    prod = va[:, :, None] * vb[:, None, :]
    return (W @ prod.reshape(len(prod), -1)).reshape(len(W), va.shape[1], vb.shape[1])


def _local_matrices(form, test, trial, coeff, quad_degree):
    tt, ts = test.tabulate(quad_degree), trial.tabulate(quad_degree)
    W = tt.weights
    if form in (FormTag.MASS, FormTag.A_FORM):
        M = _weighted_products(W, tt.values, ts.values)
        if form is FormTag.A_FORM:
            M = M + _gram(W[..., None, None] * tt.grads, ts.grads)
        return _block_diag_local(M) if test.components == 2 else M
    if form is FormTag.STIFFNESS:
        return _gram(W[..., None, None] * tt.grads, ts.grads)
    if form is FormTag.B_FORM:
        dt, rt = _vector_basis(tt, test.n_local)
        ds, rs = _vector_basis(ts, trial.n_local)
        K = _gram(W[..., None] * dt, ds) + _gram(W[..., None] * rt, rs)
        return K + _block_diag_local(_weighted_products(W, tt.values, ts.values))
    if form is FormTag.CONV_U_SIGMA:
        w, _ = _coefficient(coeff, 1, quad_degree)
        wv = (W * w)[:, :, None] * ts.values[None]  # (t, q, j)
        # (t, i, j) blocks for each derivative direction = trial component
        return np.concatenate([_gram(tt.grads[..., 0], wv), _gram(tt.grads[..., 1], wv)], axis=2)
    if form is FormTag.CONV_GRADU:
        # exact transpose (times 2) of CONV_U_SIGMA, so the transport terms cancel
        K = _local_matrices(FormTag.CONV_U_SIGMA, trial, test, coeff, quad_degree)
        return 2.0 * np.transpose(K, (0, 2, 1))
    if form is FormTag.CONV_U_FROZEN_SIGMA:
        s, _ = _coefficient(coeff, 2, quad_degree)
        sg = np.matmul(tt.grads, (W[..., None] * s)[..., None])[..., 0]  # (t, q, i)
        return np.swapaxes(sg, 1, 2) @ ts.values
    if form is FormTag.CONV_U_FROZEN_GRADW:
        _, gw = _coefficient(coeff, 1, quad_degree)
        blocks = [_weighted_products(W * gw[..., c], tt.values, ts.values) for c in range(2)]
        return 2.0 * np.concatenate(blocks, axis=1)
    raise ValueError(f"unknown form {form}")


def _coefficient(coeff, components, quad_degree):
    if coeff is None:
        raise ValueError("this form needs a frozen coefficient function")
    if coeff.space.components != components:
        kind = "scalar" if components == 1 else "vector"
        raise ValueError(f"coefficient must be a {kind} function")
    return coeff.at_quadrature(quad_degree)


def assemble_bilinear(form: FormTag, test: FeSpace, trial: FeSpace, coeff: Optional[FeFunction] = None,
                      constrain=True, quad_degree=DEFAULT_QUAD_DEGREE):
    """Assemble the matrix with entries ``a(phi_j, psi_i)`` (row = test dof)."""
    if test.mesh is not trial.mesh:
        raise ValueError("test and trial spaces live on different meshes")
    arity = _ARITY.get(form)
    if form is FormTag.MASS:
        if test.components != trial.components:
            raise ValueError("MASS needs spaces with matching component counts")
    elif arity != (test.components, trial.components):
        raise ValueError(f"{form.name} expects (test, trial) components {arity}, "
                         f"got {(test.components, trial.components)}")
    A = _scatter(_local_matrices(form, test, trial, coeff, quad_degree), test, trial)
    return apply_constraints(A, test, trial) if constrain else A


def apply_constraints(A, test: FeSpace, trial: FeSpace):
    """Zero constrained rows/columns; unit diagonal on a vector space's own block."""
    if not len(test.constrained_dofs) and not len(trial.constrained_dofs):
        return A
    A = sp.diags(test.free_mask.astype(float)) @ A @ sp.diags(trial.free_mask.astype(float))
    if test is trial and len(test.constrained_dofs):
        A = A + sp.diags((~test.free_mask).astype(float))
    A = sp.csr_matrix(A)
    A.eliminate_zeros()
    A.sort_indices()
    return A


def constrain_vector(b, space: FeSpace):
    """Zero the entries of a load vector that belong to constrained dofs."""
    b = np.array(b, dtype=float)
    b[space.constrained_dofs] = 0.0
    return b


def load_vector(space: FeSpace, values=None, grads=None, div=None, rot=None,
                quad_degree=DEFAULT_QUAD_DEGREE):
    """Integrate quadrature-point data against the test basis.

    ``values`` pairs with basis values, ``grads`` with basis gradients
    (scalar spaces), ``div``/``rot`` with the divergence and curl of a vector
    basis.  Arrays have the element/quadrature leading shape ``(nt, nq)``.
    """
    tab = space.tabulate(quad_degree)
    W = tab.weights
    if space.components == 1:
        loc = np.zeros((space.mesh.n_triangles, space.n_local))
        if values is not None:
            loc += (W * values) @ tab.values
        if grads is not None:
            loc += np.matmul(tab.grads, (W[..., None] * grads)[..., None])[..., 0].sum(axis=1)
    else:
        loc = np.zeros((space.mesh.n_triangles, 2 * space.n_local))
        if values is not None:
            part = np.swapaxes(W[..., None] * values, 1, 2) @ tab.values
            loc += part.reshape(len(W), -1)
        if div is not None or rot is not None:
            dv, rv = _vector_basis(tab, space.n_local)
            if div is not None:
                loc += np.matmul((W * div)[:, None, :], dv)[:, 0]
            if rot is not None:
                loc += np.matmul((W * rot)[:, None, :], rv)[:, 0]
    return np.bincount(space.element_dofs.ravel(), weights=loc.ravel(), minlength=space.n_dofs)


def assemble_linear(kind: RhsTag, space: FeSpace, data, t=0.0, quad_degree=DEFAULT_QUAD_DEGREE,
                    constrain=True):
    """Load vectors of the scheme.

    ``L2_SOURCE``: ``data(x, y, t)`` integrated against the test functions.
    ``U_SQUARED``: ``data`` is a scalar :class:`FeFunction` ``u_h``; returns
    ``(u_h**2, vbar)`` with ``u_h`` squared pointwise at quadrature points.
    """
    if kind is RhsTag.L2_SOURCE:
        if not callable(data):
            raise TypeError("L2_SOURCE needs a callable f(x, y, t)")
        pts = space.tabulate(quad_degree).points
        vals = np.asarray(data(pts[..., 0], pts[..., 1], t), dtype=float)
        shape = pts.shape[:2] + ((2,) if space.components == 2 else ())
        b = load_vector(space, values=np.broadcast_to(vals, shape), quad_degree=quad_degree)
    elif kind is RhsTag.U_SQUARED:
        if not isinstance(data, FeFunction) or data.space.components != 1:
            raise TypeError("U_SQUARED needs a scalar FeFunction")
        if space.components != 1:
            raise ValueError("U_SQUARED is tested against a scalar space")
        u, _ = data.at_quadrature(quad_degree)
        b = load_vector(space, values=u * u, quad_degree=quad_degree)
    else:
        raise ValueError(f"unknown load kind {kind}")
    return constrain_vector(b, space) if constrain else b


class Field(NamedTuple):
    """A closed-form field: ``value(x, y, t)`` and ``grad(x, y, t)``.

    Vector fields return values of shape ``(..., 2)`` and gradients of shape
    ``(..., 2, 2)`` with ``grad[..., i, j] = d_j f_i``.
    """
    value: Callable
    grad: Callable


class Norms(NamedTuple):
    l2: float
    h1_semi: float
    h1: float
    # scalar: sqrt(|grad e|^2 + (int e)^2); vector: sqrt(|e|^2 + |div e|^2 + |rot e|^2)
    h1_equiv: float


def norms(fn: Optional[FeFunction], exact: Optional[Field] = None, t=0.0, quad_degree=DEFAULT_QUAD_DEGREE,
          space: Optional[FeSpace] = None):
    """L2, H1-seminorm and H1 norms of ``fn - exact`` (either may be omitted)."""
    if fn is None and space is None:
        raise ValueError("need a function or a space to integrate over")
    space = fn.space if fn is not None else space
    tab = space.tabulate(quad_degree)
    vector = space.components == 2
    if fn is not None:
        val, grad = fn.at_quadrature(quad_degree)
    else:
        nt, nq = tab.weights.shape
        val = np.zeros((nt, nq, 2) if vector else (nt, nq))
        grad = np.zeros((nt, nq, 2, 2) if vector else (nt, nq, 2))
    if exact is not None:
        x, y = tab.points[..., 0], tab.points[..., 1]
        val = val - np.broadcast_to(exact.value(x, y, t), val.shape)
        grad = grad - np.broadcast_to(exact.grad(x, y, t), grad.shape)
    W = tab.weights
    axes = tuple(range(2, val.ndim))
    l2sq = float(np.sum(W * np.sum(val**2, axis=axes)))
    gaxes = tuple(range(2, grad.ndim))
    semisq = float(np.sum(W * np.sum(grad**2, axis=gaxes)))
    if vector:
        div = grad[..., 0, 0] + grad[..., 1, 1]
        rot = grad[..., 1, 0] - grad[..., 0, 1]
        equiv = l2sq + float(np.sum(W * (div**2 + rot**2)))
    else:
        equiv = semisq + float(np.sum(W * val)) ** 2
    return Norms(float(np.sqrt(l2sq)), float(np.sqrt(semisq)), float(np.sqrt(l2sq + semisq)), float(np.sqrt(equiv)))


def integrate(fn: FeFunction, quad_degree=DEFAULT_QUAD_DEGREE):
    """Integral of a scalar finite-element function over the domain."""
    vals, _ = fn.at_quadrature(quad_degree)
    return float(np.sum(fn.space.tabulate(quad_degree).weights * vals))


@dataclass(frozen=True)
class Spaces:
    """The triple of spaces (U_h, Sigma_h, V_h)."""
    u: FeSpace
    sigma: FeSpace
    v: FeSpace

    @property
    def mesh(self):
        return self.u.mesh


def make_spaces(mesh: Mesh, degrees=(1, 1, 2)):
    du, ds, dv = degrees
    return Spaces(FeSpace(mesh, du), FeSpace(mesh, ds, components=2, normal_bc=True), FeSpace(mesh, dv))
