"""Diffeomorphisms of the n-torus and isotopies between them.

Maps are stored as lifts R^n -> R^n satisfying g(x + m) = g(x) + L m for
an integer degree matrix L.  Displacement-backed maps (id + trig field)
compose and invert in closed form whenever the relevant field is constant
along the coordinates the other one moves; otherwise generic composition
trees with Newton inversion are used.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DimensionMismatch,
    EndpointMismatch,
    NoConvergence,
    NotDiffeotopy,
    SingularJacobian,
    UnsupportedForm,
)
from .fields import TrigDisplacementField, jacobian_sup_norm, unit_grid

_COND_LIMIT = 1e12


def torus_representative(x: np.ndarray) -> np.ndarray:
    """Canonical representative in [0,1)^n."""
    x = np.asarray(x, dtype=float)
    return x - np.floor(x)


class TorusMapHandle:
    """A torus self-map given by a lift.

    Subclasses provide apply/jacobian on arrays of shape (..., n) and the
    integer degree matrix.  apply returns lift values (not reduced mod 1);
    use torus_representative for the canonical point.
    """

    dim: int

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def degree_matrix(self) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> str:
        return type(self).__name__

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.apply(x)


class TrigDisplacementMap(TorusMapHandle):
    """id + v for a trigonometric displacement field v (degree = identity)."""

    def __init__(self, field: TrigDisplacementField):
        self.field = field
        self.dim = field.dim

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        return x + self.field.evaluate(x)

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        jac = self.field.jacobian(x)
        idx = np.arange(self.dim)
        jac[..., idx, idx] += 1.0
        return jac

    @property
    def degree_matrix(self):
        return np.eye(self.dim, dtype=np.int64)

    def describe(self):
        return f"id+field[{self.field.n_terms} terms]"


def identity_map(dim: int) -> TrigDisplacementMap:
    return TrigDisplacementMap(TrigDisplacementField.zero(dim))


def is_identity(handle: TorusMapHandle) -> bool:
    return isinstance(handle, TrigDisplacementMap) and handle.field.n_terms == 0


class HomothetyMap(TorusMapHandle):
    """x -> factor * x, the standard expanding self-cover of the torus."""

    def __init__(self, dim: int, factor: int):
        factor = int(factor)
        if factor < 2:
            raise UnsupportedForm("homothety factor must be an integer >= 2")
        self.dim = dim
        self.factor = factor

    def apply(self, x):
        return np.asarray(x, dtype=float) * self.factor

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        eye = self.factor * np.eye(self.dim)
        return np.broadcast_to(eye, x.shape[:-1] + (self.dim, self.dim)).copy()

    @property
    def degree_matrix(self):
        return self.factor * np.eye(self.dim, dtype=np.int64)

    def describe(self):
        return f"x->{self.factor}x"


class CompositeMap(TorusMapHandle):
    """outer after inner, by the chain rule."""

    def __init__(self, outer: TorusMapHandle, inner: TorusMapHandle):
        if outer.dim != inner.dim:
            raise DimensionMismatch("composition of maps on different tori")
        self.outer = outer
        self.inner = inner
        self.dim = outer.dim

    def apply(self, x):
        return self.outer.apply(self.inner.apply(x))

    def jacobian(self, x):
        y = self.inner.apply(x)
        return self.outer.jacobian(y) @ self.inner.jacobian(x)

    @property
    def degree_matrix(self):
        return self.outer.degree_matrix @ self.inner.degree_matrix

    def describe(self):
        return f"({self.outer.describe()} o {self.inner.describe()})"


def newton_invert(handle: TorusMapHandle, y: np.ndarray, tol: float = 1e-12,
                  max_iter: int = 60) -> np.ndarray:
    """Solve handle(x) = y by Newton iteration seeded at x = y.

    Valid for maps with identity degree whose displacement Jacobian stays
    well below 1 in norm; all maps constructed in this package satisfy that
    whenever the underlying isotopy checks pass.
    """
    y = np.asarray(y, dtype=float)
    x = y.copy()
    for _ in range(max_iter):
        residual = handle.apply(x) - y
        if float(np.abs(residual).max(initial=0.0)) < tol:
            return x
        jac = handle.jacobian(x)
        try:
            step = np.linalg.solve(jac, residual[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from exc
        x = x - step
    raise NoConvergence(
        f"Newton stalled for {handle.describe()}; residual "
        f"{float(np.abs(handle.apply(x) - y).max(initial=0.0)):.3e} > {tol:.1e}"
    )


class NewtonInverseMap(TorusMapHandle):
    """Inverse of a degree-identity diffeomorphism, evaluated by Newton.

    The Jacobian comes from the implicit function rule
    D(g^-1)(y) = [Dg(g^-1(y))]^-1.
    """

    def __init__(self, inner: TorusMapHandle, tol: float = 1e-12):
        if not np.array_equal(inner.degree_matrix, np.eye(inner.dim, dtype=np.int64)):
            raise UnsupportedForm("only degree-identity maps are inverted")
        self.inner = inner
        self.dim = inner.dim
        self.tol = tol

    def apply(self, y):
        return newton_invert(self.inner, y, tol=self.tol)

    def jacobian(self, y):
        x = self.apply(y)
        jac = self.inner.jacobian(x)
        cond = np.linalg.cond(jac)
        if not np.all(np.isfinite(cond)) or float(np.max(cond)) > _COND_LIMIT:
            raise SingularJacobian(
                f"inner Jacobian condition {float(np.max(cond)):.3e} exceeds {_COND_LIMIT:.1e}"
            )
        eye = np.broadcast_to(np.eye(self.dim), jac.shape).copy()
        return np.linalg.solve(jac, eye)

    @property
    def degree_matrix(self):
        return np.eye(self.dim, dtype=np.int64)

    def describe(self):
        return f"inv({self.inner.describe()})"


def compose(outer: TorusMapHandle, inner: TorusMapHandle) -> TorusMapHandle:
    """Composition outer o inner, in closed form when the algebra is exact.

    For displacement maps id+u and id+w the composite is id + (w + u) when
    u is constant along every coordinate w moves.
    """
    if outer.dim != inner.dim:
        raise DimensionMismatch("composition of maps on different tori")
    if is_identity(outer):
        return inner
    if is_identity(inner):
        return outer
    if isinstance(outer, TrigDisplacementMap) and isinstance(inner, TrigDisplacementMap):
        if outer.field.is_invariant_along(inner.field.moved_coordinates()):
            return TrigDisplacementMap(inner.field.plus(outer.field))
    return CompositeMap(outer, inner)


def invert(handle: TorusMapHandle, tol: float = 1e-12) -> TorusMapHandle:
    """Inverse handle; exact id - v when v is self-invariant, Newton otherwise."""
    if isinstance(handle, NewtonInverseMap):
        return handle.inner
    if isinstance(handle, TrigDisplacementMap) and handle.field.is_self_invariant():
        return TrigDisplacementMap(handle.field.scaled(-1.0))
    return NewtonInverseMap(handle, tol=tol)


def check_degree_identity(handle: TorusMapHandle):
    if not np.array_equal(handle.degree_matrix, np.eye(handle.dim, dtype=np.int64)):
        raise UnsupportedForm(f"{handle.describe()} does not have identity degree")


# ---------------------------------------------------------------------------
# Isotopies


class IsotopyHandle:
    """A path s in [0,1] of torus diffeomorphisms."""

    dim: int

    def slice_at(self, s: float) -> TorusMapHandle:
        raise NotImplementedError

    def time_derivative(self, s: float, x: np.ndarray) -> np.ndarray:
        """d/ds of the slice, evaluated at source points x."""
        raise NotImplementedError


class StraightLineIsotopy(IsotopyHandle):
    """s -> id + s * v along a fixed displacement field."""

    def __init__(self, field: TrigDisplacementField, check: bool = True,
                 grid_per_axis: int = 64, margin: float = 1.1):
        if check:
            sup = jacobian_sup_norm(field, per_axis=grid_per_axis)
            if sup * margin >= 1.0:
                raise NotDiffeotopy(
                    f"field Jacobian sup norm {sup:.4f} leaves no margin below 1"
                )
        self.field = field
        self.dim = field.dim

    def slice_at(self, s):
        return TrigDisplacementMap(self.field.scaled(float(s)))

    def time_derivative(self, s, x):
        return self.field.evaluate(np.asarray(x, dtype=float))


def constant_identity_isotopy(dim: int) -> StraightLineIsotopy:
    return StraightLineIsotopy(TrigDisplacementField.zero(dim), check=False)


def straight_line_isotopy(field: TrigDisplacementField) -> StraightLineIsotopy:
    return StraightLineIsotopy(field)


class ComposedIsotopy(IsotopyHandle):
    """Slice-wise composition s -> a(s) o b(s)."""

    def __init__(self, a: IsotopyHandle, b: IsotopyHandle):
        if a.dim != b.dim:
            raise DimensionMismatch("isotopies on different tori")
        self.a = a
        self.b = b
        self.dim = a.dim

    def slice_at(self, s):
        return compose(self.a.slice_at(s), self.b.slice_at(s))

    def time_derivative(self, s, x):
        x = np.asarray(x, dtype=float)
        y = self.b.slice_at(s).apply(x)
        da = self.a.time_derivative(s, y)
        jac_a = self.a.slice_at(s).jacobian(y)
        db = self.b.time_derivative(s, x)
        return da + np.einsum("...ij,...j->...i", jac_a, db)


def compose_isotopy(a: IsotopyHandle, b: IsotopyHandle) -> IsotopyHandle:
    """a(s) o b(s); collapses to a straight line when the algebra is exact."""
    if isinstance(a, StraightLineIsotopy) and isinstance(b, StraightLineIsotopy):
        if a.field.is_invariant_along(b.field.moved_coordinates()):
            return StraightLineIsotopy(b.field.plus(a.field), check=False)
    return ComposedIsotopy(a, b)


class BridgedIsotopy(IsotopyHandle):
    """s -> b(s)^-1 o a(s), connecting id to b(1)^-1 o a(1).

    The time derivative uses the implicit rule: with z = b(s)^-1(a(s)(x)),

        dz/ds = Db(s)(z)^-1 [ d/ds a(s)(x) - d/ds b(s)(z) ].
    """

    def __init__(self, a: IsotopyHandle, b: IsotopyHandle, tol: float = 1e-12):
        if a.dim != b.dim:
            raise DimensionMismatch("isotopies on different tori")
        self.a = a
        self.b = b
        self.dim = a.dim
        self.tol = tol

    def slice_at(self, s):
        return compose(invert(self.b.slice_at(s), tol=self.tol), self.a.slice_at(s))

    def time_derivative(self, s, x):
        x = np.asarray(x, dtype=float)
        z = self.slice_at(s).apply(x)
        da = self.a.time_derivative(s, x)
        db = self.b.time_derivative(s, z)
        jac_b = self.b.slice_at(s).jacobian(z)
        try:
            return np.linalg.solve(jac_b, (da - db)[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from exc


def bridge_isotopy(a: IsotopyHandle, b: IsotopyHandle, tol: float = 1e-10,
                   n_checks: int = 16) -> IsotopyHandle:
    """The path s -> b(s)^-1 o a(s).

    Requires a(0) = b(0) so the result starts at the identity; checked on a
    sample of points.  Collapses to a straight line along u - w when both
    inputs are straight lines and w is constant along its own and u's moved
    coordinates.
    """
    if a.dim != b.dim:
        raise DimensionMismatch("isotopies on different tori")
    rng = np.random.default_rng(7)
    probe = rng.random((n_checks, a.dim))
    gap = np.abs(a.slice_at(0.0).apply(probe) - b.slice_at(0.0).apply(probe))
    if float(gap.max(initial=0.0)) > tol:
        raise EndpointMismatch(
            f"isotopies start {float(gap.max()):.3e} apart; need matching slices at s=0"
        )
    if isinstance(a, StraightLineIsotopy) and isinstance(b, StraightLineIsotopy):
        moved = b.field.moved_coordinates() | a.field.moved_coordinates()
        if b.field.is_invariant_along(moved):
            return StraightLineIsotopy(a.field.plus(b.field.scaled(-1.0)), check=False)
    return BridgedIsotopy(a, b)


def isotopy_time_derivative(iso: IsotopyHandle, s: float, x) -> np.ndarray:
    return iso.time_derivative(s, np.asarray(x, dtype=float))


def isotopy_endpoint_gap(iso: IsotopyHandle, target: TorusMapHandle,
                         n_checks: int = 64) -> float:
    """Max |iso(1)(x) - target(x)| over sample points."""
    rng = np.random.default_rng(11)
    probe = rng.random((n_checks, iso.dim))
    return float(np.abs(iso.slice_at(1.0).apply(probe) - target.apply(probe)).max(initial=0.0))


def diffeo_grid_check(handle: TorusMapHandle, per_axis: int = 16,
                      det_floor: float = 1e-6) -> float:
    """Min |det Jacobian| over a grid; raises NotDiffeotopy below the floor."""
    grid = unit_grid(handle.dim, per_axis)
    dets = np.linalg.det(handle.jacobian(grid))
    worst = float(np.abs(dets).min())
    if worst < det_floor:
        raise NotDiffeotopy(f"Jacobian determinant reaches {worst:.3e} on the grid")
    return worst
