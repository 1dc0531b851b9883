"""Self-covering maps between mapping tori, assembled from chart stages.

Every map here sends the parameter t by an affine rule with a positive
integer slope and acts on fibers by torus diffeomorphisms chosen per
parameter branch, so a composite is evaluated by walking its stages.  The
`side` argument selects one-sided limits at branch boundaries: +1 is the
canonical half-open convention, -1 evaluates the lower branch, which is
what seam-consistency checks compare.
"""

from __future__ import annotations

import itertools
from typing import NamedTuple

import numpy as np

from .errors import (
    DuplicatePreimage,
    MissingPreimage,
    NonIntegral,
    UnsupportedForm,
)
from .manifolds import MTPoint, MultiMappingTorus, Tangent, mapping_torus
from .torus_maps import (
    HomothetyMap,
    IsotopyHandle,
    TorusMapHandle,
    compose,
    identity_map,
    invert,
    torus_representative,
)


class StageFrame(NamedTuple):
    """Output point plus chart derivative blocks of one stage.

    slope is dt'/dt, w is the fiber velocity from the base direction, and
    v is the fiber-to-fiber Jacobian, all in chart coordinates.
    """

    t_out: float
    x_out: np.ndarray
    slope: float
    w: np.ndarray
    v: np.ndarray


class CoveringMapHandle:
    """Common interface of stage maps and their composites."""

    source: MultiMappingTorus
    target: MultiMappingTorus
    name: str = ""

    @property
    def t_slope(self) -> float:
        raise NotImplementedError

    def breakpoints(self):
        """Interior source parameters where the chart formula can switch."""
        raise NotImplementedError

    def frame(self, t: float, x: np.ndarray, side: int = +1) -> StageFrame:
        raise NotImplementedError

    def apply_fiber(self, t: float, x: np.ndarray, side: int = +1):
        fr = self.frame(t, x, side)
        return fr.t_out, fr.x_out

    def fiber_handle_at(self, t: float, side: int = +1):
        """(t_out, torus map handle) for the fiber action at parameter t."""
        raise NotImplementedError

    def apply_raw(self, t: float, x: np.ndarray, side: int = +1):
        t_out, x_out = self.apply_fiber(t, np.asarray(x, dtype=float), side)
        return self.target.seg_of(t_out, side), t_out, x_out

    def apply_point(self, p: MTPoint) -> MTPoint:
        seg, t, x, _ = self.source.normalize_raw(p.seg, p.t, p.x)
        t_out, x_out = self.apply_fiber(t, x, +1)
        return MTPoint(self.target.seg_of(t_out, +1), t_out,
                       torus_representative(x_out))

    def describe(self) -> str:
        return self.name or type(self).__name__


def _identity_frame(t, x, slope=1.0):
    n = x.shape[-1]
    eye = np.broadcast_to(np.eye(n), x.shape + (n,)).copy()
    return StageFrame(t, x, slope, np.zeros_like(x), eye)


def _handle_frame(t_out, handle, x):
    return StageFrame(t_out, handle.apply(x), 1.0, np.zeros_like(x),
                      handle.jacobian(x))


class StageH(CoveringMapHandle):
    """Unwinds the wrap monodromy across the tower, one level per branch.

    On branch j (parameter in [j, j+1] / (k+1)) the fiber moves along the
    level-(k-j) connecting isotopy at local time (k+1) t - j; the last
    branch is the identity.
    """

    def __init__(self, tower, source, target):
        self.tower = tower
        self.k = tower.k
        self.source = source
        self.target = target
        self.name = "H"

    @property
    def t_slope(self):
        return 1.0

    def breakpoints(self):
        return [float(b) for b in self.target.boundaries[1:-1]]

    def _branch(self, t, side):
        j = self.target.seg_of(t, side)
        if j == self.k:
            return j, None, 0.0
        s = (self.k + 1) * t - j
        return j, self.tower.isotopy(self.k - j), float(s)

    def frame(self, t, x, side=+1):
        x = np.asarray(x, dtype=float)
        j, iso, s = self._branch(t, side)
        if iso is None:
            return _identity_frame(t, x)
        handle = iso.slice_at(s)
        w = (self.k + 1) * iso.time_derivative(s, x)
        return StageFrame(t, handle.apply(x), 1.0, w, handle.jacobian(x))

    def fiber_handle_at(self, t, side=+1):
        j, iso, s = self._branch(t, side)
        if iso is None:
            return t, identity_map(self.source.dim)
        return t, iso.slice_at(s)


class StageF(CoveringMapHandle):
    """Aligns every branch to the top tower level: x -> h_k^{-1}(h_{k-j}(x))."""

    def __init__(self, tower, source, target):
        self.tower = tower
        self.k = tower.k
        self.source = source
        self.target = target
        self.name = "F"
        top_inv = invert(tower.level(self.k))
        self._branch_maps = [identity_map(tower.dim)]
        for j in range(1, self.k + 1):
            self._branch_maps.append(compose(top_inv, tower.level(self.k - j)))

    @property
    def t_slope(self):
        return 1.0

    def breakpoints(self):
        return [float(b) for b in self.source.boundaries[1:-1]]

    def frame(self, t, x, side=+1):
        x = np.asarray(x, dtype=float)
        j = self.source.seg_of(t, side)
        return _handle_frame(t, self._branch_maps[j], x)

    def fiber_handle_at(self, t, side=+1):
        return t, self._branch_maps[self.source.seg_of(t, side)]


class StageP(CoveringMapHandle):
    """Fiberwise power of the torus self-cover; the parameter is untouched."""

    def __init__(self, dim, base, k, source, target):
        if k < 1:
            raise UnsupportedForm("fiber cover stage needs k >= 1")
        self.source = source
        self.target = target
        self.handle = HomothetyMap(dim, base ** k)
        self.name = "P"

    @property
    def t_slope(self):
        return 1.0

    def breakpoints(self):
        return []

    def frame(self, t, x, side=+1):
        return _handle_frame(t, self.handle, np.asarray(x, dtype=float))

    def fiber_handle_at(self, t, side=+1):
        return t, self.handle


class StageR(CoveringMapHandle):
    """Stretch onto the long mapping torus: t -> (2m+1) t."""

    def __init__(self, m, source, target):
        self.m = m
        self.factor = 2 * m + 1
        self.source = source
        self.target = target
        self.name = "R"

    @property
    def t_slope(self):
        return float(self.factor)

    def breakpoints(self):
        return []

    def frame(self, t, x, side=+1):
        return _identity_frame(self.factor * t, np.asarray(x, dtype=float),
                               slope=float(self.factor))

    def fiber_handle_at(self, t, side=+1):
        return self.factor * t, identity_map(self.source.dim)


class StageS(CoveringMapHandle):
    """Inserts the untwisting isotopy on every odd unit segment."""

    def __init__(self, m, psi: IsotopyHandle, source, target):
        self.m = m
        self.psi = psi
        self.source = source
        self.target = target
        self.name = "S"

    @property
    def t_slope(self):
        return 1.0

    def breakpoints(self):
        return [float(i) for i in range(1, 2 * self.m + 1)]

    def frame(self, t, x, side=+1):
        x = np.asarray(x, dtype=float)
        j = self.target.seg_of(t, side)
        if j % 2 == 0:
            return _identity_frame(t, x)
        s = t - j
        handle = self.psi.slice_at(s)
        w = self.psi.time_derivative(s, x)
        return StageFrame(t, handle.apply(x), 1.0, w, handle.jacobian(x))

    def fiber_handle_at(self, t, side=+1):
        j = self.target.seg_of(t, side)
        if j % 2 == 0:
            return t, identity_map(self.source.dim)
        return t, self.psi.slice_at(t - j)


class StageT(CoveringMapHandle):
    """Applies the base gluing map on every odd unit segment."""

    def __init__(self, m, h: TorusMapHandle, source, target):
        self.m = m
        self.h = h
        self.source = source
        self.target = target
        self.name = "T"

    @property
    def t_slope(self):
        return 1.0

    def breakpoints(self):
        return [float(i) for i in range(1, 2 * self.m + 1)]

    def frame(self, t, x, side=+1):
        x = np.asarray(x, dtype=float)
        j = self.source.seg_of(t, side)
        if j % 2 == 0:
            return _identity_frame(t, x)
        return _handle_frame(t, self.h, x)

    def fiber_handle_at(self, t, side=+1):
        j = self.source.seg_of(t, side)
        if j % 2 == 0:
            return t, identity_map(self.source.dim)
        return t, self.h


class StageQ(CoveringMapHandle):
    """Folds the unit segments of the twisted product back onto one."""

    def __init__(self, m, source, target):
        self.m = m
        self.source = source
        self.target = target
        self.name = "Q"

    @property
    def t_slope(self):
        return 1.0

    def breakpoints(self):
        return [float(i) for i in range(1, 2 * self.m + 1)]

    def frame(self, t, x, side=+1):
        j = self.source.seg_of(t, side)
        return _identity_frame(t - j, np.asarray(x, dtype=float))

    def fiber_handle_at(self, t, side=+1):
        j = self.source.seg_of(t, side)
        return t - j, identity_map(self.source.dim)


class IdentityCovering(CoveringMapHandle):
    """Identity chart map of a space; used by seam diagnostics."""

    def __init__(self, space):
        self.source = space
        self.target = space
        self.name = "id"

    @property
    def t_slope(self):
        return 1.0

    def breakpoints(self):
        return []

    def frame(self, t, x, side=+1):
        return _identity_frame(t, np.asarray(x, dtype=float))

    def fiber_handle_at(self, t, side=+1):
        return t, identity_map(self.source.dim)


class CompositeCovering(CoveringMapHandle):
    """Chain of stages applied left to right."""

    def __init__(self, stages, name=""):
        if not stages:
            raise UnsupportedForm("empty composite")
        for a, b in zip(stages, stages[1:]):
            if a.target is not b.source:
                raise UnsupportedForm(
                    f"stage chain broken between {a.describe()} and {b.describe()}"
                )
        self.stages = list(stages)
        self.source = stages[0].source
        self.target = stages[-1].target
        self.name = name

    @property
    def t_slope(self):
        slope = 1.0
        for st in self.stages:
            slope *= st.t_slope
        return slope

    def breakpoints(self):
        points = []
        pre = 1.0
        circ = self.source.circumference
        for st in self.stages:
            for b in st.breakpoints():
                tb = b / pre
                if 1e-12 < tb < circ - 1e-12:
                    points.append(tb)
            pre *= st.t_slope
        uniq = []
        for tb in sorted(points):
            if not uniq or tb - uniq[-1] > 1e-12:
                uniq.append(tb)
        return uniq

    def frame(self, t, x, side=+1):
        x = np.asarray(x, dtype=float)
        slope = 1.0
        w = np.zeros_like(x)
        n = x.shape[-1]
        v = np.broadcast_to(np.eye(n), x.shape + (n,)).copy()
        for st in self.stages:
            fr = st.frame(t, x, side)
            w = fr.w * slope + np.einsum("...ij,...j->...i", fr.v, w)
            v = fr.v @ v
            slope *= fr.slope
            t, x = fr.t_out, fr.x_out
        return StageFrame(t, x, slope, w, v)

    def apply_fiber(self, t, x, side=+1):
        x = np.asarray(x, dtype=float)
        for st in self.stages:
            t, x = st.apply_fiber(t, x, side)
        return t, x

    def fiber_handle_at(self, t, side=+1):
        t_cur = t
        total = None
        for st in self.stages:
            t_cur, handle = st.fiber_handle_at(t_cur, side)
            total = handle if total is None else compose(handle, total)
        return t_cur, total


# ---------------------------------------------------------------------------
# Space and map builders


def build_spaces(tower, m, h_square=None):
    """All chart spaces for the fiber-cover and base-cover constructions.

    Returns a dict sharing the unit mapping torus between both chains so
    composites can be stitched together.
    """
    h = tower.level(0)
    k = tower.k
    dim = tower.dim
    width = 1.0 / (k + 1)
    nk_bounds = [i * width for i in range(k + 1)] + [1.0]
    nk_gluings = [compose(invert(tower.level(k - i - 1)), tower.level(k - i))
                  for i in range(k)]
    if h_square is None:
        h_square = compose(h, h)
    long = 2 * m + 1
    unit_bounds = [float(i) for i in range(long + 1)]
    prime_gluings = [identity_map(dim) if i % 2 == 0 else h_square
                     for i in range(long - 1)]
    tilde_gluings = [h for _ in range(long - 1)]
    return {
        "mh": mapping_torus(h, name="unit"),
        "nk": MultiMappingTorus(nk_bounds, nk_gluings, h, name="tower-segments"),
        "mhk": mapping_torus(tower.level(k), name="top-level"),
        "mbar": mapping_torus(h, circumference=float(long), name="long"),
        "mprime": MultiMappingTorus(unit_bounds, prime_gluings, h, name="paired"),
        "mtilde": MultiMappingTorus(unit_bounds, tilde_gluings, h, name="twisted"),
    }


def build_stage_inventory(tower, m, psi, spaces=None):
    """Every stage map plus the three composites, keyed by short names."""
    if spaces is None:
        spaces = build_spaces(tower, m)
    k = tower.k
    dim = tower.dim
    h = tower.level(0)
    stage_h = StageH(tower, spaces["mh"], spaces["nk"])
    stage_f = StageF(tower, spaces["nk"], spaces["mhk"])
    stage_p = StageP(dim, tower.base, k, spaces["mhk"], spaces["mh"])
    stage_r = StageR(m, spaces["mh"], spaces["mbar"])
    stage_s = StageS(m, psi, spaces["mbar"], spaces["mprime"])
    stage_t = StageT(m, h, spaces["mprime"], spaces["mtilde"])
    stage_q = StageQ(m, spaces["mtilde"], spaces["mh"])
    pk = CompositeCovering([stage_h, stage_f, stage_p], name="pk")
    qm = CompositeCovering([stage_r, stage_s, stage_t, stage_q], name="qm")
    f = CompositeCovering([stage_h, stage_f, stage_p,
                           stage_r, stage_s, stage_t, stage_q], name="f")
    return {
        "H": stage_h, "F": stage_f, "P": stage_p,
        "R": stage_r, "S": stage_s, "T": stage_t, "Q": stage_q,
        "pk": pk, "qm": qm, "f": f,
    }


def build_pk(tower) -> CompositeCovering:
    spaces = build_spaces(tower, m=1)
    inv = build_stage_inventory(tower, 1, _trivial_psi(tower.dim), spaces)
    return inv["pk"]


def _trivial_psi(dim):
    from .torus_maps import constant_identity_isotopy

    return constant_identity_isotopy(dim)


def build_qm(tower, m, psi) -> CompositeCovering:
    inv = build_stage_inventory(tower, m, psi)
    return inv["qm"]


def build_qm_only(h, m, psi) -> CompositeCovering:
    """Base-cover composite straight from the gluing map, no tower needed."""
    dim = h.dim
    long = 2 * m + 1
    unit_bounds = [float(i) for i in range(long + 1)]
    h_square = compose(h, h)
    prime_gluings = [identity_map(dim) if i % 2 == 0 else h_square
                     for i in range(long - 1)]
    tilde_gluings = [h for _ in range(long - 1)]
    mh = mapping_torus(h, name="unit")
    mbar = mapping_torus(h, circumference=float(long), name="long")
    mprime = MultiMappingTorus(unit_bounds, prime_gluings, h, name="paired")
    mtilde = MultiMappingTorus(unit_bounds, tilde_gluings, h, name="twisted")
    return CompositeCovering([
        StageR(m, mh, mbar),
        StageS(m, psi, mbar, mprime),
        StageT(m, h, mprime, mtilde),
        StageQ(m, mtilde, mh),
    ], name="qm")


def build_f(tower, m, psi) -> CompositeCovering:
    inv = build_stage_inventory(tower, m, psi)
    return inv["f"]


def fiber_alignment_map(tower) -> CompositeCovering:
    """The two stages that straighten fibers before the fiber homothety."""
    spaces = build_spaces(tower, m=1)
    return CompositeCovering([
        StageH(tower, spaces["mh"], spaces["nk"]),
        StageF(tower, spaces["nk"], spaces["mhk"]),
    ], name="fiber-align")


# ---------------------------------------------------------------------------
# Derivatives, degree data, preimages


def pushforward(cover: CoveringMapHandle, p: MTPoint, v: Tangent,
                return_point: bool = False):
    """Image of a tangent under the chart differential.

    The input is normalized first (transporting v through any seam
    crossings), so the result does not depend on the chart representative.
    """
    seg, t, x, (u,) = cover.source.normalize_raw(p.seg, p.t, p.x, (v.u,))
    fr = cover.frame(t, x, +1)
    a_out = fr.slope * v.a
    u_out = v.a * fr.w + fr.v @ u
    w = Tangent(a_out, u_out)
    if return_point:
        q = MTPoint(cover.target.seg_of(fr.t_out, +1), fr.t_out,
                    torus_representative(fr.x_out))
        return w, q
    return w


def differential(cover: CoveringMapHandle, p: MTPoint) -> np.ndarray:
    """Full (n+1) x (n+1) chart Jacobian at the canonical representative."""
    seg, t, x, _ = cover.source.normalize_raw(p.seg, p.t, p.x)
    fr = cover.frame(t, x, +1)
    n = cover.source.dim
    jac = np.zeros((n + 1, n + 1))
    jac[0, 0] = fr.slope
    jac[1:, 0] = fr.w
    jac[1:, 1:] = fr.v
    return jac


def _probe_parameter(cover: CoveringMapHandle) -> float:
    """Parameter in the widest branch gap, away from every breakpoint."""
    circ = cover.source.circumference
    knots = [0.0] + list(cover.breakpoints()) + [circ]
    gaps = [(b - a, a, b) for a, b in zip(knots, knots[1:])]
    _, a, b = max(gaps)
    return a + (b - a) / 2.0


def pi1_linear_part(cover: CoveringMapHandle, tol: float = 1e-8) -> np.ndarray:
    """Integer matrix induced on the lattice of deck translations.

    The base slope comes from the chart t-rule; the fiber block is measured
    from the translation law of the fiber lift and must be integral.
    """
    n = cover.source.dim
    slope = cover.t_slope
    mu = round(slope)
    if abs(slope - mu) > tol:
        raise NonIntegral(f"base slope {slope} is not an integer")
    t0 = _probe_parameter(cover)
    _, lift = cover.fiber_handle_at(t0, +1)
    rng = np.random.default_rng(12345)
    x0 = rng.random(n)
    base_val = lift.apply(x0)
    cols = np.empty((n, n))
    for j in range(n):
        shifted = x0.copy()
        shifted[j] += 1.0
        cols[:, j] = lift.apply(shifted) - base_val
    rounded = np.round(cols)
    if float(np.abs(cols - rounded).max()) > tol:
        raise NonIntegral(
            f"fiber translation law deviates by {float(np.abs(cols - rounded).max()):.3e}"
        )
    out = np.zeros((n + 1, n + 1), dtype=np.int64)
    out[0, 0] = mu
    out[1:, 1:] = rounded.astype(np.int64)
    return out


def preimages(cover: CoveringMapHandle, q: MTPoint, newton_tol: float = 1e-12,
              verify_tol: float = 1e-9, dedupe_tol: float = 1e-6):
    """All preimages of q, refined by Newton on the fiber lift.

    Requires single-segment source and target charts (the unit mapping
    torus on both ends, as for the composite covers built here).  Seeds
    come from the linear model: base preimages are (t + j) / slope and
    fiber seeds are coset representatives divided by the fiber degree.
    """
    if cover.source.n_segments != 1 or cover.target.n_segments != 1:
        raise UnsupportedForm("preimage search expects single-segment charts")
    q = cover.target.normalize(q)
    linear = pi1_linear_part(cover)
    mu = int(linear[0, 0])
    fiber_deg = linear[1:, 1:]
    n = cover.source.dim
    scale = int(fiber_deg[0, 0])
    if not np.array_equal(fiber_deg, scale * np.eye(n, dtype=np.int64)):
        raise UnsupportedForm("fiber degree matrix is not scalar")
    expected = mu * scale ** n
    cosets = np.array(list(itertools.product(range(scale), repeat=n)), dtype=float)
    found = []
    for j in range(mu):
        t_j = (q.t + j) / mu
        _, lift = cover.fiber_handle_at(t_j, +1)
        targets = q.x[None, :] + cosets
        x = targets / scale
        converged = False
        for _ in range(60):
            residual = lift.apply(x) - targets
            if float(np.abs(residual).max(initial=0.0)) < newton_tol:
                converged = True
                break
            step = np.linalg.solve(lift.jacobian(x), residual[..., None])[..., 0]
            x = x - step
        if not converged:
            raise MissingPreimage(
                f"branch t={t_j}: fiber Newton did not meet tolerance {newton_tol}"
            )
        for row in x:
            found.append(MTPoint(0, t_j, torus_representative(row)))
    for p in found:
        gap = cover.target.distance(cover.apply_point(p), q)
        if gap > verify_tol:
            raise MissingPreimage(
                f"candidate at t={p.t:.6f} maps {gap:.3e} away from the target"
            )
    for i in range(len(found)):
        for j in range(i + 1, len(found)):
            if cover.source.distance(found[i], found[j]) < dedupe_tol:
                raise DuplicatePreimage(
                    f"candidates {i} and {j} collapsed within {dedupe_tol}"
                )
    if len(found) != expected:
        raise MissingPreimage(f"found {len(found)} of {expected} preimages")
    found.sort(key=lambda p: (round(p.t, 12),) + tuple(np.round(p.x, 12)))
    return found


def orbit(cover: CoveringMapHandle, p: MTPoint, steps: int):
    """Forward orbit [p, f(p), ..., f^steps(p)] with canonical points."""
    points = [cover.source.normalize(p)]
    for _ in range(steps):
        points.append(cover.apply_point(points[-1]))
    return points
