"""Mapping tori built from segments, seam gluings, and a wrap map.

A space here is a disjoint union of parameter segments [a_i, a_{i+1}] x T^n
with the right edge of each segment glued to the left edge of the next by a
torus diffeomorphism, and the last right edge glued back to the first left
edge by the wrap map.  A point is stored in chart form (segment, t, fiber);
the canonical representative uses the half-open segment [a_i, a_{i+1}) and
fiber coordinates in [0,1)^n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NotVertical, UnsupportedForm
from .torus_maps import TorusMapHandle, invert, torus_representative


@dataclass
class MTPoint:
    """Chart representative (segment index, parameter, fiber point)."""

    seg: int
    t: float
    x: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)


@dataclass
class Tangent:
    """Tangent vector (a, u): a along the base parameter, u in the fiber."""

    a: float
    u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)

    def vertical_part(self) -> "Tangent":
        return Tangent(0.0, self.u.copy())

    def horizontal_part(self) -> "Tangent":
        return Tangent(self.a, np.zeros_like(self.u))


def split(v: Tangent) -> tuple[Tangent, Tangent]:
    """Exact splitting into vertical and base-orthogonal parts."""
    return v.vertical_part(), v.horizontal_part()


def norm_0_vertical(v: Tangent) -> float:
    """Euclidean fiber norm of a vertical tangent."""
    if v.a != 0.0:
        raise NotVertical(f"tangent has base component {v.a}")
    return float(np.linalg.norm(v.u))


class MultiMappingTorus:
    """Segments with seam gluings and a wrap identification."""

    def __init__(self, boundaries, gluings, wrap: TorusMapHandle, name: str = ""):
        self.boundaries = np.asarray(boundaries, dtype=float)
        if self.boundaries.ndim != 1 or len(self.boundaries) < 2:
            raise UnsupportedForm("need at least one segment")
        if np.any(np.diff(self.boundaries) <= 0):
            raise UnsupportedForm("segment boundaries must increase")
        self.gluings = list(gluings)
        if len(self.gluings) != len(self.boundaries) - 2:
            raise UnsupportedForm("need one gluing per interior seam")
        self.wrap = wrap
        self.dim = wrap.dim
        for g in self.gluings:
            if g.dim != self.dim:
                raise DimensionMismatch("gluing dimension mismatch")
        self.name = name
        self._inverse_gluings = None
        self._inverse_wrap = None

    @property
    def n_segments(self) -> int:
        return len(self.boundaries) - 1

    @property
    def circumference(self) -> float:
        return float(self.boundaries[-1] - self.boundaries[0])

    def seg_of(self, t: float, side: int = +1) -> int:
        """Segment whose chart contains parameter t.

        side=+1 uses half-open segments [a, b); side=-1 uses (a, b], so a
        point exactly on a seam belongs to the lower segment.
        """
        if side >= 0:
            j = int(np.searchsorted(self.boundaries, t, side="right")) - 1
        else:
            j = int(np.searchsorted(self.boundaries, t, side="left")) - 1
        return min(max(j, 0), self.n_segments - 1)

    def _inv_gluing(self, i: int) -> TorusMapHandle:
        if self._inverse_gluings is None:
            self._inverse_gluings = [None] * len(self.gluings)
        if self._inverse_gluings[i] is None:
            self._inverse_gluings[i] = invert(self.gluings[i])
        return self._inverse_gluings[i]

    def _inv_wrap(self) -> TorusMapHandle:
        if self._inverse_wrap is None:
            self._inverse_wrap = invert(self.wrap)
        return self._inverse_wrap

    def normalize_raw(self, seg: int, t: float, x: np.ndarray, tangents=()):
        """Move a chart representative to canonical form.

        x may be a batch (..., n) sharing the scalar (seg, t); tangents is a
        sequence of arrays whose leading fiber axes match x with trailing
        shape (n,) or (n, m); each is transported through every crossing by
        the gluing Jacobian.  Returns (seg, t, x, tangents).
        """
        x = np.asarray(x, dtype=float)
        tangents = [np.asarray(v, dtype=float) for v in tangents]
        if not 0 <= seg < self.n_segments:
            raise UnsupportedForm(f"segment {seg} out of range")
        guard = 0
        while True:
            guard += 1
            if guard > 10000:  # pragma: no cover
                raise UnsupportedForm("normalization did not terminate")
            left = self.boundaries[seg]
            right = self.boundaries[seg + 1]
            if t >= right:
                if seg == self.n_segments - 1:
                    handle = self.wrap
                    t = t - self.circumference
                    new_seg = 0
                else:
                    handle = self.gluings[seg]
                    new_seg = seg + 1
                x, tangents = self._push(handle, x, tangents)
                seg = new_seg
            elif t < left:
                if seg == 0:
                    handle = self._inv_wrap()
                    t = t + self.circumference
                    new_seg = self.n_segments - 1
                else:
                    handle = self._inv_gluing(seg - 1)
                    new_seg = seg - 1
                x, tangents = self._push(handle, x, tangents)
                seg = new_seg
            else:
                return seg, t, x, tangents

    @staticmethod
    def _push(handle: TorusMapHandle, x, tangents):
        if tangents:
            jac = handle.jacobian(x)
            moved = []
            for v in tangents:
                if v.shape[-1] == jac.shape[-1] and v.ndim == x.ndim:
                    moved.append(np.einsum("...ij,...j->...i", jac, v))
                else:
                    moved.append(jac @ v)
            tangents = moved
        return handle.apply(x), tangents

    def normalize(self, p: MTPoint) -> MTPoint:
        seg, t, x, _ = self.normalize_raw(p.seg, p.t, p.x)
        return MTPoint(seg, t, torus_representative(x))

    def seams(self):
        """Interior seams as (boundary parameter, gluing handle) pairs."""
        return [(float(self.boundaries[i + 1]), self.gluings[i])
                for i in range(len(self.gluings))]

    def distance(self, p: MTPoint, q: MTPoint) -> float:
        """Distance between nearby points, modulo the identifications.

        Compares in a common chart: directly when the segments agree, and
        through a single seam or wrap crossing when they are adjacent.
        Distant points in non-adjacent segments return inf.
        """
        p = self.normalize(p)
        q = self.normalize(q)
        candidates = []
        if p.seg == q.seg:
            candidates.append(_chart_gap(p.t - q.t, p.x - q.x))
        for a, b in ((p, q), (q, p)):
            nxt = (a.seg + 1) % self.n_segments
            if nxt != b.seg:
                continue
            if a.seg == self.n_segments - 1:
                handle = self.wrap
                t_gap = (self.circumference - a.t) + (b.t - self.boundaries[0])
            else:
                handle = self.gluings[a.seg]
                t_gap = (self.boundaries[a.seg + 1] - a.t) + (b.t - self.boundaries[b.seg])
            candidates.append(_chart_gap(t_gap, handle.apply(a.x) - b.x))
        return min(candidates) if candidates else float("inf")


def _chart_gap(dt: float, dx: np.ndarray) -> float:
    dx = dx - np.round(dx)
    return float(np.sqrt(dt * dt + float(np.sum(dx * dx))))


def mapping_torus(h: TorusMapHandle, circumference: float = 1.0,
                  name: str = "") -> MultiMappingTorus:
    """Single segment [0, circumference] with wrap map h."""
    return MultiMappingTorus([0.0, circumference], [], h, name=name)


class MetricG:
    """Interpolated metric on the unit mapping torus of h.

    On the chart [0,1) x T^n the Gram matrix is block diagonal: 1 on the
    base direction and (1-t) I + t Dh(x)^T Dh(x) on the fiber, which makes
    the wrap identification an isometry.
    """

    def __init__(self, h: TorusMapHandle):
        self.h = h
        self.dim = h.dim

    def fiber_gram(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not 0.0 <= t <= 1.0:
            raise UnsupportedForm(f"metric chart needs t in [0,1], got {t}")
        jac = self.h.jacobian(x)
        pulled = np.einsum("...ki,...kj->...ij", jac, jac)
        eye = np.eye(self.dim)
        return (1.0 - t) * eye + t * pulled

    def gram(self, p: MTPoint) -> np.ndarray:
        m = self.fiber_gram(p.t, p.x)
        full = np.zeros(m.shape[:-2] + (self.dim + 1, self.dim + 1))
        full[..., 0, 0] = 1.0
        full[..., 1:, 1:] = m
        return full

    def norm(self, p: MTPoint, v: Tangent) -> float:
        m = self.fiber_gram(p.t, p.x)
        return float(np.sqrt(v.a * v.a + v.u @ m @ v.u))

    def vertical_norm(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Batched fiber norm sqrt(u^T M_t(x) u)."""
        m = self.fiber_gram(t, x)
        return np.sqrt(np.einsum("...i,...ij,...j->...", u, m, u))


def check_seams(covering, n_samples: int = 100, rng=None, dedupe_tol: float = 1e-12):
    """Max discrepancy of a chart map across every source seam.

    For each breakpoint of the map (including source seams and the wrap),
    evaluates the two one-sided representatives of the same source point
    and measures the distance of the images in the target space.
    """
    space = covering.source
    target = covering.target
    if rng is None:
        rng = np.random.default_rng(0)
    breaks = sorted(set(float(b) for b in covering.breakpoints()))
    points = []
    for t_b in breaks:
        if t_b <= dedupe_tol or t_b >= space.circumference - dedupe_tol:
            continue
        points.append(("interior", t_b))
    points.append(("wrap", space.circumference))
    seam_params = {round(b, 12): g for b, g in space.seams()}
    worst = 0.0
    for kind, t_b in points:
        y = rng.random((n_samples, space.dim))
        if kind == "wrap":
            left = (t_b, y, -1)
            right = (0.0, space.wrap.apply(y), +1)
        else:
            g = seam_params.get(round(t_b, 12))
            if g is not None:
                left = (t_b, y, -1)
                right = (t_b, g.apply(y), +1)
            else:
                left = (t_b, y, -1)
                right = (t_b, y, +1)
        seg_l, t_l, x_l = covering.apply_raw(*left)
        seg_r, t_r, x_r = covering.apply_raw(*right)
        for i in range(n_samples):
            d = target.distance(MTPoint(seg_l, t_l, x_l[i]),
                                MTPoint(seg_r, t_r, x_r[i]))
            worst = max(worst, d)
    return worst
