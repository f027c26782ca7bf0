"""Physical feasibility: penetration, projection, settling, and reports.

Objects are unions of spheres, so the signed distance between two objects is
the minimum over sphere pairs of center distance minus summed radii.  Three
operations build on it:

- :func:`project_nonpenetration` moves free-object translations as little as
  possible until no pair interpenetrates (exterior quadratic penalty with
  gradient descent and backtracking line search, plus an exact micro-
  separation pass so the result has zero total penetration, not merely a
  small one).
- :func:`settle` drops objects vertically, in ascending height order, onto
  the ground plane (z = 0), welded objects, or already-settled objects.
- :func:`feasibility_report` flags penetrating pairs and objects that a
  settle trial moves too far or leaves without support under their center
  of mass.

``post_process`` chains projection and settling and discards objects that
still cannot be stabilised, which is the normalisation applied to sampled
scenes before any physical metric is read off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scenediff.scene import ObjectSlot, Scene

PEN_TOL = 1e-4  # projection feasibility tolerance (meters)
GAP_TOL = 1e-3  # resting contact gap (meters)
STABLE_TRANS_TOL = 1e-3  # settle displacement threshold (meters)
STABLE_ROT_TOL_DEG = 1.0  # settle rotation threshold (degrees)
COM_MARGIN = 5e-3  # support polygon inflation (meters)
STANDOFF = 1e-9  # strictly positive clearance left by settling
_LIFT_CAP = 0.01  # max upward correction when resolving residual overlap


class ProjectionError(RuntimeError):
    """Projection could not reach a feasible configuration.

    Carries the best iterate found as ``best_scene``.
    """

    def __init__(self, message: str, best_scene: Scene):
        super().__init__(message)
        self.best_scene = best_scene


def _world_spheres(slot: ObjectSlot, library) -> tuple[np.ndarray, np.ndarray]:
    asset = library.asset_for(slot.category)
    r = slot.rotation.as_matrix()
    centers = slot.translation[None, :] + asset.centers @ r.T
    return centers, asset.radii.copy()


def world_com(slot: ObjectSlot, library) -> np.ndarray:
    """World-frame volume-weighted centroid of the object's spheres."""
    asset = library.asset_for(slot.category)
    return slot.translation + slot.rotation.as_matrix() @ asset.local_com()


def signed_distance(scene: Scene, i: int, j: int) -> float:
    """Min over sphere pairs of center distance minus summed radii."""
    if i == j:
        raise ValueError("signed_distance requires two distinct slots")
    a, b = scene.slots[i], scene.slots[j]
    if a.is_empty or b.is_empty:
        raise ValueError("signed_distance requires non-empty slots")
    ca, ra = _world_spheres(a, scene.library)
    cb, rb = _world_spheres(b, scene.library)
    d = np.linalg.norm(ca[:, None, :] - cb[None, :, :], axis=2) - (ra[:, None] + rb[None, :])
    return float(d.min())


def pairwise_distances(scene: Scene) -> dict[tuple[int, int], float]:
    """Signed distances for every unordered pair of non-empty slots."""
    occ = [i for i, s in enumerate(scene.slots) if not s.is_empty]
    out = {}
    for a in range(len(occ)):
        for b in range(a + 1, len(occ)):
            i, j = occ[a], occ[b]
            out[(i, j)] = signed_distance(scene, i, j)
    return out


def total_penetration(scene: Scene) -> float:
    """Sum of penetration depths over all object pairs (0 when feasible)."""
    dists = pairwise_distances(scene)
    return float(sum(max(0.0, -d) for d in dists.values()))


# --------------------------------------------------------------------------
# Non-penetration projection
# --------------------------------------------------------------------------


@dataclass
class _PairTable:
    """Flattened inter-object sphere pairs for the penalty objective."""

    off_a: np.ndarray  # (P, 3) rotated local centers, sphere side a
    off_b: np.ndarray
    own_a: np.ndarray  # (P,) object index into the slot list
    own_b: np.ndarray
    rsum: np.ndarray  # (P,) radius sums


def _build_pairs(scene: Scene, movable: np.ndarray) -> _PairTable:
    lib = scene.library
    offs, radii = {}, {}
    occ = [i for i, s in enumerate(scene.slots) if not s.is_empty]
    for i in occ:
        s = scene.slots[i]
        asset = lib.asset_for(s.category)
        offs[i] = asset.centers @ s.rotation.as_matrix().T
        radii[i] = asset.radii
    oa, ob, wa, wb, rs = [], [], [], [], []
    for a in range(len(occ)):
        for b in range(a + 1, len(occ)):
            i, j = occ[a], occ[b]
            if not (movable[i] or movable[j]):
                continue  # both fixed: nothing the projection can change
            for p in range(offs[i].shape[0]):
                for q in range(offs[j].shape[0]):
                    oa.append(offs[i][p])
                    ob.append(offs[j][q])
                    wa.append(i)
                    wb.append(j)
                    rs.append(radii[i][p] + radii[j][q])
    if not oa:
        return _PairTable(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    return _PairTable(np.array(oa), np.array(ob), np.array(wa, int), np.array(wb, int), np.array(rs))


def _penalty_terms(t_all: np.ndarray, pairs: _PairTable):
    """Per-pair penetration depth, its value sum of squares, and gradient."""
    ca = pairs.off_a + t_all[pairs.own_a]
    cb = pairs.off_b + t_all[pairs.own_b]
    dvec = ca - cb
    dist = np.linalg.norm(dvec, axis=1)
    safe = np.maximum(dist, 1e-12)
    depth = np.maximum(0.0, pairs.rsum - dist)
    value = float(np.sum(depth**2))
    coef = -2.0 * depth / safe  # d(depth^2)/d(dist) * d(dist)/d(ca)
    grad_pairs = coef[:, None] * dvec
    grad = np.zeros_like(t_all)
    np.add.at(grad, pairs.own_a, grad_pairs)
    np.add.at(grad, pairs.own_b, -grad_pairs)
    return depth, value, grad


def project_nonpenetration(
    scene: Scene,
    tol: float = PEN_TOL,
    max_rounds: int = 10,
    steps_per_round: int = 500,
    mu0: float = 100.0,
    stationarity_tol: float = 1e-6,
) -> Scene:
    """Minimal-translation projection onto the non-penetrating set.

    Minimises the squared displacement of free-object translations subject to
    nonnegative pairwise signed distances, via an exterior quadratic penalty
    with an increasing weight schedule.  Welded and empty slots never move;
    rotations never change.  An already feasible scene is returned unchanged.

    Raises :class:`ProjectionError` (carrying the best iterate) when the
    iteration budget is exhausted while penetration above ``tol`` remains —
    including the unfixable case of two welded objects overlapping.
    """
    movable = np.array([(not s.is_empty) and (not s.welded) for s in scene.slots])
    # Unfixable overlap between fixed objects: fail fast.
    for (i, j), d in pairwise_distances(scene).items():
        if d < -tol and not (movable[i] or movable[j]):
            raise ProjectionError(f"welded objects {i} and {j} interpenetrate by {-d:.2g} m", scene)

    pairs = _build_pairs(scene, movable)
    t0 = np.array([s.translation for s in scene.slots], dtype=np.float64)
    t = t0.copy()
    if pairs.rsum.shape[0] == 0:
        return scene

    depth, _, _ = _penalty_terms(t, pairs)
    if float(depth.max(initial=0.0)) <= 0.0:
        return scene  # feasible: identity

    free_rows = np.nonzero(movable)[0]
    mu = mu0
    alpha = 1e-3
    for _ in range(max_rounds):
        for _ in range(steps_per_round):
            depth, pen_val, pen_grad = _penalty_terms(t, pairs)
            disp = t[free_rows] - t0[free_rows]
            f = float(np.sum(disp**2)) + mu * pen_val
            grad = mu * pen_grad
            grad[free_rows] += 2.0 * disp
            grad[~movable] = 0.0
            gmax = float(np.abs(grad).max(initial=0.0))
            if gmax < stationarity_tol:
                break
            # Backtracking (Armijo) line search along the negative gradient.
            gsq = float(np.sum(grad**2))
            alpha = min(alpha * 2.0, 1.0)
            while alpha > 1e-18:
                t_new = t.copy()
                t_new[free_rows] = t[free_rows] - alpha * grad[free_rows]
                d_new = t_new[free_rows] - t0[free_rows]
                _, pv_new, _ = _penalty_terms(t_new, pairs)
                f_new = float(np.sum(d_new**2)) + mu * pv_new
                if f_new <= f - 1e-4 * alpha * gsq:
                    break
                alpha *= 0.5
            else:
                break  # numerically stationary
            t = t_new
        depth, _, _ = _penalty_terms(t, pairs)
        if float(depth.sum()) <= tol:
            result = _with_translations(scene, t)
            return _micro_separate(result, movable)
        mu *= 10.0

    best = _with_translations(scene, t)
    raise ProjectionError(f"projection failed: residual penetration {float(depth.sum()):.3g} m", best)


def _with_translations(scene: Scene, t: np.ndarray) -> Scene:
    slots = []
    for i, s in enumerate(scene.slots):
        if s.is_empty or np.array_equal(s.translation, t[i]):
            slots.append(s)
        else:
            slots.append(ObjectSlot(category=s.category, translation=t[i], rotation=s.rotation, welded=s.welded))
    return Scene(capacity=scene.capacity, library=scene.library, slots=tuple(slots))


def _micro_separate(scene: Scene, movable: np.ndarray, max_rounds: int = 200) -> Scene:
    """Push residually touching pairs apart so every gap is strictly >= 0.

    The exterior penalty leaves sub-``tol`` overlaps; this resolves them
    exactly by nanometre-scale translations along the deepest sphere-pair
    axis, split between the movable members of the pair.
    """
    s = scene
    for _ in range(max_rounds):
        worst = None
        for (i, j), d in pairwise_distances(s).items():
            if d < 0 and (worst is None or d < worst[2]):
                worst = (i, j, d)
        if worst is None:
            return s
        i, j, d = worst
        a, b = s.slots[i], s.slots[j]
        ca, ra = _world_spheres(a, s.library)
        cb, rb = _world_spheres(b, s.library)
        dmat = np.linalg.norm(ca[:, None, :] - cb[None, :, :], axis=2) - (ra[:, None] + rb[None, :])
        p, q = np.unravel_index(np.argmin(dmat), dmat.shape)
        axis = ca[p] - cb[q]
        n = np.linalg.norm(axis)
        axis = axis / n if n > 1e-12 else np.array([0.0, 0.0, 1.0])
        push = (-d) + STANDOFF
        if movable[i] and movable[j]:
            s = s.replace_slot(i, ObjectSlot(a.category, a.translation + 0.5 * push * axis, a.rotation, a.welded))
            b = s.slots[j]
            s = s.replace_slot(j, ObjectSlot(b.category, b.translation - 0.5 * push * axis, b.rotation, b.welded))
        elif movable[i]:
            s = s.replace_slot(i, ObjectSlot(a.category, a.translation + push * axis, a.rotation, a.welded))
        elif movable[j]:
            s = s.replace_slot(j, ObjectSlot(b.category, b.translation - push * axis, b.rotation, b.welded))
        else:  # pragma: no cover - ruled out by the upfront welded check
            return s
    return s


# --------------------------------------------------------------------------
# Quasi-static settling
# --------------------------------------------------------------------------


def _cross2(u: np.ndarray, v: np.ndarray) -> float:
    return float(u[0] * v[1] - u[1] * v[0])


def _convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; handles 1- and 2-point degenerate inputs."""
    pts = np.unique(np.round(points, 12), axis=0)
    if pts.shape[0] <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross2(out[-1] - out[-2], p - out[-2]) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _dist_to_hull(point: np.ndarray, hull: np.ndarray) -> float:
    """Distance from a 2D point to a convex polygon (0 inside)."""
    if hull.shape[0] == 1:
        return float(np.linalg.norm(point - hull[0]))
    if hull.shape[0] == 2:
        a, b = hull
        ab = b - a
        tt = np.clip(np.dot(point - a, ab) / max(np.dot(ab, ab), 1e-18), 0.0, 1.0)
        return float(np.linalg.norm(point - (a + tt * ab)))
    inside = True
    best = np.inf
    m = hull.shape[0]
    for k in range(m):
        a, b = hull[k], hull[(k + 1) % m]
        ab = b - a
        if _cross2(ab, point - a) < 0:
            inside = False
        tt = np.clip(np.dot(point - a, ab) / max(np.dot(ab, ab), 1e-18), 0.0, 1.0)
        best = min(best, float(np.linalg.norm(point - (a + tt * ab))))
    return 0.0 if inside else best


def drop_delta(centers: np.ndarray, radii: np.ndarray, sup_centers: np.ndarray, sup_radii: np.ndarray) -> float:
    """Vertical travel until the sphere set first contacts ground or supports.

    Positive = drop, small negative = lift out of a residual overlap (capped;
    supports far above the object are never treated as resting candidates).
    A strictly positive standoff is built in so the rest pose never touches.
    """
    delta = float(np.min(centers[:, 2] - radii - STANDOFF))
    if sup_centers.shape[0]:
        for a in range(centers.shape[0]):
            dxy = np.linalg.norm(sup_centers[:, :2] - centers[a, :2][None], axis=1)
            rs = sup_radii + radii[a] + STANDOFF
            hit = dxy < rs
            if not hit.any():
                continue
            dz = centers[a, 2] - sup_centers[hit, 2]
            cand = dz - np.sqrt(rs[hit] ** 2 - dxy[hit] ** 2)
            cand = cand[cand >= -_LIFT_CAP]
            if cand.size:
                delta = min(delta, float(cand.min()))
    return delta


@dataclass(frozen=True)
class SettleDetail:
    scene: Scene
    displacement: np.ndarray  # (N,) vertical travel magnitude per slot
    supported: np.ndarray  # (N,) bool: COM over the inflated contact region


def _settle_detail(scene: Scene) -> SettleDetail:
    lib = scene.library
    n = scene.capacity
    displacement = np.zeros(n)
    supported = np.ones(n, dtype=bool)

    # Supports accumulate: welded objects first, then settled ones.
    sup_centers = [np.zeros((0, 3))]
    sup_radii = [np.zeros(0)]
    for s in scene.slots:
        if not s.is_empty and s.welded:
            c, r = _world_spheres(s, lib)
            sup_centers.append(c)
            sup_radii.append(r)

    free = [i for i, s in enumerate(scene.slots) if (not s.is_empty) and (not s.welded)]
    bottoms = {}
    for i in free:
        c, r = _world_spheres(scene.slots[i], lib)
        bottoms[i] = float(np.min(c[:, 2] - r))
    order = sorted(free, key=lambda i: (bottoms[i], i))

    out = scene
    for i in order:
        slot = out.slots[i]
        c, r = _world_spheres(slot, lib)
        sc = np.concatenate(sup_centers)
        sr = np.concatenate(sup_radii)
        delta = drop_delta(c, r, sc, sr)

        new_t = slot.translation - np.array([0.0, 0.0, delta])
        slot = ObjectSlot(slot.category, new_t, slot.rotation, slot.welded)
        out = out.replace_slot(i, slot)
        displacement[i] = abs(delta)

        # Contacts at the rest position define the support region.
        c, r = _world_spheres(slot, lib)
        contacts = []
        for a in range(c.shape[0]):
            if c[a, 2] - r[a] <= GAP_TOL + STANDOFF:
                contacts.append(c[a, :2])
        if sc.shape[0]:
            for a in range(c.shape[0]):
                dvec = c[a][None, :] - sc
                dist = np.linalg.norm(dvec, axis=1)
                gap = dist - (sr + r[a])
                for b in np.nonzero(gap <= GAP_TOL + STANDOFF)[0]:
                    p = c[a] + (sc[b] - c[a]) * (r[a] / max(dist[b], 1e-12))
                    contacts.append(p[:2])
        com = world_com(slot, lib)
        if contacts:
            hull = _convex_hull_2d(np.array(contacts))
            supported[i] = _dist_to_hull(com[:2], hull) <= COM_MARGIN
        else:  # pragma: no cover - a dropped object always has a contact
            supported[i] = False

        sup_centers.append(c)
        sup_radii.append(r)

    return SettleDetail(scene=out, displacement=displacement, supported=supported)


def settle(scene: Scene) -> Scene:
    """Drop free objects onto their supports (vertical translations only).

    Objects are processed in ascending height order; each rests on the ground
    plane, a welded object, or an already-settled object, with a strictly
    positive sub-micron clearance.  Instability is reported by
    :func:`feasibility_report`, never raised.
    """
    return _settle_detail(scene).scene


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FeasibilityReport:
    """Per-object feasibility flags and the pairwise penetration depths."""

    capacity: int
    penetration: dict  # {(i, j): depth > 0}
    penetrating: np.ndarray  # (N,) bool
    unstable: np.ndarray  # (N,) bool
    settle_displacement: np.ndarray  # (N,) float

    def flagged(self) -> np.ndarray:
        return self.penetrating | self.unstable

    def feasible_count(self, scene: Scene) -> int:
        """Number of non-empty objects with no flags."""
        bad = self.flagged()
        return sum(1 for i, s in enumerate(scene.slots) if not s.is_empty and not bad[i])


def feasibility_report(scene: Scene) -> FeasibilityReport:
    """Flag penetrating pairs and objects that fail a settle trial.

    Penetration: pairs deeper than ``PEN_TOL`` flag both members.  Stability:
    a trial settle — excluding penetrating objects — must move each object
    less than ``STABLE_TRANS_TOL`` (rotations never change here, so the
    1-degree rotation threshold is trivially met) and leave its center of
    mass over the inflated contact region.  Welded and empty slots are never
    flagged.
    """
    n = scene.capacity
    penetration = {}
    penetrating = np.zeros(n, dtype=bool)
    for (i, j), d in pairwise_distances(scene).items():
        if d < -PEN_TOL:
            penetration[(i, j)] = -d
            if not scene.slots[i].welded:
                penetrating[i] = True
            if not scene.slots[j].welded:
                penetrating[j] = True

    trial_slots = tuple(
        ObjectSlot.empty() if penetrating[i] else s for i, s in enumerate(scene.slots)
    )
    trial = Scene(capacity=n, library=scene.library, slots=trial_slots)
    detail = _settle_detail(trial)

    unstable = np.zeros(n, dtype=bool)
    for i, s in enumerate(scene.slots):
        if s.is_empty or s.welded or penetrating[i]:
            continue
        if detail.displacement[i] > STABLE_TRANS_TOL or not detail.supported[i]:
            unstable[i] = True

    return FeasibilityReport(
        capacity=n,
        penetration=penetration,
        penetrating=penetrating,
        unstable=unstable,
        settle_displacement=detail.displacement,
    )


@dataclass(frozen=True)
class PostProcessResult:
    scene: Scene
    report: FeasibilityReport
    dropped: tuple[int, ...]


def post_process(scene: Scene, max_rounds: int | None = None) -> PostProcessResult:
    """Project, settle, and discard objects that still cannot be stabilised.

    The result has exactly zero total penetration and a report with no
    flagged objects; ``dropped`` lists the slots that had to be emptied.
    """
    s = scene
    if total_penetration(s) > 0:
        s = project_nonpenetration(s)
    dropped: list[int] = []
    rounds = max_rounds if max_rounds is not None else scene.capacity + 1
    for _ in range(rounds):
        s = settle(s)
        report = feasibility_report(s)
        bad = np.nonzero(report.flagged())[0]
        if bad.size == 0:
            return PostProcessResult(scene=s, report=report, dropped=tuple(dropped))
        for i in bad:
            s = s.replace_slot(int(i), ObjectSlot.empty())
            dropped.append(int(i))
    report = feasibility_report(s)  # pragma: no cover - loop always terminates
    return PostProcessResult(scene=s, report=report, dropped=tuple(dropped))
