"""Landmark-based face morphing: Delaunay meshes, piecewise-affine warps, blending.

Images are float arrays shaped (3, H, W) with values in [0, 1]. Landmarks are
(N, 2) arrays of (x, y) pixel coordinates, where x runs along columns and the
frame spans [0, W] x [0, H]; pixel (row i, col j) is sampled at (x=j, y=i).
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay, QhullError


class ContractError(ValueError):
    """Raised when inputs violate an operation's preconditions."""


class DegenerateGeometryError(ContractError):
    """Raised when points cannot be triangulated (e.g. all collinear)."""


def check_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"{name} must have shape (3, H, W), got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ContractError(f"{name} contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ContractError(f"{name} values must lie in [0, 1]")
    return image


def as_landmarks(points, name: str = "landmarks") -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ContractError(f"{name} must have shape (N, 2), got {pts.shape}")
    if len(pts) < 3:
        raise ContractError(f"{name} needs at least 3 points, got {len(pts)}")
    if not np.all(np.isfinite(pts)):
        raise ContractError(f"{name} contains non-finite coordinates")
    return pts


def augment_boundary_points(landmarks, width: float, height: float) -> np.ndarray:
    """Append the frame's corners and edge midpoints to ``landmarks``.

    The 8 extra points follow the input in this order: corners (0, 0),
    (W, 0), (0, H), (W, H), then midpoints (W/2, 0), (0, H/2), (W, H/2),
    (W/2, H).
    """
    pts = as_landmarks(landmarks)
    w, h = float(width), float(height)
    if np.any(pts < 0) or np.any(pts[:, 0] > w) or np.any(pts[:, 1] > h):
        raise ContractError("landmarks must lie within the frame")
    extra = np.array([
        [0.0, 0.0], [w, 0.0], [0.0, h], [w, h],
        [w / 2, 0.0], [0.0, h / 2], [w, h / 2], [w / 2, h],
    ])
    return np.vstack([pts, extra])


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def incircle(a, b, c, d) -> float:
    """Positive when ``d`` is strictly inside the circumcircle of ccw (a, b, c)."""
    rows = []
    for p in (a, b, c):
        dx, dy = p[0] - d[0], p[1] - d[1]
        rows.append([dx, dy, dx * dx + dy * dy])
    return float(np.linalg.det(np.array(rows)))


def _ccw(tri, pts):
    a, b, c = tri
    if _orient(pts[a], pts[b], pts[c]) < 0:
        return (a, c, b)
    return (a, b, c)


def _canonical(tri):
    # rotate so the smallest index leads while keeping orientation
    k = tri.index(min(tri))
    return tri[k:] + tri[:k]


def delaunay_triangulate(points) -> np.ndarray:
    """Delaunay triangulation with a reproducible tie-break for cocircular points.

    Where four points of two adjacent triangles are cocircular, the shared
    diagonal is the one incident to the lowest-index vertex of the quad, so
    cocircular groups become fans from their lowest-index point.

    Returns an int array of shape (K, 3); each row is counter-clockwise in
    (x, y) and starts at its smallest index, and rows are sorted.
    """
    pts = as_landmarks(points, "points")
    try:
        simplices = Delaunay(pts).simplices
    except QhullError as exc:
        raise DegenerateGeometryError("cannot triangulate degenerate point set") from exc

    scale = float(np.ptp(pts, axis=0).max()) or 1.0
    tol = 1e-10 * scale ** 4
    tris = {_canonical(_ccw(tuple(int(v) for v in s), pts)) for s in simplices}

    # each flip lowers the sorted multiset of edge minima, so this terminates
    changed = True
    while changed:
        changed = False
        edges: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
        for t in tris:
            for i in range(3):
                e = tuple(sorted((t[i], t[(i + 1) % 3])))
                edges.setdefault(e, []).append(t)
        for (a, c), owners in edges.items():
            if len(owners) != 2:
                continue
            t1, t2 = owners
            b = next(v for v in t1 if v not in (a, c))
            d = next(v for v in t2 if v not in (a, c))
            quad_min = min(a, b, c, d)
            if quad_min in (a, c):
                continue
            if abs(incircle(*(pts[v] for v in t1), pts[d])) > tol:
                continue
            new1 = _ccw((b, d, a), pts)
            new2 = _ccw((b, d, c), pts)
            if (abs(_orient(*(pts[v] for v in new1))) <= tol
                    or abs(_orient(*(pts[v] for v in new2))) <= tol):
                continue
            tris -= {t1, t2}
            tris |= {_canonical(new1), _canonical(new2)}
            changed = True
            break
    return np.array(sorted(tris), dtype=np.int64).reshape(-1, 3)


def _affine_maps(dst_tris: np.ndarray, src_tris: np.ndarray) -> np.ndarray:
    # (K, 2, 3) matrices M with M @ [x, y, 1] mapping each dst triangle onto its src triangle
    dst_h = np.concatenate([dst_tris, np.ones(dst_tris.shape[:2] + (1,))], axis=2)
    return np.transpose(np.linalg.solve(dst_h, src_tris), (0, 2, 1))


def warp_piecewise_affine(image, src, dst, mesh) -> np.ndarray:
    """Warp ``image`` so that landmarks ``src`` move to ``dst``.

    Each mesh triangle over ``dst`` pulls pixels from the matching ``src``
    triangle through its affine map; a pixel on a shared edge belongs to the
    first triangle listed. Pixels outside every triangle are copied from the
    source. Sampling is bilinear with edge clamping.
    """
    image = check_image(image)
    src = as_landmarks(src, "src")
    dst = as_landmarks(dst, "dst")
    if src.shape != dst.shape:
        raise ContractError(f"landmark counts differ: {len(src)} vs {len(dst)}")
    mesh = np.asarray(mesh, dtype=np.int64).reshape(-1, 3)
    if mesh.size and (mesh.min() < 0 or mesh.max() >= len(src)):
        raise ContractError("mesh indexes outside the landmark set")

    _, h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = xs.ravel(), ys.ravel()
    map_x, map_y = px.copy(), py.copy()

    d = dst[mesh]
    area = ((d[:, 1, 0] - d[:, 0, 0]) * (d[:, 2, 1] - d[:, 0, 1])
            - (d[:, 1, 1] - d[:, 0, 1]) * (d[:, 2, 0] - d[:, 0, 0]))
    keep = np.abs(area) >= 1e-12
    mesh, d, area = mesh[keep], d[keep], area[keep]
    if len(mesh):
        maps = _affine_maps(d, src[mesh])
        owner = np.full(h * w, -1, dtype=np.int64)
        eps = 1e-9
        chunk = max(1, 1_000_000 // (h * w))
        for k0 in range(0, len(mesh), chunk):
            dk = d[k0:k0 + chunk, :, :, None]
            ak = area[k0:k0 + chunk, None]
            l0 = ((dk[:, 1, 0] - px) * (dk[:, 2, 1] - py) - (dk[:, 1, 1] - py) * (dk[:, 2, 0] - px)) / ak
            l1 = ((dk[:, 2, 0] - px) * (dk[:, 0, 1] - py) - (dk[:, 2, 1] - py) * (dk[:, 0, 0] - px)) / ak
            inside = (l0 >= -eps) & (l1 >= -eps) & (1.0 - l0 - l1 >= -eps)
            hit = inside.any(axis=0) & (owner < 0)
            owner[hit] = k0 + np.argmax(inside[:, hit], axis=0)
        done = owner >= 0
        m = maps[owner[done]]
        qx, qy = px[done], py[done]
        map_x[done] = m[:, 0, 0] * qx + m[:, 0, 1] * qy + m[:, 0, 2]
        map_y[done] = m[:, 1, 0] * qx + m[:, 1, 1] * qy + m[:, 1, 2]

    coords = np.stack([map_y.reshape(h, w), map_x.reshape(h, w)])
    out = np.stack([
        ndimage.map_coordinates(ch.astype(np.float64), coords, order=1, mode="nearest")
        for ch in image
    ])
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def morph_pair(img_a, lms_a, img_b, lms_b, alpha: float = 0.5) -> np.ndarray:
    """Blend two faces: warp both onto interpolated landmarks and cross-dissolve.

    ``alpha`` weights image B; the blended landmark set is
    ``(1 - alpha) * lms_a + alpha * lms_b`` with frame boundary points added.
    """
    img_a = check_image(img_a, "img_a")
    img_b = check_image(img_b, "img_b")
    if img_a.shape != img_b.shape:
        raise ContractError(f"image shapes differ: {img_a.shape} vs {img_b.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    lms_a = as_landmarks(lms_a, "lms_a")
    lms_b = as_landmarks(lms_b, "lms_b")
    if lms_a.shape != lms_b.shape:
        raise ContractError("landmark sets do not correspond index-wise")

    _, h, w = img_a.shape
    src_a = augment_boundary_points(lms_a, w, h)
    src_b = augment_boundary_points(lms_b, w, h)
    target = (1.0 - alpha) * src_a + alpha * src_b
    mesh = delaunay_triangulate(target)
    warped_a = warp_piecewise_affine(img_a, src_a, target, mesh)
    warped_b = warp_piecewise_affine(img_b, src_b, target, mesh)
    out = (1.0 - alpha) * warped_a + alpha * warped_b
    return np.clip(out, 0.0, 1.0).astype(img_a.dtype, copy=False)
