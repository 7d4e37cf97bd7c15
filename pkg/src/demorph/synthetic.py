"""Procedural face-like images with built-in landmarks.

Lets the whole pipeline run without external face datasets or landmark
models. Every identity is a parameter draw; rendering is deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_LANDMARKS = 31


@dataclass(frozen=True)
class FaceParams:
    background: tuple[float, float, float]
    bg_tilt: tuple[float, float]
    skin: tuple[float, float, float]
    hair: tuple[float, float, float]
    iris: tuple[float, float, float]
    lips: tuple[float, float, float]
    center: tuple[float, float]
    axes: tuple[float, float]
    hair_line: float
    eye_y: float
    eye_gap: float
    eye_size: float
    brow_lift: float
    nose_len: float
    mouth_y: float
    mouth_w: float


def random_params(rng: np.random.Generator) -> FaceParams:
    def colour(lo, hi):
        return tuple(float(v) for v in rng.uniform(lo, hi, size=3))

    def toned(base, lo, hi):
        k = rng.uniform(lo, hi)
        return tuple(float(np.clip(b * k + rng.uniform(-0.05, 0.05), 0, 1)) for b in base)

    return FaceParams(
        background=colour(0.05, 0.95),
        bg_tilt=tuple(float(v) for v in rng.uniform(-0.35, 0.35, size=2)),
        skin=toned((0.95, 0.76, 0.62), 0.45, 1.05),
        hair=toned((0.55, 0.4, 0.25), 0.1, 1.6),
        iris=colour(0.0, 0.6),
        lips=colour(0.3, 0.9),
        center=(float(rng.uniform(0.44, 0.56)), float(rng.uniform(0.5, 0.6))),
        axes=(float(rng.uniform(0.24, 0.34)), float(rng.uniform(0.3, 0.4))),
        hair_line=float(rng.uniform(-0.75, -0.3)),
        eye_y=float(rng.uniform(-0.3, -0.1)),
        eye_gap=float(rng.uniform(0.3, 0.5)),
        eye_size=float(rng.uniform(0.1, 0.18)),
        brow_lift=float(rng.uniform(0.1, 0.2)),
        nose_len=float(rng.uniform(0.15, 0.3)),
        mouth_y=float(rng.uniform(0.35, 0.55)),
        mouth_w=float(rng.uniform(0.25, 0.5)),
    )


def face_landmarks(p: FaceParams, resolution: int) -> np.ndarray:
    """The 31 landmark points for ``p``: 12 contour, 8 eye, 4 brow, 3 nose, 4 mouth."""
    r = float(resolution)
    cx, cy = p.center[0] * r, p.center[1] * r
    ax, ay = p.axes[0] * r, p.axes[1] * r

    def face_pt(u, v):
        # u, v in units of the face half-axes
        return [cx + u * ax, cy + v * ay]

    pts = []
    for ang in np.linspace(0, 2 * np.pi, 12, endpoint=False):
        pts.append(face_pt(np.cos(ang), np.sin(ang)))
    es = p.eye_size
    for side in (-1, 1):
        ex = side * p.eye_gap
        pts += [face_pt(ex - es, p.eye_y), face_pt(ex, p.eye_y - es * 0.6),
                face_pt(ex + es, p.eye_y), face_pt(ex, p.eye_y + es * 0.6)]
    for side in (-1, 1):
        ex = side * p.eye_gap
        by = p.eye_y - p.brow_lift - es * 0.6
        pts += [face_pt(ex - es * 1.2, by), face_pt(ex + es * 1.2, by)]
    tip = p.eye_y + es + p.nose_len
    pts += [face_pt(0.0, tip), face_pt(-0.1, tip - 0.03), face_pt(0.1, tip - 0.03)]
    mw = p.mouth_w / 2
    pts += [face_pt(-mw, p.mouth_y), face_pt(0.0, p.mouth_y - 0.06),
            face_pt(mw, p.mouth_y), face_pt(0.0, p.mouth_y + 0.08)]
    out = np.array(pts, dtype=np.float64)
    return np.clip(out, 0.0, r)


def _soft(inside: np.ndarray, px: float) -> np.ndarray:
    # inside: signed distance-like value, positive inside; px smooths the edge
    return np.clip(inside / px + 0.5, 0.0, 1.0)


def render_face(p: FaceParams, resolution: int) -> np.ndarray:
    """Render ``p`` as a (3, R, R) float32 image in [0, 1]."""
    r = resolution
    ys, xs = (np.mgrid[0:r, 0:r].astype(np.float64) + 0.5) / r
    img = np.empty((3, r, r))
    shade = 1.0 + p.bg_tilt[0] * (xs - 0.5) + p.bg_tilt[1] * (ys - 0.5)
    for c in range(3):
        img[c] = p.background[c] * shade

    def paint(mask, colour):
        for c in range(3):
            img[c] = img[c] * (1 - mask) + colour[c] * mask

    px = 1.5 / r
    cx, cy = p.center
    ax, ay = p.axes
    u = (xs - cx) / ax
    v = (ys - cy) / ay
    rad = np.sqrt(u ** 2 + v ** 2)

    hair_mask = _soft((1.15 - np.sqrt(u ** 2 + (v * 0.95) ** 2)) * ax, px)
    hair_mask *= _soft((p.hair_line + 0.1 - v) * ay, px) + _soft((np.abs(u) - 0.85) * ax, px)
    paint(np.clip(hair_mask, 0, 1), p.hair)
    paint(_soft((1.0 - rad) * min(ax, ay), px), p.skin)
    paint(_soft((1.0 - rad) * min(ax, ay), px) * _soft((p.hair_line - v) * ay, px), p.hair)

    es = p.eye_size
    for side in (-1, 1):
        ex = side * p.eye_gap
        er = np.sqrt(((u - ex) / es) ** 2 + ((v - p.eye_y) / (es * 0.6)) ** 2)
        paint(_soft((1.0 - er) * es * ax, px), (0.95, 0.95, 0.95))
        ir = np.sqrt(((u - ex) / (es * 0.55)) ** 2 + ((v - p.eye_y) / (es * 0.55)) ** 2)
        paint(_soft((1.0 - ir) * es * 0.55 * ax, px), p.iris)
        by = p.eye_y - p.brow_lift - es * 0.6
        brow = (np.abs(u - ex) < es * 1.2) & (np.abs(v - by) < 0.03)
        paint(brow.astype(np.float64) * 0.9, p.hair)

    tip = p.eye_y + es + p.nose_len
    nose = (np.abs(u) < 0.1 * np.clip((v - p.eye_y) / (tip - p.eye_y), 0, 1)) & (v > p.eye_y) & (v < tip)
    paint(nose.astype(np.float64) * 0.35, (0.2, 0.1, 0.1))

    mw = p.mouth_w / 2
    mr = np.sqrt((u / mw) ** 2 + ((v - p.mouth_y - 0.01) / 0.07) ** 2)
    paint(_soft((1.0 - mr) * 0.07 * ay, px), p.lips)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_pool(n_identities: int, resolution: int, seed: int):
    """``n_identities`` synthetic faces as (image, landmarks, identity) triples."""
    rng = np.random.default_rng(seed)
    pool = []
    for k in range(n_identities):
        params = random_params(rng)
        pool.append((render_face(params, resolution), face_landmarks(params, resolution), f"syn{k:05d}"))
    return pool
