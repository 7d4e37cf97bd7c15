"""Dataset construction: image I/O, face cropping, morph synthesis, splits, manifests.

A manifest is line-delimited JSON. The first line is a header object
``{"metadata": {...}, "identity_sets": {...}}``; every following line is one
:class:`MorphRecord`. Record paths are stored relative to the manifest's
directory.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import cv2
import numpy as np
from joblib import Parallel, delayed
from PIL import Image, UnidentifiedImageError

from .morph_engine import ContractError, as_landmarks, check_image, morph_pair

logger = logging.getLogger(__name__)

SPLITS = ("train", "test", "excluded")

FaceBox = tuple[float, float, float, float]  # x0, y0, x1, y1 in pixels
Detector = Callable[[np.ndarray], Optional[FaceBox]]


class ImageReadError(OSError):
    """An image file is missing or cannot be decoded."""


# ---------------------------------------------------------------- image I/O

def load_image(path) -> np.ndarray:
    """Read an image file as a (3, H, W) float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, image: np.ndarray) -> None:
    """Write a (3, H, W) [0, 1] image as 8-bit RGB PNG."""
    image = check_image(image)
    arr = np.rint(image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


# ----------------------------------------------------------- landmark files

def write_landmark_file(path, entries: Sequence[tuple[str, np.ndarray]]) -> None:
    """Write ``(image_path, points)`` entries: path line, count line, then one ``x y`` line per point."""
    lines = []
    for image_path, pts in entries:
        pts = as_landmarks(pts)
        lines.append(str(image_path))
        lines.append(str(len(pts)))
        lines.extend(f"{x:.6f} {y:.6f}" for x, y in pts)
    Path(path).write_text("\n".join(lines) + "\n")


def read_landmark_file(path) -> list[tuple[str, np.ndarray]]:
    lines = [ln.rstrip("\n") for ln in Path(path).read_text().splitlines() if ln.strip()]
    out = []
    pos = 0
    while pos < len(lines):
        image_path = lines[pos].strip()
        try:
            n = int(lines[pos + 1])
            pts = [tuple(map(float, lines[pos + 2 + k].split())) for k in range(n)]
        except (IndexError, ValueError) as exc:
            raise ContractError(f"malformed landmark record for {image_path!r}") from exc
        out.append((image_path, as_landmarks(pts)))
        pos += 2 + n
    return out


# ---------------------------------------------------------------- cropping

@dataclass
class DiscardTally:
    no_face: int = 0
    unreadable: int = 0
    reasons: dict = field(default_factory=dict)

    def discard(self, key: str, reason: str) -> None:
        if reason == "no_face":
            self.no_face += 1
        else:
            self.unreadable += 1
        self.reasons[key] = reason

    def to_dict(self) -> dict:
        return {"no_face": self.no_face, "unreadable": self.unreadable,
                "total": self.no_face + self.unreadable, "reasons": dict(sorted(self.reasons.items()))}


def _resolve_box(image: np.ndarray, face_box, detector: Optional[Detector]) -> Optional[FaceBox]:
    if face_box is not None:
        return tuple(float(v) for v in face_box)
    if detector is None:
        raise ContractError("either face_box or detector is required")
    return detector(image)


def _int_box(box: FaceBox, width: int, height: int) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = box
    return (max(int(round(x0)), 0), max(int(round(y0)), 0),
            min(int(round(x1)), width), min(int(round(y1)), height))


def crop_and_normalize(image, face_box: Optional[FaceBox] = None, resolution: int = 64,
                       detector: Optional[Detector] = None) -> Optional[np.ndarray]:
    """Crop the face region and resize it to ``resolution`` x ``resolution``.

    Returns None when the detector finds no face; callers should count that
    as a discard. Supplying ``face_box`` bypasses the detector.
    """
    image = check_image(image)
    box = _resolve_box(image, face_box, detector)
    if box is None:
        return None
    _, h, w = image.shape
    x0, y0, x1, y1 = _int_box(box, w, h)
    if x1 - x0 < 2 or y1 - y0 < 2:
        return None
    crop = image[:, y0:y1, x0:x1]
    if crop.shape[1:] == (resolution, resolution):
        return crop.astype(np.float32, copy=True)
    hwc = np.ascontiguousarray(crop.transpose(1, 2, 0), dtype=np.float32)
    shrinking = crop.shape[1] > resolution or crop.shape[2] > resolution
    interp = cv2.INTER_AREA if shrinking else cv2.INTER_LINEAR
    out = cv2.resize(hwc, (resolution, resolution), interpolation=interp)
    return np.clip(out.transpose(2, 0, 1), 0.0, 1.0).astype(np.float32)


def crop_landmarks(points, face_box: FaceBox, image_size: tuple[int, int], resolution: int) -> np.ndarray:
    """Map landmarks into the frame produced by :func:`crop_and_normalize`.

    ``image_size`` is the (width, height) of the uncropped image.
    """
    pts = as_landmarks(points)
    x0, y0, x1, y1 = _int_box(face_box, *image_size)
    scale = np.array([resolution / (x1 - x0), resolution / (y1 - y0)])
    return np.clip((pts - [x0, y0]) * scale, 0.0, float(resolution))


# ------------------------------------------------------------------ splits

def identity_disjoint_split(identities: Sequence[str], train_fraction: float = 0.6,
                            seed: int = 0) -> tuple[list[str], list[str]]:
    """Shuffle identities by ``seed``; the first floor(N * fraction) go to train."""
    identities = list(identities)
    if not identities:
        raise ContractError("identity list is empty")
    if len(set(identities)) != len(identities):
        raise ContractError("identity list contains duplicates")
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train_fraction must be in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(identities))
    shuffled = [identities[i] for i in order]
    # small epsilon keeps e.g. 10 * 0.6 == 6 despite float rounding
    n_train = int(math.floor(len(identities) * train_fraction + 1e-9))
    return shuffled[:n_train], shuffled[n_train:]


@dataclass
class MorphRecord:
    morph_path: str
    id_a: str
    id_b: str
    path_a: str
    path_b: str
    technique: str = "landmark"
    split: str = "train"

    def __post_init__(self):
        if self.id_a == self.id_b:
            raise ContractError(f"morph {self.morph_path} combines identity {self.id_a} with itself")
        if self.split not in SPLITS:
            raise ContractError(f"unknown split {self.split!r}")


def filter_morphs_by_split(records: Sequence[MorphRecord],
                           identity_sets: dict[str, Sequence[str]]) -> list[MorphRecord]:
    """Label records train/test when both identities share a side, else excluded."""
    train = set(identity_sets.get("train", ()))
    test = set(identity_sets.get("test", ()))
    if train & test:
        raise ContractError("train and test identity sets overlap")
    out = []
    for rec in records:
        sides = []
        for ident in (rec.id_a, rec.id_b):
            if ident in train:
                sides.append("train")
            elif ident in test:
                sides.append("test")
            else:
                raise ContractError(f"identity {ident!r} of {rec.morph_path} is in no split")
        split = sides[0] if sides[0] == sides[1] else "excluded"
        out.append(MorphRecord(**{**asdict(rec), "split": split}))
    return out


# ---------------------------------------------------------------- manifest

@dataclass
class Manifest:
    records: list[MorphRecord] = field(default_factory=list)
    identity_sets: dict[str, list[str]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    root: Optional[Path] = None

    def split(self, name: str) -> list[MorphRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"metadata": self.metadata,
                  "identity_sets": {k: list(v) for k, v in sorted(self.identity_sets.items())}}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        except OSError as exc:
            raise ImageReadError(f"cannot read manifest {path}: {exc}") from exc
        if not lines:
            raise ContractError(f"manifest {path} is empty")
        header = json.loads(lines[0])
        records = [MorphRecord(**json.loads(ln)) for ln in lines[1:]]
        return cls(records=records, identity_sets=header.get("identity_sets", {}),
                   metadata=header.get("metadata", {}), root=path.parent)

    def validate(self, check_images: bool = True) -> None:
        train = set(self.identity_sets.get("train", ()))
        test = set(self.identity_sets.get("test", ()))
        if train & test:
            raise ContractError("train and test identity sets overlap")
        resolution = self.metadata.get("resolution")
        for rec in self.records:
            if rec.split == "train" and not {rec.id_a, rec.id_b} <= train:
                raise ContractError(f"train record {rec.morph_path} uses non-train identity")
            if rec.split == "test" and not {rec.id_a, rec.id_b} <= test:
                raise ContractError(f"test record {rec.morph_path} uses non-test identity")
            if check_images:
                for rel in (rec.morph_path, rec.path_a, rec.path_b):
                    img = load_image(self.resolve(rel))
                    if resolution is not None and img.shape[1:] != (resolution, resolution):
                        raise ContractError(f"{rel} is {img.shape[1:]}, manifest declares {resolution}")


# ------------------------------------------------------------ morph synthesis

def _sample_pairs(n_ids: int, n_morphs: int, rng: np.random.Generator,
                  unique_pairs: bool) -> list[tuple[int, int]]:
    if unique_pairs:
        all_pairs = list(itertools.combinations(range(n_ids), 2))
        if n_morphs > len(all_pairs):
            raise ContractError(f"{n_morphs} morphs requested but only {len(all_pairs)} distinct pairs exist")
        picks = rng.choice(len(all_pairs), size=n_morphs, replace=False)
        return [all_pairs[int(k)] for k in picks]
    pairs = []
    for _ in range(n_morphs):
        a, b = rng.choice(n_ids, size=2, replace=False)
        pairs.append((int(a), int(b)))
    return pairs


def _morph_job(img_a, lms_a, img_b, lms_b, alpha, out_path):
    save_image(out_path, morph_pair(img_a, lms_a, img_b, lms_b, alpha))


def synthesize_morphs(face_pool, n_morphs: int, seed: int, out_dir, *, alpha: float = 0.5,
                      technique: str = "landmark", unique_pairs: bool = False, split: str = "train",
                      prefix: str = "morph", n_jobs: int = 1) -> list[MorphRecord]:
    """Morph random identity pairs from ``face_pool`` and write images under ``out_dir``.

    ``face_pool`` holds (image, landmarks, identity) triples with unique
    identities. Constituent faces go to ``faces/<identity>.png`` and morphs to
    ``morphs/<prefix>_<k>.png``.
    """
    out_dir = Path(out_dir)
    ids = [ident for _, _, ident in face_pool]
    if len(set(ids)) != len(ids):
        raise ContractError("face pool identities must be unique")
    if n_morphs < 0:
        raise ContractError("n_morphs must be non-negative")
    if n_morphs == 0:
        return []
    if len(ids) < 2:
        raise ContractError("face pool needs at least two identities")

    rng = np.random.default_rng(seed)
    pairs = _sample_pairs(len(ids), n_morphs, rng, unique_pairs)
    repeats = sum(c - 1 for c in Counter(tuple(sorted(p)) for p in pairs).values() if c > 1)
    if repeats:
        logger.info("%d of %d morphs repeat an identity pair", repeats, n_morphs)

    used = sorted({i for p in pairs for i in p})
    for i in used:
        save_image(out_dir / "faces" / f"{ids[i]}.png", face_pool[i][0])

    width = max(len(str(n_morphs - 1)), 5)
    records, jobs = [], []
    for k, (a, b) in enumerate(pairs):
        rel = f"morphs/{prefix}_{k:0{width}d}.png"
        records.append(MorphRecord(morph_path=rel, id_a=ids[a], id_b=ids[b],
                                   path_a=f"faces/{ids[a]}.png", path_b=f"faces/{ids[b]}.png",
                                   technique=technique, split=split))
        img_a, lms_a, _ = face_pool[a]
        img_b, lms_b, _ = face_pool[b]
        jobs.append(delayed(_morph_job)(img_a, lms_a, img_b, lms_b, alpha, out_dir / rel))
    Parallel(n_jobs=n_jobs)(jobs)
    return records


def build_training_set(face_pool, n_morphs: int, seed: int, out_dir, *, alpha: float = 0.5,
                       resolution: Optional[int] = None, unique_pairs: bool = False,
                       n_jobs: int = 1) -> Manifest:
    """Morph ``n_morphs`` random pairs from the pool and write ``manifest.jsonl``.

    All pool identities form the train identity set.
    """
    out_dir = Path(out_dir)
    records = synthesize_morphs(face_pool, n_morphs, seed, out_dir, alpha=alpha,
                                unique_pairs=unique_pairs, n_jobs=n_jobs)
    if resolution is None and face_pool:
        resolution = int(face_pool[0][0].shape[1])
    manifest = Manifest(
        records=records,
        identity_sets={"train": sorted(ident for _, _, ident in face_pool), "test": []},
        metadata={"seed": seed, "resolution": resolution, "technique": "landmark", "alpha": alpha,
                  "unique_pairs": unique_pairs, "n_morphs": n_morphs},
        root=out_dir,
    )
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def build_disjoint_dataset(face_pool, n_train: int, n_test: int, seed: int, out_dir, *,
                           train_fraction: float = 0.6, alpha: float = 0.5,
                           unique_pairs: bool = False, n_cross: int = 0, n_jobs: int = 1) -> Manifest:
    """Identity-disjoint train/test morphs from one pool.

    Identities are split by :func:`identity_disjoint_split`; train morphs pair
    train identities and test morphs pair test identities. ``n_cross`` extra
    morphs drawn from the whole pool are kept in the manifest, and any that
    straddle the split are labelled excluded.
    """
    out_dir = Path(out_dir)
    ids = [ident for _, _, ident in face_pool]
    train_ids, test_ids = identity_disjoint_split(ids, train_fraction, seed)
    by_id = {ident: entry for entry in face_pool for ident in [entry[2]]}
    train_pool = [by_id[i] for i in train_ids]
    test_pool = [by_id[i] for i in test_ids]
    sub = np.random.default_rng(seed).integers(0, 2**31 - 1, size=3)

    records = synthesize_morphs(train_pool, n_train, int(sub[0]), out_dir, alpha=alpha,
                                unique_pairs=unique_pairs, prefix="train", n_jobs=n_jobs)
    records += synthesize_morphs(test_pool, n_test, int(sub[1]), out_dir, alpha=alpha,
                                 unique_pairs=unique_pairs, split="test", prefix="test", n_jobs=n_jobs)
    records += synthesize_morphs(face_pool, n_cross, int(sub[2]), out_dir, alpha=alpha,
                                 prefix="cross", n_jobs=n_jobs)
    identity_sets = {"train": sorted(train_ids), "test": sorted(test_ids)}
    records = filter_morphs_by_split(records, identity_sets)
    resolution = int(face_pool[0][0].shape[1]) if face_pool else None
    manifest = Manifest(
        records=records,
        identity_sets=identity_sets,
        metadata={"seed": seed, "resolution": resolution, "technique": "landmark", "alpha": alpha,
                  "train_fraction": train_fraction, "unique_pairs": unique_pairs,
                  "n_train": n_train, "n_test": n_test, "n_cross": n_cross},
        root=out_dir,
    )
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def load_face_pool(landmark_file, resolution: int, *, detector: Optional[Detector] = None,
                   tally: Optional[DiscardTally] = None):
    """Load a pool described by a landmark file into (image, landmarks, identity) triples.

    Image paths in the file are resolved against the file's directory and the
    identity is the image's file stem. Without a detector the whole frame is
    the face box. Unreadable images and images with no detected face are
    skipped and counted in ``tally``.
    """
    landmark_file = Path(landmark_file)
    tally = tally if tally is not None else DiscardTally()
    pool = []
    for rel, pts in read_landmark_file(landmark_file):
        path = Path(rel) if Path(rel).is_absolute() else landmark_file.parent / rel
        try:
            image = load_image(path)
        except ImageReadError:
            logger.warning("unreadable pool image %s", path)
            tally.discard(str(rel), "unreadable")
            continue
        _, h, w = image.shape
        box = detector(image) if detector is not None else (0.0, 0.0, float(w), float(h))
        face = crop_and_normalize(image, box, resolution) if box is not None else None
        if face is None:
            tally.discard(str(rel), "no_face")
            continue
        pool.append((face, crop_landmarks(pts, box, (w, h), resolution), path.stem))
    return pool
