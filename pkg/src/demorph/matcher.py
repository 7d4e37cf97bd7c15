"""Face comparators producing cosine similarity between unit-norm embeddings.

The toy backend needs no model files and is what the tests and desk-scale
runs use. Real matchers (AdaFace, ArcFace, ...) plug in as TorchScript
modules exported to a file and named in config.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol

import cv2
import numpy as np

from .morph_engine import ContractError, check_image

LUMA = np.array([0.299, 0.587, 0.114])


class ConfigurationError(RuntimeError):
    """A matcher cannot be set up from the given configuration."""


class MatcherBackend(Protocol):
    name: str
    dimension: int

    def embed(self, image: np.ndarray) -> np.ndarray: ...


def normalize(vector) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64).ravel()
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm < 1e-12:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / norm


def similarity(e1, e2) -> float:
    """Cosine similarity of two unit embeddings, clipped to [-1, 1]."""
    a, b = np.asarray(e1, dtype=np.float64), np.asarray(e2, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"embedding dimensions differ: {a.shape} vs {b.shape}")
    # sum of elementwise products is symmetric bit-for-bit, unlike BLAS dot
    return float(np.clip(np.sum(a * b), -1.0, 1.0))


def toy_embed(image) -> np.ndarray:
    """8x8 grayscale thumbnail, mean-subtracted and L2-normalised (64-d).

    A constant image has no structure left after centring and maps to the
    first basis vector.
    """
    image = check_image(image)
    gray = np.tensordot(LUMA, image.astype(np.float64), axes=1)
    thumb = cv2.resize(gray, (8, 8), interpolation=cv2.INTER_AREA)
    centred = thumb.ravel() - thumb.mean()
    if np.max(np.abs(centred)) < 1e-9:
        out = np.zeros(64)
        out[0] = 1.0
        return out
    return normalize(centred)


@dataclass
class ToyBackend:
    name: str = "toy"
    dimension: int = 64

    def embed(self, image) -> np.ndarray:
        return toy_embed(image)


class TorchScriptBackend:
    """Wraps a TorchScript face model mapping (1, 3, H, W) [0, 1] input to a raw embedding.

    ``input_size`` resizes images first; ``input_range`` picks whether the
    model expects [0, 1] or [-1, 1] pixels.
    """

    def __init__(self, model_path, dimension: int, input_size: Optional[int] = 112,
                 input_range: str = "signed", name: str = "torchscript"):
        path = Path(model_path) if model_path else None
        if path is None or not path.is_file():
            raise ConfigurationError(f"matcher model file not found: {model_path}")
        import torch

        self._torch = torch
        try:
            self.model = torch.jit.load(str(path), map_location="cpu").eval()
        except (RuntimeError, ValueError) as exc:
            raise ConfigurationError(f"cannot load matcher model {path}: {exc}") from exc
        self.name = name
        self.dimension = int(dimension)
        self.input_size = input_size
        self.input_range = input_range

    def embed(self, image) -> np.ndarray:
        image = check_image(image)
        if self.input_size:
            hwc = cv2.resize(np.ascontiguousarray(image.transpose(1, 2, 0), dtype=np.float32),
                             (self.input_size, self.input_size), interpolation=cv2.INTER_LINEAR)
            image = hwc.transpose(2, 0, 1)
        x = self._torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
        if self.input_range == "signed":
            x = x * 2 - 1
        with self._torch.no_grad():
            raw = self.model(x)
        if isinstance(raw, (tuple, list)):
            raw = raw[0]
        vec = raw.detach().cpu().numpy().ravel()
        if vec.shape[0] != self.dimension:
            raise ContractError(f"{self.name} returned {vec.shape[0]}-d embedding, "
                                f"configured dimension {self.dimension}")
        return normalize(vec)


def external_embed(image, backend: MatcherBackend) -> np.ndarray:
    """Embed through any backend and renormalise to unit length."""
    return normalize(backend.embed(image))


BACKENDS: dict[str, Callable[..., MatcherBackend]] = {
    "toy": lambda **_: ToyBackend(),
    "torchscript": lambda model_path=None, dimension=512, **kw: TorchScriptBackend(model_path, dimension, **kw),
    "adaface": lambda model_path=None, dimension=512, **kw: TorchScriptBackend(
        model_path, dimension, name="adaface", **kw),
    "arcface": lambda model_path=None, dimension=512, **kw: TorchScriptBackend(
        model_path, dimension, name="arcface", **kw),
}


def get_backend(name: str, **options) -> MatcherBackend:
    """Look a backend up by name; external ones need ``model_path`` and ``dimension``."""
    try:
        factory = BACKENDS[name]
    except KeyError:
        raise ConfigurationError(f"unknown matcher {name!r}; choose from {sorted(BACKENDS)}") from None
    return factory(**{k: v for k, v in options.items() if v is not None})


class EmbeddingCache:
    """Memoises embeddings by key so each image is embedded once per run."""

    def __init__(self, backend: MatcherBackend):
        self.backend = backend
        self._store: dict = {}

    def __call__(self, key, image) -> np.ndarray:
        if key not in self._store:
            self._store[key] = external_embed(image, self.backend)
        return self._store[key]


def write_scores_csv(path, rows) -> None:
    """``rows`` are (pair_id, score, label) with label genuine or impostor."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "score", "label"])
        for pair_id, score, label in rows:
            if label not in ("genuine", "impostor"):
                raise ContractError(f"bad score label {label!r}")
            w.writerow([pair_id, f"{score:.8f}", label])
