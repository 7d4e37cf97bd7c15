"""Scaled-down end-to-end experiment shared by the acceptance suite and scripts/."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .data_pipeline import build_training_set, load_image
from .denoiser import DenoiserConfig, build
from .diffusion import linear_schedule
from .evaluation import pair_outputs
from .matcher import ToyBackend, similarity, toy_embed
from .sampler import demorph_batch
from .synthetic import synthetic_pool
from .training import OptimizerConfig, TrainState, train_loop

logger = logging.getLogger(__name__)


@dataclass
class OverfitConfig:
    n_morphs: int = 8
    n_identities: int = 16
    resolution: int = 64
    epochs: int = 500
    batch_size: int = 1
    lr: float = 5e-4
    ema_decay: Optional[float] = 0.999
    noise_draws: int = 8
    steps: int = 100
    seed: int = 0
    model: DenoiserConfig = field(default_factory=DenoiserConfig)


@dataclass
class OverfitCase:
    morph_path: str
    pairing: str
    genuine: tuple[float, float]
    to_morph: tuple[float, float]

    @property
    def passed(self) -> bool:
        return all(g > m for g, m in zip(self.genuine, self.to_morph))


@dataclass
class OverfitResult:
    first_loss: float
    final_loss: float
    cases: list[OverfitCase]
    train_seconds: float
    sample_seconds: float

    @property
    def n_passed(self) -> int:
        return sum(c.passed for c in self.cases)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["n_passed"] = self.n_passed
        return out


def run_overfit(config: OverfitConfig, workdir) -> OverfitResult:
    """Train on a handful of synthetic morphs, then demorph those same morphs.

    A case passes when, after toy-matcher pairing, both outputs are strictly
    closer to their assigned constituent than to the morph they came from.
    """
    workdir = Path(workdir)
    pool = synthetic_pool(config.n_identities, config.resolution, config.seed + 1)
    manifest = build_training_set(pool, config.n_morphs, config.seed + 3, workdir / "data", unique_pairs=True)
    schedule = linear_schedule(config.model.max_timestep)
    model_config = config.model
    if model_config.resolution != config.resolution:
        model_config = DenoiserConfig(**{**model_config.to_dict(), "resolution": config.resolution})
    state = TrainState(build(model_config, config.seed),
                       OptimizerConfig(lr=config.lr, batch_size=config.batch_size, ema_decay=config.ema_decay,
                                       noise_draws=config.noise_draws),
                       config.seed)
    t0 = time.perf_counter()
    log = train_loop(state, manifest, schedule, config.epochs, log_path=workdir / "train_log.csv")
    train_seconds = time.perf_counter() - t0
    torch.save(state.inference_model().state_dict(), workdir / "model.pt")

    t0 = time.perf_counter()
    outputs = demorph_batch(state.inference_model(), manifest, schedule, config.steps, config.seed,
                            workdir / "outputs", split="train")
    sample_seconds = time.perf_counter() - t0

    backend = ToyBackend()
    cases = []
    for rec, o1, o2 in outputs:
        i1, i2 = (load_image(manifest.resolve(p)) for p in (rec.path_a, rec.path_b))
        morph = toy_embed(load_image(manifest.resolve(rec.morph_path)))
        decision = pair_outputs(o1, o2, i1, i2, backend)
        truths = (i1, i2)
        genuine, to_morph = [], []
        for j, o in enumerate((o1, o2)):
            e = toy_embed(o)
            genuine.append(similarity(e, toy_embed(truths[decision.assignment[j]])))
            to_morph.append(similarity(e, morph))
        cases.append(OverfitCase(rec.morph_path, "straight" if decision.straight else "crossed",
                                 tuple(genuine), tuple(to_morph)))
        logger.info("%s genuine %s morph %s", rec.morph_path, genuine, to_morph)
    return OverfitResult(log[0]["mean_loss"], log[-1]["mean_loss"], cases, train_seconds, sample_seconds)
