"""Training loop and checkpoint files for the denoiser."""
from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data_pipeline import Manifest, load_image
from .denoiser import DenoiserConfig, UNet, build
from .diffusion import VarianceSchedule, to_model_range, training_loss
from .morph_engine import ContractError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "demorph-checkpoint/1"


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    batch_size: int = 8
    ema_decay: Optional[float] = None
    # independent (t, noise) draws per example in each batch; 1 is plain DDPM training
    noise_draws: int = 1


def load_pairs(manifest: Manifest, resolution: int, split: str = "train"):
    """Stack a split's records into (N, 6, H, W) pairs and (N, 3, H, W) morphs in model range."""
    records = manifest.split(split)
    if not records:
        raise ContractError(f"manifest has no {split} records")
    pairs, morphs = [], []
    for rec in records:
        imgs = [load_image(manifest.resolve(p)) for p in (rec.path_a, rec.path_b, rec.morph_path)]
        for img, p in zip(imgs, (rec.path_a, rec.path_b, rec.morph_path)):
            if img.shape[1:] != (resolution, resolution):
                raise ContractError(f"{p} is {img.shape[1:]}, model resolution is {resolution}")
        pairs.append(np.concatenate(imgs[:2]))
        morphs.append(imgs[2])
    return (to_model_range(torch.from_numpy(np.stack(pairs))),
            to_model_range(torch.from_numpy(np.stack(morphs))))


class TrainState:
    """Mutable training state: model, optimizer, RNG, epoch counter and log."""

    def __init__(self, model: UNet, optim: OptimizerConfig, seed: int):
        self.model = model
        self.optim_config = optim
        self.optimizer = torch.optim.Adam(model.parameters(), lr=optim.lr)
        self.generator = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.epoch = 0
        self.log: list[dict] = []
        self.ema = copy.deepcopy(model).eval() if optim.ema_decay else None

    @torch.no_grad()
    def update_ema(self) -> None:
        if self.ema is None:
            return
        d = self.optim_config.ema_decay
        for pe, p in zip(self.ema.parameters(), self.model.parameters()):
            pe.mul_(d).add_(p, alpha=1 - d)

    def inference_model(self) -> UNet:
        return self.ema if self.ema is not None else self.model


def train_loop(state: TrainState, manifest: Manifest, schedule: VarianceSchedule, epochs: int, *,
               checkpoint_path=None, checkpoint_every: int = 0, extra: Optional[dict] = None,
               log_path=None) -> list[dict]:
    """Run ``epochs`` more epochs of noise-prediction training.

    Each epoch visits the train split once in seeded random order; every
    batch draws t uniformly from 1..T and fresh Gaussian noise. Returns the
    log rows added by this call (epoch, mean_loss, wall_time).
    """
    if epochs < 0:
        raise ContractError("epochs must be non-negative")
    model = state.model
    pairs, morphs = load_pairs(manifest, model.config.resolution)
    if schedule.T != model.config.max_timestep:
        raise ContractError(f"schedule T={schedule.T} but model expects {model.config.max_timestep}")
    n = pairs.shape[0]
    bs = state.optim_config.batch_size
    draws = state.optim_config.noise_draws
    if draws < 1:
        raise ContractError("noise_draws must be at least 1")
    gen = state.generator
    new_rows = []
    model.train()
    for _ in range(epochs):
        t0 = time.perf_counter()
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            i0, cond = pairs[idx], morphs[idx]
            if draws > 1:
                i0, cond = i0.repeat_interleave(draws, 0), cond.repeat_interleave(draws, 0)
            t = torch.randint(1, schedule.T + 1, (len(i0),), generator=gen)
            eps = torch.randn(i0.shape, generator=gen)
            loss = training_loss(model, i0, cond, t, eps, schedule)
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            state.optimizer.step()
            state.update_ema()
            total += float(loss.detach()) * len(idx)
        state.epoch += 1
        row = {"epoch": state.epoch, "mean_loss": total / n, "wall_time": time.perf_counter() - t0}
        state.log.append(row)
        new_rows.append(row)
        logger.info("epoch %d loss %.5f", row["epoch"], row["mean_loss"])
        if checkpoint_path and checkpoint_every and state.epoch % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, state, schedule, extra)
    model.eval()
    if log_path is not None:
        write_log(log_path, state.log)
    return new_rows


def write_log(path, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "mean_loss", "wall_time"])
        w.writeheader()
        for row in rows:
            w.writerow({"epoch": row["epoch"], "mean_loss": f"{row['mean_loss']:.8f}",
                        "wall_time": f"{row['wall_time']:.4f}"})


def save_checkpoint(path, state: TrainState, schedule: VarianceSchedule, extra: Optional[dict] = None) -> None:
    """Write a self-describing checkpoint: config echo, weights, optimizer, RNG and log."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "denoiser_config": state.model.config.to_dict(),
        "optimizer_config": vars(state.optim_config),
        "state_dict": state.model.state_dict(),
        "ema_state_dict": state.ema.state_dict() if state.ema is not None else None,
        "optimizer": state.optimizer.state_dict(),
        "rng_state": state.generator.get_state(),
        "schedule_hash": schedule.digest(),
        "seed": state.seed,
        "epoch": state.epoch,
        "log": state.log,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    return payload


def restore_state(payload: dict) -> TrainState:
    """Rebuild a :class:`TrainState` from a loaded checkpoint for resuming."""
    config = DenoiserConfig(**payload["denoiser_config"])
    model = build(config, payload["seed"])
    model.load_state_dict(payload["state_dict"])
    state = TrainState(model, OptimizerConfig(**payload["optimizer_config"]), payload["seed"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.generator.set_state(payload["rng_state"])
    if state.ema is not None and payload.get("ema_state_dict") is not None:
        state.ema.load_state_dict(payload["ema_state_dict"])
    state.epoch = payload["epoch"]
    state.log = list(payload["log"])
    return state


def inference_model_from_checkpoint(payload: dict) -> UNet:
    config = DenoiserConfig(**payload["denoiser_config"])
    model = build(config, payload["seed"])
    weights = payload.get("ema_state_dict") or payload["state_dict"]
    model.load_state_dict(weights)
    return model.eval()
