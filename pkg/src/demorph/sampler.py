"""Morph-guided reverse sampling of the coupled pair (o1, o2)."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data_pipeline import ImageReadError, Manifest, load_image, save_image
from .diffusion import (Denoiser, VarianceSchedule, from_model_range, posterior_coefficients,
                        predict_x0_from_eps, to_model_range)
from .morph_engine import ContractError, check_image

logger = logging.getLogger(__name__)

SAMPLER_NAME = "strided-ancestral-ddpm"


def make_timestep_subsequence(T: int, steps: int) -> list[int]:
    """Evenly strided descending timesteps from T down to 1.

    Both ends are always included, so ``steps`` must be at least 2 unless
    T == 1.
    """
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    if steps > T:
        raise ContractError(f"cannot take {steps} steps from T={T}")
    if steps < 1 or (steps == 1 and T > 1):
        raise ContractError("need at least 2 steps so the sequence can start at T and end at 1")
    if steps == 1:
        return [1]
    grid = np.floor(np.linspace(T, 1, steps) + 0.5).astype(int)
    return [int(v) for v in grid]


def record_seed(run_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed, index]).generate_state(1)[0])


def _model_resolution(denoiser) -> Optional[int]:
    config = getattr(denoiser, "config", None)
    return getattr(config, "resolution", None)


@torch.no_grad()
def sample_batch(denoiser: Denoiser, morphs: torch.Tensor, schedule: VarianceSchedule, steps: int,
                 seeds: Sequence[int], *, clip: bool = True, variance: str = "posterior") -> torch.Tensor:
    """Reverse-sample coupled pairs for a batch of morphs.

    ``morphs`` is (B, 3, H, W) in [0, 1]; the result is (B, 6, H, W) in
    [0, 1]. Each batch row draws its noise from its own seed, so a row's
    output does not depend on what it is batched with. ``variance`` selects
    the posterior variance ("posterior") or the forward beta over the stride
    ("beta") for the injected noise.
    """
    if morphs.ndim != 4 or morphs.shape[1] != 3:
        raise ContractError(f"morphs must be (B, 3, H, W), got {tuple(morphs.shape)}")
    if len(seeds) != morphs.shape[0]:
        raise ContractError("one seed per morph is required")
    if variance not in ("posterior", "beta"):
        raise ContractError(f"unknown variance mode {variance!r}")
    res = _model_resolution(denoiser)
    if res is not None and tuple(morphs.shape[2:]) != (res, res):
        raise ContractError(f"morph is {tuple(morphs.shape[2:])}, denoiser expects {res}x{res}")

    b, _, h, w = morphs.shape
    cond = to_model_range(morphs.float())
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]

    def noise():
        return torch.stack([torch.randn(6, h, w, generator=g) for g in gens])

    seq = make_timestep_subsequence(schedule.T, steps)
    o = noise()
    for k, t in enumerate(seq):
        s = seq[k + 1] if k + 1 < len(seq) else 0
        tt = torch.full((b,), t, dtype=torch.long)
        eps = denoiser(torch.cat([o, cond], dim=1), tt)
        x0 = predict_x0_from_eps(o, eps, tt, schedule, clip=clip)
        coef_x0, coef_xt, var = posterior_coefficients(schedule, t, s)
        if variance == "beta":
            var = 1.0 - float(schedule.alpha_bar[t] / schedule.alpha_bar[s])
        o = coef_x0 * x0 + coef_xt * o
        if s > 0:
            o = o + float(np.sqrt(var)) * noise()
    return from_model_range(o.clamp(-1.0, 1.0))


def sample(denoiser: Denoiser, morph, schedule: VarianceSchedule, steps: int = 100, seed: int = 0,
           **kwargs) -> tuple[np.ndarray, np.ndarray]:
    """Demorph one (3, H, W) [0, 1] image into two (3, H, W) [0, 1] images."""
    morph = check_image(np.asarray(morph), "morph")
    out = sample_batch(denoiser, torch.from_numpy(np.ascontiguousarray(morph, dtype=np.float32))[None],
                       schedule, steps, [seed], **kwargs)[0].numpy()
    return out[:3].copy(), out[3:].copy()


def demorph_batch(denoiser: Denoiser, manifest: Manifest, schedule: VarianceSchedule, steps: int,
                  seed: int, out_dir=None, *, split: str = "test", batch_size: int = 8,
                  clip: bool = True, variance: str = "posterior") -> list:
    """Demorph every record of ``split`` and optionally persist outputs.

    Record k uses seed ``record_seed(seed, k)``. Records whose morph cannot be
    read or has the wrong size are logged and skipped. When ``out_dir`` is
    given, outputs go to ``<out_dir>/<morph stem>_o{1,2}.png`` and each
    success appends a row to ``<out_dir>/index.jsonl``.

    Returns (record, o1, o2) tuples for successful records.
    """
    records = manifest.split(split)
    if not records:
        logger.warning("no %s records to demorph", split)
    res = _model_resolution(denoiser)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        index_path = out_dir / "index.jsonl"
        index_path.write_text("")

    loaded = []
    for k, rec in enumerate(records):
        try:
            img = load_image(manifest.resolve(rec.morph_path))
        except ImageReadError as exc:
            logger.error("skipping %s: %s", rec.morph_path, exc)
            continue
        if res is not None and img.shape[1:] != (res, res):
            logger.error("skipping %s: size %s, model expects %d", rec.morph_path, img.shape[1:], res)
            continue
        loaded.append((rec, img, record_seed(seed, k)))

    results = []
    for start in range(0, len(loaded), batch_size):
        chunk = loaded[start:start + batch_size]
        t0 = time.perf_counter()
        morphs = torch.from_numpy(np.stack([img for _, img, _ in chunk]))
        outs = sample_batch(denoiser, morphs, schedule, steps, [s for _, _, s in chunk],
                            clip=clip, variance=variance).numpy()
        per_item = (time.perf_counter() - t0) / len(chunk)
        for (rec, _, rseed), out in zip(chunk, outs):
            o1, o2 = out[:3].copy(), out[3:].copy()
            results.append((rec, o1, o2))
            if out_dir is not None:
                stem = Path(rec.morph_path).stem
                p1, p2 = out_dir / f"{stem}_o1.png", out_dir / f"{stem}_o2.png"
                save_image(p1, o1)
                save_image(p2, o2)
                row = {"morph_path": rec.morph_path, "out1_path": p1.name, "out2_path": p2.name,
                       "seed": rseed, "steps": steps, "wall_time": round(per_item, 4)}
                with index_path.open("a") as fh:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
    return results
