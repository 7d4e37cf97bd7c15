"""Demorphing evaluation: output pairing, genuine/impostor scores, TMR@FMR, RA, PSNR/SSIM.

Conventions:

* Pairing keeps (o1->i1, o2->i2) when its similarity sum is >= the crossed
  sum, so ties go to the straight assignment.
* TMR at an FMR level is the best true match rate over all thresholds whose
  false match rate ``fraction(impostor >= threshold)`` does not exceed the
  level. That is ``fraction(genuine > v)`` where ``v`` is the
  (floor(level * n) + 1)-th largest impostor score.
* Restoration accuracy counts genuine scores ``>= threshold``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from skimage.metrics import structural_similarity

from .matcher import EmbeddingCache, external_embed, similarity
from .morph_engine import ContractError, check_image

PSNR_CAP = 100.0
DEFAULT_FMR_LEVELS = (0.01, 0.05, 0.1)


@dataclass(frozen=True)
class PairingDecision:
    straight: bool
    sum_straight: float
    sum_crossed: float
    scores: tuple[tuple[float, float], tuple[float, float]]

    @property
    def assignment(self) -> tuple[int, int]:
        """Ground-truth index (0 or 1) assigned to o1 and o2."""
        return (0, 1) if self.straight else (1, 0)


def pair_from_scores(scores) -> PairingDecision:
    """Decide pairing from ``scores[j][k]`` = similarity(o_j, i_k)."""
    s = np.asarray(scores, dtype=np.float64)
    straight_sum = float(s[0, 0] + s[1, 1])
    crossed_sum = float(s[0, 1] + s[1, 0])
    return PairingDecision(straight_sum >= crossed_sum, straight_sum, crossed_sum,
                           ((float(s[0, 0]), float(s[0, 1])), (float(s[1, 0]), float(s[1, 1]))))


def _score_matrix(o1, o2, i1, i2, backend):
    if isinstance(backend, EmbeddingCache):
        backend = backend.backend
    eo = [external_embed(img, backend) for img in (o1, o2)]
    ei = [external_embed(img, backend) for img in (i1, i2)]
    return [[similarity(a, b) for b in ei] for a in eo], similarity(eo[0], eo[1])


def pair_outputs(o1, o2, i1, i2, backend) -> PairingDecision:
    return pair_from_scores(_score_matrix(o1, o2, i1, i2, backend)[0])


def tmr_at_fmr(genuine: Sequence[float], impostor: Sequence[float], fmr_level: float) -> float:
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ContractError("genuine and impostor score lists must be non-empty")
    if not 0.0 < fmr_level < 1.0:
        raise ContractError(f"fmr_level must lie in (0, 1), got {fmr_level}")
    allowed = int(math.floor(fmr_level * impostor.size + 1e-9))
    ranked = np.sort(impostor)[::-1]
    v = ranked[allowed]
    return float(np.mean(genuine > v))


def tmr_threshold(impostor: Sequence[float], fmr_level: float) -> float:
    """Largest impostor score that must be rejected at ``fmr_level``; accept scores above it."""
    ranked = np.sort(np.asarray(impostor, dtype=np.float64))[::-1]
    return float(ranked[int(math.floor(fmr_level * ranked.size + 1e-9))])


def restoration_accuracy(genuine: Sequence[float], threshold: float = 0.4) -> float:
    genuine = np.asarray(genuine, dtype=np.float64)
    if genuine.size == 0:
        raise ContractError("genuine score list is empty")
    return float(np.mean(genuine >= threshold))


@dataclass(frozen=True)
class ConditionReport:
    dissimilarity: float
    dissimilar_ok: bool
    match_value: float
    match_ok: bool


def demorph_condition_values(scores_oo: float, scores) -> tuple[float, float]:
    """(similarity(o1, o2), min over outputs of max similarity to either ground truth)."""
    s = np.asarray(scores, dtype=np.float64)
    return float(scores_oo), float(min(max(s[j, 0], s[j, 1]) for j in range(2)))


def check_demorph_conditions(o1, o2, i1, i2, theta: float, epsilon: float, backend) -> ConditionReport:
    """Outputs must be mutually dissimilar (< theta) and each must match a ground truth (> epsilon)."""
    scores, oo = _score_matrix(o1, o2, i1, i2, backend)
    oo, match = demorph_condition_values(oo, scores)
    return ConditionReport(oo, oo < theta, match, match > epsilon)


def psnr(out, truth) -> float:
    out, truth = check_image(out, "out"), check_image(truth, "truth")
    if out.shape != truth.shape:
        raise ContractError(f"shape mismatch {out.shape} vs {truth.shape}")
    mse = float(np.mean((out.astype(np.float64) - truth.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(out, truth) -> float:
    out, truth = check_image(out, "out"), check_image(truth, "truth")
    if out.shape != truth.shape:
        raise ContractError(f"shape mismatch {out.shape} vs {truth.shape}")
    return float(structural_similarity(out.astype(np.float64), truth.astype(np.float64), win_size=7,
                                       data_range=1.0, channel_axis=0, K1=0.01, K2=0.03))


def image_metrics(out, truth) -> tuple[float, float]:
    return psnr(out, truth), ssim(out, truth)


@dataclass
class DemorphResult:
    morph_id: str
    id_a: str
    id_b: str
    o1: np.ndarray
    o2: np.ndarray
    i1: np.ndarray
    i2: np.ndarray


def genuine_impostor_scores(results: Sequence[DemorphResult], gallery: Sequence[tuple[str, np.ndarray]],
                            backend) -> tuple[list[float], list[float]]:
    """One genuine and one impostor score per output image.

    The impostor score is the best similarity to a gallery face whose
    identity is neither of the record's constituents.
    """
    if not gallery:
        raise ContractError("impostor gallery is empty")
    cache = _fresh_cache(backend)
    gal = [(ident, cache(("gallery", k), img)) for k, (ident, img) in enumerate(gallery)]
    genuine, impostor = [], []
    for n, r in enumerate(results):
        g, imp, _ = _score_record(n, r, gal, cache)
        genuine += g
        impostor += imp
    return genuine, impostor


def _fresh_cache(backend) -> EmbeddingCache:
    # keys are positional, so never reuse a cache across calls
    return EmbeddingCache(backend.backend if isinstance(backend, EmbeddingCache) else backend)


def _score_record(n: int, r: DemorphResult, gal, cache: EmbeddingCache):
    eo = [cache(("out", n, k), img) for k, img in enumerate((r.o1, r.o2))]
    ei = [cache(("truth", n, k), img) for k, img in enumerate((r.i1, r.i2))]
    scores = [[similarity(a, b) for b in ei] for a in eo]
    decision = pair_from_scores(scores)
    genuine = [scores[j][decision.assignment[j]] for j in range(2)]
    pool = [e for ident, e in gal if ident not in (r.id_a, r.id_b)]
    if not pool:
        raise ContractError(f"gallery is empty after excluding {r.id_a}, {r.id_b} for {r.morph_id}")
    impostor = [max(similarity(e_out, e) for e in pool) for e_out in eo]
    return genuine, impostor, (decision, scores, similarity(eo[0], eo[1]))


@dataclass
class EvaluationReport:
    genuine_scores: list[float]
    impostor_scores: list[float]
    tmr_at_fmr: dict[float, float]
    restoration_accuracy: float
    psnr_mean: float
    ssim_mean: float
    per_record: list[dict]
    thresholds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tmr_at_fmr"] = {repr(float(k)): v for k, v in sorted(self.tmr_at_fmr.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        d = dict(d)
        d["tmr_at_fmr"] = {float(k): float(v) for k, v in d["tmr_at_fmr"].items()}
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        return cls.from_dict(json.loads(text))

    def write(self, out_dir) -> None:
        """Write report.json, scores.csv and per_record.csv into ``out_dir``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(self.to_json())
        with (out_dir / "scores.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "score", "label"])
            for row in self.per_record:
                for k in (1, 2):
                    w.writerow([f"{row['morph_id']}#o{k}", f"{row[f'genuine{k}']:.8f}", "genuine"])
                    w.writerow([f"{row['morph_id']}#o{k}", f"{row[f'impostor{k}']:.8f}", "impostor"])
        cols = ["morph_id", "pairing", "genuine1", "genuine2", "impostor1", "impostor2",
                "psnr", "ssim", "eq3", "eq4"]
        with (out_dir / "per_record.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.per_record:
                w.writerow([f"{row[c]:.6f}" if isinstance(row[c], float) else row[c] for c in cols])


def morph_acceptance_rate(triples, backend, tau: float) -> float:
    """Fraction of (morph, i1, i2) triples whose morph matches both constituents at threshold ``tau``.

    An optional audit of how threatening the morphs are; it plays no part in
    the demorphing metrics.
    """
    triples = list(triples)
    if not triples:
        raise ContractError("no morphs to audit")
    accepted = 0
    for morph, i1, i2 in triples:
        e = external_embed(morph, backend)
        accepted += all(similarity(e, external_embed(i, backend)) >= tau for i in (i1, i2))
    return accepted / len(triples)


@dataclass
class EvalConfig:
    fmr_levels: tuple[float, ...] = DEFAULT_FMR_LEVELS
    ra_threshold: float = 0.4
    theta: float = 0.4
    epsilon: float = 0.4


def build_report(results: Sequence[DemorphResult], gallery: Sequence[tuple[str, np.ndarray]],
                 backend, config: Optional[EvalConfig] = None) -> EvaluationReport:
    """Score every result and aggregate all metrics into one report."""
    config = config or EvalConfig()
    if not results:
        raise ContractError("no demorphing results to evaluate")
    if not gallery:
        raise ContractError("impostor gallery is empty")
    cache = _fresh_cache(backend)
    gal = [(ident, cache(("gallery", k), img)) for k, (ident, img) in enumerate(gallery)]

    genuine, impostor, rows, psnrs, ssims = [], [], [], [], []
    for n, r in enumerate(results):
        try:
            g, imp, (decision, scores, oo) = _score_record(n, r, gal, cache)
        except ContractError as exc:
            raise ContractError(f"record {r.morph_id}: {exc}") from exc
        truths = (r.i1, r.i2)
        metrics = [image_metrics(out, truths[decision.assignment[j]]) for j, out in enumerate((r.o1, r.o2))]
        _, match = demorph_condition_values(oo, scores)
        genuine += g
        impostor += imp
        psnrs += [m[0] for m in metrics]
        ssims += [m[1] for m in metrics]
        rows.append({
            "morph_id": r.morph_id,
            "pairing": "straight" if decision.straight else "crossed",
            "genuine1": g[0], "genuine2": g[1],
            "impostor1": imp[0], "impostor2": imp[1],
            "psnr": float(np.mean([m[0] for m in metrics])),
            "ssim": float(np.mean([m[1] for m in metrics])),
            "eq3": bool(oo < config.theta),
            "eq4": bool(match > config.epsilon),
        })

    return EvaluationReport(
        genuine_scores=genuine,
        impostor_scores=impostor,
        tmr_at_fmr={float(f): tmr_at_fmr(genuine, impostor, f) for f in config.fmr_levels},
        restoration_accuracy=restoration_accuracy(genuine, config.ra_threshold),
        psnr_mean=float(np.mean(psnrs)),
        ssim_mean=float(np.mean(ssims)),
        per_record=rows,
        thresholds={"ra_threshold": config.ra_threshold, "theta": config.theta, "epsilon": config.epsilon,
                    "tmr_thresholds": {repr(float(f)): tmr_threshold(impostor, f) for f in config.fmr_levels}},
    )
