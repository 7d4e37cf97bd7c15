"""Command-line entry point: ``demorph {generate-morphs,train,demorph,evaluate}``.

Exit codes: 0 success, 1 runtime failure (including partial failures), 2
usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

from filelock import FileLock, Timeout

from . import config as cfg
from .data_pipeline import (DiscardTally, ImageReadError, Manifest, build_disjoint_dataset, load_face_pool,
                            load_image, save_image)
from .denoiser import DenoiserConfig, build, parameter_count
from .diffusion import linear_schedule
from .evaluation import DemorphResult, EvalConfig, build_report, morph_acceptance_rate
from .matcher import ConfigurationError, get_backend
from .morph_engine import ContractError
from .sampler import SAMPLER_NAME, demorph_batch, record_seed, sample
from .synthetic import synthetic_pool
from .training import (OptimizerConfig, TrainState, inference_model_from_checkpoint, load_checkpoint,
                       restore_state, save_checkpoint, train_loop, write_log)

logger = logging.getLogger("demorph")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or configuration detected before any work starts."""


def _schedule(config):
    d = config["diffusion"]
    return linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def _denoiser_config(config) -> DenoiserConfig:
    m = config["model"]
    return DenoiserConfig(base_width=m["base_width"], depth=m["depth"], time_embed_dim=m["time_embed_dim"],
                          res_blocks=m["res_blocks"], attention=m["attention"],
                          resolution=config["data"]["resolution"], max_timestep=int(config["diffusion"]["T"]))


def _paths(args, config):
    out = Path(args.out_dir) if args.out_dir else cfg.default_workspace()
    return {
        "out": out,
        "data": out / "data",
        "manifest": Path(args.manifest) if getattr(args, "manifest", None) else out / "data" / "manifest.jsonl",
        "train": out / "train",
        "checkpoint": Path(args.checkpoint) if getattr(args, "checkpoint", None) else out / "train" / "checkpoint.pt",
        "demorph": out / "demorph",
        "index": Path(args.index) if getattr(args, "index", None) else out / "demorph" / "index.jsonl",
        "eval": out / "eval",
    }


def _load_manifest(path) -> Manifest:
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    return Manifest.load(path)


# ------------------------------------------------------------------ commands

def cmd_generate_morphs(config, paths) -> int:
    data = config["data"]
    seed = int(config["seed"])
    res = int(data["resolution"])
    tally = DiscardTally()
    if data.get("pool"):
        pool_file = Path(data["pool"])
        if pool_file.is_dir():
            pool_file = pool_file / "landmarks.txt"
        if not pool_file.is_file():
            raise UsageError(f"face pool not found: {data['pool']}")
        pool = load_face_pool(pool_file, res, tally=tally)
    elif data.get("synthetic"):
        pool = synthetic_pool(int(data["n_identities"]), res, seed)
    else:
        raise UsageError("set data.pool or data.synthetic")
    if len(pool) < 2:
        raise UsageError(f"face pool has {len(pool)} usable faces; need at least 2")

    # build in a scratch directory so a failure leaves no partial manifest
    target = paths["data"]
    target.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".data-", dir=target.parent))
    try:
        manifest = build_disjoint_dataset(
            pool, int(data["n_train"]), int(data["n_test"]), seed, scratch,
            train_fraction=float(data["train_fraction"]), alpha=float(data["alpha"]),
            unique_pairs=bool(data["unique_pairs"]), n_cross=int(data.get("n_cross", 0)),
            n_jobs=int(data.get("workers", 1)))
        manifest.metadata["config"] = config
        manifest.save(scratch / "manifest.jsonl")
        (scratch / "discards.json").write_text(json.dumps(tally.to_dict(), indent=2, sort_keys=True) + "\n")
        (scratch / "config.yaml").write_text(cfg.dump(config))
        if target.exists():
            shutil.rmtree(target)
        scratch.rename(target)
    finally:
        if scratch.exists():
            shutil.rmtree(scratch)
    counts = {s: len(manifest.split(s)) for s in ("train", "test", "excluded")}
    print(f"generated {len(manifest.records)} morphs from {len(pool)} faces "
          f"(train {counts['train']}, test {counts['test']}, excluded {counts['excluded']}, "
          f"discarded {tally.no_face + tally.unreadable}) -> {target / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_train(config, paths, resume: bool = False) -> int:
    manifest = _load_manifest(paths["manifest"])
    res = int(config["data"]["resolution"])
    declared = manifest.metadata.get("resolution")
    if declared is not None and int(declared) != res:
        raise UsageError(f"manifest resolution {declared} != configured resolution {res}")
    if not manifest.split("train"):
        raise UsageError("manifest has no train records")
    schedule = _schedule(config)
    t = config["train"]
    ckpt = paths["checkpoint"]
    if resume and ckpt.is_file():
        payload = load_checkpoint(ckpt)
        if payload["schedule_hash"] != schedule.digest():
            raise UsageError("checkpoint was trained with a different variance schedule")
        state = restore_state(payload)
        if state.model.config.resolution != res:
            raise UsageError("checkpoint resolution differs from configuration")
    else:
        model = build(_denoiser_config(config), int(config["seed"]))
        state = TrainState(model, OptimizerConfig(lr=float(t["lr"]), batch_size=int(t["batch_size"]),
                                                  ema_decay=t.get("ema_decay"),
                                                  noise_draws=int(t.get("noise_draws") or 1)),
                           int(config["seed"]))
    logger.info("denoiser has %d parameters", parameter_count(state.model))
    extra = {"config": config, "sampler": SAMPLER_NAME}
    paths["train"].mkdir(parents=True, exist_ok=True)
    train_loop(state, manifest, schedule, int(t["epochs"]), checkpoint_path=ckpt,
               checkpoint_every=int(t.get("checkpoint_every") or 0), extra=extra)
    save_checkpoint(ckpt, state, schedule, extra)
    write_log(paths["train"] / "train_log.csv", state.log)
    (paths["train"] / "config.yaml").write_text(cfg.dump(config))
    last = state.log[-1]["mean_loss"] if state.log else float("nan")
    print(f"trained to epoch {state.epoch}, last mean loss {last:.5f} -> {ckpt}")
    return EXIT_OK


def _load_model_for_sampling(config, paths):
    ckpt = paths["checkpoint"]
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    payload = load_checkpoint(ckpt)
    schedule = _schedule(config)
    if payload["schedule_hash"] != schedule.digest():
        raise UsageError("checkpoint schedule hash does not match the configured schedule; refusing to sample")
    return inference_model_from_checkpoint(payload), schedule


def cmd_demorph(config, paths, morph_file=None) -> int:
    model, schedule = _load_model_for_sampling(config, paths)
    s = config["sampler"]
    seed = int(config["seed"])
    out_dir = paths["demorph"]
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(cfg.dump(config))
    kwargs = {"clip": bool(s["clip"]), "variance": s["variance"]}

    if morph_file is not None:
        index = out_dir / "index.jsonl"
        index.write_text("")
        try:
            morph = load_image(morph_file)
            rseed = record_seed(seed, 0)
            o1, o2 = sample(model, morph, schedule, int(s["steps"]), rseed, **kwargs)
        except (ImageReadError, ContractError) as exc:
            logger.error("cannot demorph %s: %s", morph_file, exc)
            return EXIT_RUNTIME
        stem = Path(morph_file).stem
        save_image(out_dir / f"{stem}_o1.png", o1)
        save_image(out_dir / f"{stem}_o2.png", o2)
        row = {"morph_path": str(morph_file), "out1_path": f"{stem}_o1.png", "out2_path": f"{stem}_o2.png",
               "seed": rseed, "steps": int(s["steps"]), "wall_time": None}
        index.write_text(json.dumps(row, sort_keys=True) + "\n")
        print(f"demorphed {morph_file} -> {out_dir}")
        return EXIT_OK

    manifest = _load_manifest(paths["manifest"])
    split = s.get("split", "test")
    wanted = len(manifest.split(split))
    results = demorph_batch(model, manifest, schedule, int(s["steps"]), seed, out_dir, split=split,
                            batch_size=int(s.get("batch_size", 8)), **kwargs)
    print(f"demorphed {len(results)}/{wanted} {split} morphs -> {out_dir}")
    return EXIT_OK if len(results) == wanted else EXIT_RUNTIME


def _gallery(manifest: Manifest, split: str):
    allowed = set(manifest.identity_sets.get(split, ()))
    seen = {}
    for rec in manifest.records:
        for ident, rel in ((rec.id_a, rec.path_a), (rec.id_b, rec.path_b)):
            if ident in allowed and ident not in seen:
                seen[ident] = rel
    return [(ident, load_image(manifest.resolve(rel))) for ident, rel in sorted(seen.items())]


def cmd_evaluate(config, paths, gallery_dir=None) -> int:
    m = config["matcher"]
    backend = get_backend(m["name"], model_path=m.get("model_path"), dimension=m.get("dimension"))
    manifest = _load_manifest(paths["manifest"])
    index_path = paths["index"]
    if not index_path.is_file():
        raise UsageError(f"demorph index not found: {index_path}")
    rows = [json.loads(ln) for ln in index_path.read_text().splitlines() if ln.strip()]
    by_morph = {r.morph_path: r for r in manifest.records}
    results, audited = [], []
    for row in rows:
        rec = by_morph.get(row["morph_path"])
        if rec is None:
            logger.warning("index row %s has no manifest record; skipped", row["morph_path"])
            continue
        audited.append(rec)
        results.append(DemorphResult(
            morph_id=rec.morph_path, id_a=rec.id_a, id_b=rec.id_b,
            o1=load_image(index_path.parent / row["out1_path"]),
            o2=load_image(index_path.parent / row["out2_path"]),
            i1=load_image(manifest.resolve(rec.path_a)), i2=load_image(manifest.resolve(rec.path_b))))
    if not results:
        raise UsageError("no demorphing results to evaluate")
    e = config["eval"]
    if gallery_dir is not None:
        gallery = [(p.stem, load_image(p)) for p in sorted(Path(gallery_dir).glob("*.png"))]
    else:
        gallery = _gallery(manifest, e.get("split", "test"))
    report = build_report(results, gallery, backend,
                          EvalConfig(fmr_levels=tuple(float(f) for f in e["fmr_levels"]),
                                     ra_threshold=float(e["ra_threshold"]), theta=float(e["theta"]),
                                     epsilon=float(e["epsilon"])))
    report.config = config
    if e.get("tau") is not None:
        triples = ((load_image(manifest.resolve(r.morph_path)), load_image(manifest.resolve(r.path_a)),
                    load_image(manifest.resolve(r.path_b))) for r in audited)
        report.audit = {"tau": float(e["tau"]),
                        "morph_acceptance_rate": morph_acceptance_rate(triples, backend, float(e["tau"]))}
    report.write(paths["eval"])
    tmr = ", ".join(f"TMR@{k:g}FMR={v:.4f}" for k, v in sorted(report.tmr_at_fmr.items()))
    print(f"evaluated {len(results)} morphs: RA={report.restoration_accuracy:.4f}, {tmr}, "
          f"PSNR={report.psnr_mean:.2f}, SSIM={report.ssim_mean:.3f} -> {paths['eval']}")
    return EXIT_OK


# ---------------------------------------------------------------------- main

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--preset", default="desk", choices=sorted(cfg.PRESETS))
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", help=f"run directory (default ${cfg.WORKSPACE_ENV} or ./demorph-runs)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set train.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="demorph", description="Reference-free face demorphing with coupled diffusion.")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate-morphs", parents=[common], help="synthesise a morph dataset")
    g.add_argument("--pool", help="face pool directory or landmark file")
    g.add_argument("--n", type=int, help="number of train morphs")
    t = sub.add_parser("train", parents=[common], help="train the denoiser")
    t.add_argument("--manifest")
    t.add_argument("--checkpoint")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    d = sub.add_parser("demorph", parents=[common], help="recover constituent images")
    d.add_argument("--manifest")
    d.add_argument("--checkpoint")
    d.add_argument("--morph", help="demorph a single image instead of a manifest split")
    d.add_argument("--split")
    e = sub.add_parser("evaluate", parents=[common], help="score demorphing outputs")
    e.add_argument("--manifest")
    e.add_argument("--index")
    e.add_argument("--gallery", help="directory of impostor gallery PNGs (identity = file stem)")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if getattr(args, "pool", None):
            overrides += [f"data.pool={args.pool}", "data.synthetic=false"]
        if getattr(args, "n", None) is not None:
            overrides.append(f"data.n_train={args.n}")
        if getattr(args, "epochs", None) is not None:
            overrides.append(f"train.epochs={args.epochs}")
        if getattr(args, "split", None):
            overrides.append(f"sampler.split={args.split}")
        config = cfg.load_config(args.config, args.preset, overrides)
        paths = _paths(args, config)
        paths["out"].mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(paths["out"] / ".lock"), timeout=0)
        try:
            with lock:
                if args.command == "generate-morphs":
                    return cmd_generate_morphs(config, paths)
                if args.command == "train":
                    return cmd_train(config, paths, resume=args.resume)
                if args.command == "demorph":
                    return cmd_demorph(config, paths, morph_file=args.morph)
                return cmd_evaluate(config, paths, gallery_dir=args.gallery)
        except Timeout:
            raise UsageError(f"run directory {paths['out']} is locked by another process") from None
    except (UsageError, ConfigurationError) as exc:
        print(f"demorph: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        logger.exception("%s failed", args.command)
        print(f"demorph: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
