"""Overfit the desk denoiser on a few synthetic morphs and check it demorphs them.

    python3 scripts/desk_overfit.py --out runs/overfit --epochs 500
"""
import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from demorph.experiments import OverfitConfig, run_overfit


def main():
    defaults = OverfitConfig()
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--ema", type=float, default=defaults.ema_decay, help="EMA decay; 0 disables")
    p.add_argument("--draws", type=int, default=defaults.noise_draws, help="noise draws per example")
    p.add_argument("--steps", type=int, default=defaults.steps)
    p.add_argument("--seed", type=int, default=defaults.seed)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    config = replace(defaults, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                     ema_decay=args.ema or None, noise_draws=args.draws, steps=args.steps, seed=args.seed)
    out = Path(args.out)
    result = run_overfit(config, out)
    (out / "result.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    for case in result.cases:
        print(f"{case.morph_path}: genuine {case.genuine[0]:.3f}/{case.genuine[1]:.3f} "
              f"vs morph {case.to_morph[0]:.3f}/{case.to_morph[1]:.3f} {'ok' if case.passed else 'FAIL'}")
    print(f"loss {result.first_loss:.4f} -> {result.final_loss:.4f}; "
          f"{result.n_passed}/{len(result.cases)} cases; "
          f"train {result.train_seconds:.0f} s, sample {result.sample_seconds:.0f} s")


if __name__ == "__main__":
    main()
