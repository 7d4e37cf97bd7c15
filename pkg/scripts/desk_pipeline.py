"""Run generate-morphs, train, demorph and evaluate end to end on synthetic faces.

    python3 scripts/desk_pipeline.py --out runs/desk --epochs 50
"""
import argparse
import json
import sys
from pathlib import Path

from demorph.cli import main as demorph


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], help="extra config override")
    args = p.parse_args()
    common = ["--out-dir", args.out, "--seed", str(args.seed)] + [x for kv in args.set for x in ("--set", kv)]
    for command in (["generate-morphs"], ["train", "--epochs", str(args.epochs)], ["demorph"], ["evaluate"]):
        code = demorph(command + common)
        if code:
            sys.exit(code)
    report = json.loads((Path(args.out) / "eval" / "report.json").read_text())
    print(json.dumps({k: report[k] for k in ("tmr_at_fmr", "restoration_accuracy", "psnr_mean", "ssim_mean")},
                     indent=2))


if __name__ == "__main__":
    main()
