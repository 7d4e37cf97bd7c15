"""Write the variance schedule (t, beta, alpha, alpha_bar, beta_tilde) to CSV."""
import argparse

from demorph.diffusion import linear_schedule

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("out", nargs="?", default="schedule.csv")
p.add_argument("--T", type=int, default=1000)
p.add_argument("--beta-start", type=float, default=1e-4)
p.add_argument("--beta-end", type=float, default=0.02)
args = p.parse_args()
s = linear_schedule(args.T, args.beta_start, args.beta_end)
s.to_csv(args.out)
print(f"wrote {args.T} rows to {args.out} (digest {s.digest()})")
