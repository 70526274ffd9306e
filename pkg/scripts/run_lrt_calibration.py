"""Empirical size and power of a nested likelihood-ratio test.

Size uses the uniform generator; power uses a fixed-bias generator whose
weights favour one chair by ``--bias``.

    python3 scripts/run_lrt_calibration.py --null m6 --alt m4 --reps 200
"""

import argparse
import json
from pathlib import Path

from caseaudit.model import CourtConfig, ModelSpec
from caseaudit.simulate import GeneratorSpec, lrt_calibration


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--null", default="m6")
    ap.add_argument("--alt", default="m4")
    ap.add_argument("--chairs", type=int, default=5)
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--days", type=int, default=60)
    ap.add_argument("--intensity", type=float, default=10.0)
    ap.add_argument("--bias", type=float, default=2.0, help="weight of the favoured chair (others 1)")
    ap.add_argument("--favoured", type=int, default=3)
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--alpha", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", type=Path, default=Path("lrt_calibration.json"))
    args = ap.parse_args(argv)

    cfg = CourtConfig(args.chairs, tuple(f"k{i}" for i in range(args.classes)))
    null, alt = ModelSpec(args.null, cfg), ModelSpec(args.alt, cfg)
    base = GeneratorSpec(n_days=args.days, intensities=args.intensity)
    weights = tuple(args.bias if j == args.favoured else 1.0 for j in range(1, args.chairs + 1))
    biased = GeneratorSpec(rule="fixed_bias", weights=weights, n_days=args.days, intensities=args.intensity)
    size = lrt_calibration(null, alt, base, args.reps, args.alpha, seed=args.seed)
    power = lrt_calibration(null, alt, biased, args.reps, args.alpha, seed=args.seed + 1)
    args.out.write_text(json.dumps({"size": size.to_dict(), "power": power.to_dict()}, indent=2) + "\n")
    print(f"{args.null} vs {args.alt}, alpha {args.alpha}, {args.reps} reps")
    print(f"  size  {size.rejection_rate:.3f}  ({len(size.errors)} failed)")
    print(f"  power {power.rejection_rate:.3f}  ({len(power.errors)} failed, weights {weights})")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
