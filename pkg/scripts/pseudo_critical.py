#!/usr/bin/env python3
"""Locate the operational critical point: smallest beta whose censored rate at the cap exceeds 1e-3."""

import argparse
import json
import time

from spreadperc.estimators import pseudo_critical_beta


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d", type=int, default=7)
    ap.add_argument("--L", type=int, default=1)
    ap.add_argument("--lower", type=float, default=1.0)
    ap.add_argument("--upper", type=float, default=1.2)
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--cap", type=int, default=1_000_000)
    ap.add_argument("--tol", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    t = time.time()
    pc = pseudo_critical_beta(args.d, args.L, args.lower, args.upper, args.n, args.cap, tol=args.tol, seed=args.seed)
    out = {"d": args.d, "L": args.L, "beta_c": pc.beta, "step": pc.step, "bracket": [pc.lower, pc.upper],
           "n": pc.n, "cap": pc.cap, "threshold": pc.threshold, "seconds": round(time.time() - t, 1)}
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
