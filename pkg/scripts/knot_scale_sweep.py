"""Median cluster-area SD and unreachable-face share of three energy variants
on the torus knot at several scales."""
import argparse

import numpy as np

from surfcover import shapes
from surfcover.ccvt import EnergyParams, segment
from surfcover.metrics import area_sd, unreachable_faces


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scales", type=float, nargs="+", default=[0.015, 0.02, 0.03, 0.045, 0.07])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--variants", nargs="+", default=["l1n", "l2n", "l2"])
    args = ap.parse_args()

    print("scale\tm\tvariant\tarea_sd\tunreach_pct")
    for scale in args.scales:
        mesh = shapes.builtin(f"knot:{scale}")
        med = {}
        for v in args.variants:
            params = EnergyParams.defaults(mesh, v)
            runs = [segment(mesh, params, seed=s) for s in range(args.seeds)]
            sd = float(np.median([area_sd(t) for t in runs]))
            un = float(np.median([unreachable_faces(mesh, t)[1] for t in runs]))
            med[v] = sd
            print(f"{scale}\t{runs[0].m}\t{v}\t{sd:.3g}\t{un:.1f}", flush=True)
        if "l1n" in med and "l2n" in med:
            print(f"{scale}\tratio l1n/l2n area SD {med['l1n'] / med['l2n']:.3f}")


if __name__ == "__main__":
    main()
