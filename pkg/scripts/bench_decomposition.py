"""Time submesh decomposition against the full-mesh baseline and count
pairs where the decomposition comes out cheaper."""
import argparse
import time

import numpy as np

from surfcover import shapes
from surfcover.ccvt import EnergyParams, segment
from surfcover.geodesic import full_mesh_generator_costs, generator_graph, make_backend


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mesh", default="sphere:23")
    ap.add_argument("--clusters", type=int, default=50)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--backend", choices=["steiner", "exact"], default="exact")
    args = ap.parse_args()

    mesh = shapes.builtin(args.mesh)
    backend = make_backend(args.backend)
    backend.prepare(mesh)
    print("seed\tdecomp_s\tfull_s\tspeedup\tviolations\tmin_ratio\tmedian_ratio")
    for seed in args.seeds:
        tess = segment(mesh, EnergyParams.defaults(mesh, m=args.clusters), seed=seed)
        t0 = time.perf_counter()
        dec = generator_graph(mesh, tess, backend).cost_matrix()
        td = time.perf_counter() - t0
        t0 = time.perf_counter()
        full = full_mesh_generator_costs(mesh, tess, backend)
        tf = time.perf_counter() - t0
        iu = np.triu_indices(tess.m, 1)
        r = dec[iu] / full[iu]
        print(f"{seed}\t{td:.2f}\t{tf:.2f}\t{tf / td:.1f}\t{int((r < 1).sum())}\t{r.min():.6f}\t{np.median(r):.4f}",
              flush=True)


if __name__ == "__main__":
    main()
