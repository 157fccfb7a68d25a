#!/usr/bin/env python3
"""Quick end-to-end pipeline run at reduced scale (~1 minute).

Exercises every stage on a small grid so a broken install is caught fast.
Artifacts land in --out; re-running resumes from what is already there.
"""

import argparse
import sys
import time

from qpat.phantom import SamplerConfig
from qpat.pipeline import PipelineConfig, run_pipeline
from qpat.recon import ReconConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/smoke", help="output directory")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--photons", type=int, default=50_000)
    ap.add_argument("--no-resume", action="store_true")
    args = ap.parse_args()

    config = PipelineConfig(
        seed=args.seed,
        n_phantoms=4,
        n_train=2,
        sampler=SamplerConfig(inclusion_count=(1, 2)),
        grid_dims=(48, 48, 48),
        voxel_mm=0.6,
        n_photons=args.photons,
        dt_us=0.1,
        n_steps=380,
        recon=ReconConfig(grid_size=100, crop_size=96, highcut_mhz=4.0),
    )
    t0 = time.time()
    manifest = run_pipeline(config, args.out, resume=not args.no_resume)
    print(f"completed {len(manifest.artifacts)} artifacts "
          f"in {time.time() - t0:.1f} s -> {args.out}")
    print(f"manifest hash {manifest.manifest_hash}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
