"""Localisation error against the relative noise level.

Runs the single-inclusion cylinder at δ = 1, 3, 7 and 10 % with three seeds
each. The dipole projections depend only on the reconstruction setup, so they
are computed once and reused from the cache for every noise draw.

    python3 demos/noise_sweep.py [workdir]
"""

import logging
import sys
from pathlib import Path

import numpy as np

from eitfactor.config import ExperimentConfig
from eitfactor.fixtures import write_suite
from eitfactor.pipeline import run_reconstruct, run_simulate
from eitfactor.synth import add_noise


def main(workdir: Path) -> None:
    paths = write_suite(workdir, names=["cyl_2ring"])
    cfg = ExperimentConfig.load(paths["cyl_2ring"]).with_overrides(delta=0.0)
    clean = run_simulate(cfg).diff
    print(f"{'delta':>6}  {'seed':>4}  {'E_c':>7}  components")
    for delta in (0.01, 0.03, 0.07, 0.10):
        errs = []
        for seed in (1, 2, 3):
            noisy = add_noise(clean, delta, seed)
            rep = run_reconstruct(cfg, noisy, cache_dir=workdir / "cache").report
            e = rep.errors["full"]["mean"]
            errs.append(e)
            print(f"{delta:6.2f}  {seed:4d}  {e:7.4f}  {len(rep.components)}")
        print(f"{'':6}  mean  {np.mean(errs):7.4f}")


if __name__ == "__main__":
    logging.basicConfig(level=logging.WARNING)
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_noise"))
