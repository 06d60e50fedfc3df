#!/usr/bin/env python3
"""
Per-sweep cost of the stage 1 sampler across growing (n, p).

Generates thresholded-Gaussian data at each grid point, times a short stage 1
chain and fits wall time per sweep against n*p.

Usage:
    python benchmark_scaling.py
    python benchmark_scaling.py --sweeps 200 --phi0 0.9 --out scaling.csv

Environment Variables:
    BENCHMARK_SWEEPS=100    # Timed sweeps per grid point
"""

import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence, Tuple

import pandas as pd
from scipy import stats

from core.gibbs import run_stage1
from shared.errors import BaconError
from shared.models import ChainSettings, ContaminationModel, PdpHyper, SweepSchedule
from synth.generators import gen_threshold_normal

GRID: List[Tuple[int, int]] = [(10 * k, 25 * k) for k in range(2, 11)]


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Stage 1 per-sweep cost versus n*p")
    parser.add_argument('--sweeps', type=int, default=int(os.getenv('BENCHMARK_SWEEPS', 100)),
                        help='Timed sweeps per grid point (default: 100)')
    parser.add_argument('--burn_in', type=int, default=20, help='Burn-in sweeps (default: 20)')
    parser.add_argument('--phi0', type=float, default=0.95, help='Within-cluster correlation (default: 0.95)')
    parser.add_argument('--seed', type=int, default=1)
    parser.add_argument('--out', help='Optional CSV of the per-point timings')
    return parser.parse_args(argv)


def time_grid(sweeps: int, burn_in: int, phi0: float, seed: int,
              grid: Sequence[Tuple[int, int]] = GRID) -> pd.DataFrame:
    rows = []
    for n, p in grid:
        matrix, _ = gen_threshold_normal(n=n, p=p, phi0=phi0, seed=seed)
        # seconds_per_sweep averages over burn-in and kept sweeps
        result = run_stage1(
            matrix.bits,
            SweepSchedule(),
            ChainSettings(burn_in=burn_in, kept=sweeps, thin=sweeps, seed=seed, log_every=10**9),
            PdpHyper(),
            ContaminationModel(),
        )
        rows.append({"n": n, "p": matrix.p, "np": n * matrix.p, "seconds_per_sweep": result.seconds_per_sweep})
        print(f"✓ (n={n}, p={matrix.p}): {1000 * result.seconds_per_sweep:.2f} ms/sweep")
    return pd.DataFrame(rows)


def linear_fit(frame: pd.DataFrame) -> Tuple[float, float, float]:
    """Slope, intercept and R^2 of seconds per sweep against n*p."""
    fit = stats.linregress(frame["np"], frame["seconds_per_sweep"])
    return float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_arguments(argv)
    print("🚀 Stage 1 scaling benchmark")
    print(f"📊 {len(GRID)} grid points, {args.sweeps} sweeps each, phi0={args.phi0}")
    try:
        frame = time_grid(args.sweeps, args.burn_in, args.phi0, args.seed)
    except BaconError as e:
        print(f"✗ {e}")
        return e.exit_code
    slope, intercept, r2 = linear_fit(frame)
    print()
    print(f"📈 seconds/sweep ≈ {slope:.3e} * np + {intercept:.3e}   (R² = {r2:.4f})")
    if args.out:
        frame.to_csv(args.out, index=False)
        print(f"✓ Timings written to {args.out}")
    return 0


if __name__ == "__main__":
    logging.basicConfig(
        level=logging.WARNING,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    sys.exit(main())
