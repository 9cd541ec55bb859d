"""Why tiling exists: transient memory, patch mode vs whole-image mode.

Runs untrained inference at growing image sizes in both modes and
prints the transient footprint each one needed beyond the resident
weights. Patch mode stays flat because a tile's intermediates die
before the next tile starts; whole-image mode grows with area and its
attention matrices grow with area squared.
"""

import numpy as np

from dualseg import ModelParams, forward_infer, plan_grid
from dualseg.harness.config import RunConfig
from dualseg.harness.train import bench_memory

cfg = RunConfig(stage_channels=(8, 8, 8),
                downsample=(True, True, True)).validate()
params = ModelParams(cfg.backbone(), cfg.num_classes,
                     rng=np.random.default_rng(0))
settings = cfg.settings()

print(f"{'side':>6} {'mode':>8} {'transient':>14}")
for side in (64, 128, 256):
    image = np.random.default_rng(side).random((3, side, side))
    for mode in ("patch", "global"):
        grid = (plan_grid(side, side, cfg.patch, cfg.overlap)
                if mode == "patch" else None)
        report = {}
        forward_infer(image, grid, params, settings, mode=mode,
                      mem_report=report)
        print(f"{side:>6} {mode:>8} {report['transient_bytes']:>14,}")

print("\nthe packaged benchmark pins this as ratios:")
rep = bench_memory()
print(f"  patch growth 128->256:  x{rep['patch_growth']:.2f}")
print(f"  global growth 128->256: x{rep['global_growth']:.2f}")
print(f"  patch < global at 256^2: {rep['patch_below_global_at_large']}")
