"""Run-scale plumbing: config files, synthetic data, I/O, loops, CLI."""

from .config import (RunConfig, parse_config, parse_config_text,
                     preset_ablation, preset_convergence)
from .data import SyntheticScene, gen_data, generate_scene
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

__all__ = [
    "RunConfig",
    "SyntheticScene",
    "gen_data",
    "generate_scene",
    "parse_config",
    "parse_config_text",
    "preset_ablation",
    "preset_convergence",
    "read_pgm",
    "read_ppm",
    "write_pgm",
    "write_ppm",
]
