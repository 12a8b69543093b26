"""Offline RL with Morse-network behavioral supervision (C++ core)."""

from ._bstlab import (
    ArgumentError,
    ConfigError,
    DimensionError,
    EnvSpec,
    Error,
    FormatError,
    KernelKind,
    KernelSpec,
    MorseModel,
    NumericError,
    Policy,
    ReplayDataset,
    StateError,
    UnsupportedError,
    content_hash,
    dataset_from_bytes,
    derive_seed,
    disadvantage_weight,
    evaluate,
    four_mode_centers,
    four_mode_dataset,
    generate_maze_dataset,
    kernel_eval,
    load_dataset,
    load_morse,
    load_policy,
    permuted_actions,
    q_scale,
    step,
    train_morse,
    waypoint_oracle,
)
from ._bstlab import cli as _cli


def cli(*args):
    """Run a bst subcommand in-process; returns (exit_code, stdout, stderr)."""
    return _cli([str(a) for a in args])


__all__ = [name for name in dir() if not name.startswith("_")]
