"""Lattice-coded over-the-air federated learning simulator.

Devices quantize normalized model updates onto a shared lattice with
subtractive dithering and transmit them simultaneously over a simulated
multi-antenna fading multiple-access channel.  The server equalizes the
superimposed signal, decodes an integer combination of the quantized updates
as a single lattice point, and turns it into an unbiased weighted global
update, choosing the integer weights round by round from an aggregation
metric.
"""

__version__ = "0.1.0"

from .bound import BoundConstants, estimate_gradient_variance, optimality_gap_bound, round_terms
from .channel import ChannelConfig, ChannelRealization, propagate, sample_channel
from .config import (
    ExperimentConfig,
    PRESETS,
    config_from_dict,
    config_hash,
    config_to_dict,
    default_config_dict,
    load_config,
    preset_variants,
)
from .encoding import (
    LocalUpdate,
    NormalizedUpdate,
    TransmitSignal,
    dithered_quantize,
    normalize_or_floor,
    normalize_update,
    scale_for_transmit,
)
from .errors import ConfigurationError, DegenerateUpdateError
from .lattices import (
    LatticeSpec,
    brute_force_nearest,
    e8_lattice,
    hexagonal_lattice,
    identity_lattice,
    make_lattice,
    nearest_point,
    packing_radius,
    quantize_blocks,
    sample_dither,
    second_moment,
)
from .learning import (
    MLPModel,
    ShardedDataset,
    SoftmaxModel,
    TrainingConfig,
    build_model,
    evaluate,
    ideal_aggregate,
    load_idx,
    load_idx_dataset,
    local_sgd_steps,
    make_blobs,
    partition_dataset,
)
from .receiver import (
    DecodedCombination,
    GlobalUpdateEstimate,
    decode_combination,
    decoding_mse,
    estimate_global_update,
    optimal_equalizer,
    optimal_eta,
    quantization_mse,
)
from .selection import (
    CoefficientVector,
    MetricParams,
    SelectionConfig,
    aggregation_metric,
    brute_force_oracle,
    coefficient_mismatch,
    default_theta,
    select_coefficients,
    solve_relaxation,
)
from .simulate import (
    ExperimentResult,
    Purpose,
    RoundMetrics,
    derive_rng,
    run_experiment,
    run_round,
    run_seed,
    setup_simulation,
)
