"""Per-round simulation loop, hierarchical seeding, and metrics persistence.

Every random draw descends from (global seed, purpose, round, device) through
``derive_rng``, so a (config, seed) pair fully determines a run; the dither
streams in particular are re-derived on the server side, which is how the
simulator realizes the shared randomness between devices and server.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import os
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import __version__
from .bound import round_terms
from .channel import propagate, sample_channel
from .config import ExperimentConfig, config_hash, config_to_dict
from .encoding import (
    NormalizedUpdate,
    dithered_quantize,
    normalize_or_floor,
    pad_to_blocks,
    scale_for_transmit,
)
from .errors import ConfigurationError
from .lattices import LatticeSpec, ensure_second_moment, make_lattice, sample_dither
from .learning import (
    ShardedDataset,
    build_model,
    evaluate,
    ideal_aggregate,
    load_idx_dataset,
    local_sgd_steps,
    make_blobs,
    partition_dataset,
)
from .receiver import (
    decode_combination,
    decoding_mse,
    estimate_global_update,
    optimal_equalizer,
    optimal_eta,
    quantization_mse,
)
from .selection import MetricParams, SelectionConfig, default_theta, select_coefficients


class Purpose(IntEnum):
    """Namespaces of the hierarchical seed derivation."""

    DATA = 0
    PARTITION = 1
    INIT = 2
    SECOND_MOMENT = 3
    BATCH = 4
    DITHER = 5
    CHANNEL = 6
    NOISE = 7


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent PCG64 stream for (seed, purpose, round, device, ...)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class RoundMetrics:
    """One row of the per-round metrics table."""

    round: int
    dmse: float
    qmse: float
    metric: float
    decode_error: bool
    selection_fallback: bool
    a_sum: float
    mismatch: float
    gap_bound: float
    test_loss: float
    test_accuracy: float


@dataclass
class SimulationState:
    seed: int
    round: int
    w: np.ndarray
    model: object
    shards: ShardedDataset
    test_x: np.ndarray
    test_y: np.ndarray
    lattice: LatticeSpec
    sigma_q2: float
    sel_cfg: SelectionConfig
    gap_bound: float


def _make_dataset(cfg: ExperimentConfig, rng: np.random.Generator):
    d = cfg.dataset
    if d.kind == "blobs":
        train_x, train_y, centers = make_blobs(
            d.num_train, d.feature_dim, d.num_classes, d.cluster_std, rng,
            center_spread=d.center_spread,
        )
        test_x, test_y, _ = make_blobs(
            d.num_test, d.feature_dim, d.num_classes, d.cluster_std, rng, centers=centers
        )
        return train_x, train_y, test_x, test_y
    if d.kind == "idx":
        if not (d.train_images and d.train_labels and d.test_images and d.test_labels):
            raise ConfigurationError("idx datasets need all four file paths")
        train_x, train_y = load_idx_dataset(d.train_images, d.train_labels, d.num_train)
        test_x, test_y = load_idx_dataset(d.test_images, d.test_labels, d.num_test)
        return train_x, train_y, test_x, test_y
    raise ConfigurationError(f"unknown dataset kind {d.kind!r}")


def setup_simulation(cfg: ExperimentConfig, seed: int) -> SimulationState:
    train_x, train_y, test_x, test_y = _make_dataset(cfg, derive_rng(seed, Purpose.DATA))
    shards = partition_dataset(
        train_x,
        train_y,
        cfg.channel.num_devices,
        cfg.dataset.partition,
        derive_rng(seed, Purpose.PARTITION),
        cfg.dataset.dirichlet_alpha,
    )
    model = build_model(cfg.model.kind, shards.feature_dim, shards.num_classes, cfg.model.hidden_dim)
    w0 = model.init_params(derive_rng(seed, Purpose.INIT))
    lattice = make_lattice(cfg.lattice.name, cfg.lattice.rho)
    sigma_q2 = ensure_second_moment(
        lattice, cfg.lattice.second_moment_samples, derive_rng(seed, Purpose.SECOND_MOMENT)
    )
    s_padded = pad_to_blocks(w0, lattice.block_dim).size
    theta = cfg.selection.theta
    if theta is None:
        theta = default_theta(lattice, s_padded)
    sel_cfg = SelectionConfig(
        theta=theta,
        epsilon=cfg.selection.epsilon,
        max_iters=cfg.selection.max_iters,
        qp_tolerance=cfg.selection.qp_tolerance,
        brute_force_bound=cfg.selection.brute_force_bound,
    )
    return SimulationState(
        seed=seed,
        round=0,
        w=w0,
        model=model,
        shards=shards,
        test_x=test_x,
        test_y=test_y,
        lattice=lattice,
        sigma_q2=sigma_q2,
        sel_cfg=sel_cfg,
        gap_bound=cfg.constants.initial_gap,
    )


def run_round(state: SimulationState, cfg: ExperimentConfig) -> RoundMetrics:
    """Advance the global model by one communication round."""
    t = state.round
    seed = state.seed
    lr = cfg.training.rate_at(t)
    num_devices = cfg.channel.num_devices
    try:
        updates = [
            local_sgd_steps(
                state.model,
                state.w,
                state.shards.shards[k],
                cfg.training,
                derive_rng(seed, Purpose.BATCH, t, k),
                device_id=k,
                lr=lr,
            )
            for k in range(num_devices)
        ]

        if cfg.scheme == "ideal_fedavg":
            delta_w_g = ideal_aggregate(updates)
            sgd_noise = lr**2 * cfg.constants.gradient_variance / cfg.training.batch_size
            metrics = dict(
                dmse=0.0,
                qmse=0.0,
                metric=sgd_noise * cfg.training.tau / num_devices,
                decode_error=False,
                selection_fallback=False,
                a_sum=float(num_devices),
                mismatch=1.0 / num_devices,
            )
            a = np.ones(num_devices)
            qmse = 0.0
        else:
            delta_w_g, a, qmse, metrics = _fedcpu_round(state, cfg, updates, lr)
    except Exception as exc:
        exc.args = (f"round {t}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        raise

    state.w = state.w + delta_w_g
    c_t, b_t, l_t = round_terms(
        lr,
        cfg.training.tau,
        cfg.constants.pl_constant,
        cfg.constants.lipschitz,
        cfg.constants.gradient_variance,
        cfg.training.batch_size,
        a,
        qmse,
    )
    state.gap_bound = c_t * state.gap_bound + b_t + cfg.constants.lipschitz / 2.0 * l_t
    test_loss, test_accuracy = evaluate(state.model, state.w, state.test_x, state.test_y)
    state.round += 1
    return RoundMetrics(
        round=t,
        gap_bound=state.gap_bound,
        test_loss=test_loss,
        test_accuracy=test_accuracy,
        **metrics,
    )


def _fedcpu_round(state: SimulationState, cfg: ExperimentConfig, updates, lr: float):
    """Encode, transmit, select coefficients, decode, and estimate the update."""
    seed, t = state.seed, state.round
    lattice, sigma_q2 = state.lattice, state.sigma_q2
    power, snr = cfg.channel.power, cfg.channel.snr
    s = state.w.size

    normalized = [normalize_or_floor(u) for u in updates]
    sigmas = np.array([nu.std for nu in normalized])
    means = np.array([nu.mean for nu in normalized])

    dithers = []
    quantized = []
    signals = []
    for k, nu in enumerate(normalized):
        padded = NormalizedUpdate(pad_to_blocks(nu.w_hat, lattice.block_dim), nu.mean, nu.std)
        dither = sample_dither(lattice, padded.w_hat.size, derive_rng(seed, Purpose.DITHER, t, k))
        w_bar = dithered_quantize(padded, lattice, dither)
        signals.append(scale_for_transmit(w_bar, power, sigma_q2, dither).x)
        dithers.append(dither)
        quantized.append(w_bar)
    quantized = np.stack(quantized)
    transmit = np.stack(signals)
    s_padded = transmit.shape[1]

    h = sample_channel(cfg.channel, derive_rng(seed, Purpose.CHANNEL, t))
    params = MetricParams(
        mu=lr,
        gradient_variance=cfg.constants.gradient_variance,
        batch_size=cfg.training.batch_size,
        tau=cfg.training.tau,
        sigmas=sigmas,
        sigma_q2=sigma_q2,
        model_size=s,
    )
    coeff = select_coefficients(h, snr, sigma_q2, state.sel_cfg, params)
    a = coeff.a.astype(float)

    received = propagate(h, transmit, cfg.channel.noise_variance, derive_rng(seed, Purpose.NOISE, t))
    b = optimal_equalizer(h, a, snr)
    dmse = decoding_mse(h, a, snr, sigma_q2, s_padded)
    decoded = decode_combination(received, b, lattice, power, sigma_q2, a, true_point=a @ quantized)

    # Server-side dither reconstruction from the shared seed derivation.
    server_dithers = np.stack(
        [
            sample_dither(lattice, s_padded, derive_rng(seed, Purpose.DITHER, t, k))
            for k in range(len(updates))
        ]
    )
    eta = optimal_eta(a, sigmas, sigma_q2)
    qmse = quantization_mse(a, sigmas, sigma_q2, s)
    estimate = estimate_global_update(decoded, server_dithers, a, means, eta, dmse, qmse)

    metrics = dict(
        dmse=dmse,
        qmse=qmse,
        metric=coeff.metric,
        decode_error=bool(decoded.decode_error),
        selection_fallback=coeff.fallback,
        a_sum=float(a.sum()),
        mismatch=float((a @ a) / a.sum() ** 2),
    )
    return estimate.delta_w_g[:s], a, qmse, metrics


def run_seed(cfg: ExperimentConfig, seed: int) -> list[RoundMetrics]:
    state = setup_simulation(cfg, seed)
    return [run_round(state, cfg) for _ in range(cfg.rounds)]


@dataclass
class ExperimentResult:
    config_hash: str
    per_seed: dict[int, list[RoundMetrics]]
    aggregate: list[dict]
    output_dir: str | None = None
    files: list[str] = field(default_factory=list)

    def final_accuracies(self) -> np.ndarray:
        return np.array([rows[-1].test_accuracy for rows in self.per_seed.values() if rows])

    def decode_error_rate(self) -> float:
        rows = [m for rows in self.per_seed.values() for m in rows]
        if not rows:
            return 0.0
        return float(np.mean([m.decode_error for m in rows]))


def _seed_job(args: tuple[ExperimentConfig, int]) -> tuple[int, list[RoundMetrics]]:
    cfg, seed = args
    return seed, run_seed(cfg, seed)


ROUNDS_COLUMNS = [
    "config_hash",
    "seed",
    "round",
    "scheme",
    "dmse",
    "qmse",
    "metric",
    "decode_error",
    "selection_fallback",
    "a_sum",
    "mismatch",
    "gap_bound",
    "test_loss",
    "test_accuracy",
]

AGGREGATE_COLUMNS = [
    "config_hash",
    "round",
    "num_seeds",
    "dmse_mean",
    "qmse_mean",
    "metric_mean",
    "decode_error_rate",
    "fallback_rate",
    "gap_bound_mean",
    "test_loss_mean",
    "test_accuracy_mean",
    "test_accuracy_std",
]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def run_experiment(cfg: ExperimentConfig, output_dir: str | None = None) -> ExperimentResult:
    """Run every configured seed, aggregate across seeds, and persist CSVs.

    Writes ``rounds.csv`` (one row per seed and round), ``aggregate.csv`` (one
    row per round, averaged across seeds), and ``manifest.json`` (the resolved
    config plus its hash) when an output directory is set.
    """
    doc = config_to_dict(cfg)
    digest = config_hash(doc)
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            pairs = list(pool.map(_seed_job, [(cfg, seed) for seed in cfg.seeds]))
        per_seed = dict(pairs)
    else:
        per_seed = {seed: run_seed(cfg, seed) for seed in cfg.seeds}
    aggregate = _aggregate_rows(per_seed, digest, cfg.rounds)

    result = ExperimentResult(digest, per_seed, aggregate)
    out = output_dir if output_dir is not None else cfg.output_dir
    if out:
        os.makedirs(out, exist_ok=True)
        rounds_path = os.path.join(out, "rounds.csv")
        with open(rounds_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(ROUNDS_COLUMNS)
            for seed in cfg.seeds:
                for row in per_seed[seed]:
                    writer.writerow(
                        [
                            digest,
                            seed,
                            row.round,
                            cfg.scheme,
                            _fmt(row.dmse),
                            _fmt(row.qmse),
                            _fmt(row.metric),
                            _fmt(row.decode_error),
                            _fmt(row.selection_fallback),
                            _fmt(row.a_sum),
                            _fmt(row.mismatch),
                            _fmt(row.gap_bound),
                            _fmt(row.test_loss),
                            _fmt(row.test_accuracy),
                        ]
                    )
        agg_path = os.path.join(out, "aggregate.csv")
        with open(agg_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(AGGREGATE_COLUMNS)
            for row in aggregate:
                writer.writerow([_fmt(row[col]) for col in AGGREGATE_COLUMNS])
        manifest_path = os.path.join(out, "manifest.json")
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(
                {"config_hash": digest, "package_version": __version__, "config": doc},
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")
        result.output_dir = out
        result.files = [rounds_path, agg_path, manifest_path]
    return result


def _aggregate_rows(
    per_seed: dict[int, list[RoundMetrics]], digest: str, rounds: int
) -> list[dict]:
    out = []
    for t in range(rounds):
        rows = [per_seed[seed][t] for seed in per_seed]
        acc = np.array([r.test_accuracy for r in rows])
        out.append(
            {
                "config_hash": digest,
                "round": t,
                "num_seeds": len(rows),
                "dmse_mean": float(np.mean([r.dmse for r in rows])),
                "qmse_mean": float(np.mean([r.qmse for r in rows])),
                "metric_mean": float(np.mean([r.metric for r in rows])),
                "decode_error_rate": float(np.mean([r.decode_error for r in rows])),
                "fallback_rate": float(np.mean([r.selection_fallback for r in rows])),
                "gap_bound_mean": float(np.mean([r.gap_bound for r in rows])),
                "test_loss_mean": float(np.mean([r.test_loss for r in rows])),
                "test_accuracy_mean": float(np.mean(acc)),
                "test_accuracy_std": float(np.std(acc)),
            }
        )
    return out
