"""Communication accounting, rank traces, diagnostics, and bound evaluation.

Everything here is pure bookkeeping over values produced by the training loop:
per-round parameter/byte counts, per-layer truncation ranks, the drift ratio
diagnostic behind the rank-monotonicity guarantee, multiply-accumulate (MAC)
counts for dense versus factored inference, and the four-term convergence
bound with empirically estimated constants.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .compression import CompressedModel, layer_wire_size, transmitted_params
from .linalg import frobenius_norm

BROADCAST_ONCE = "once"
BROADCAST_PER_CLIENT = "per_client"


@dataclass(frozen=True)
class RoundRecord:
    """Everything measured at one aggregation round.

    Ranks are the selected truncation ranks (wire encoding does not change
    them); they are None for uncompressed (FedAvg) rounds, as are the drift
    ratios, which are also None when e == 1. Downlink counts honor the
    configured broadcast accounting (once vs per-client).
    """

    round_index: int
    global_iter: int
    uplink_ranks: tuple[tuple[int, ...], ...] | None  # [client][layer]
    downlink_ranks: tuple[int, ...] | None  # [layer]
    uplink_params_per_client: tuple[int, ...]
    uplink_params: int
    downlink_params: int
    uplink_bytes: int
    downlink_bytes: int
    cum_uplink_params: int
    cum_downlink_params: int
    cum_params: int
    cum_uplink_bytes: int
    cum_downlink_bytes: int
    train_loss: float
    test_accuracy: float
    test_loss: float
    lambdas: tuple[tuple[float, ...], ...] | None  # [layer][client]
    wall_time_s: float

    def lambda_max_per_layer(self) -> tuple[float, ...] | None:
        if self.lambdas is None:
            return None
        return tuple(max(per_client) for per_client in self.lambdas)


@dataclass
class RunTraces:
    """Running aggregates captured during training for constant estimation."""

    grad_norm_max: float = 0.0
    wtilde_norm_max: float = 0.0
    drift_max: float = 0.0
    batch_full_dev_max: float = 0.0
    lipschitz_max: float = 0.0
    lipschitz_samples: int = 0
    min_loss: float = math.inf


@dataclass
class MetricsLog:
    """Config echo plus the per-round records of one training run."""

    config: dict
    layer_shapes: tuple[tuple[int, int], ...]
    records: list[RoundRecord] = field(default_factory=list)
    traces: RunTraces | None = None

    def final_accuracy(self) -> float:
        return self.records[-1].test_accuracy if self.records else 0.0

    def total_params(self) -> int:
        return self.records[-1].cum_params if self.records else 0


def lambda_diagnostic(
    w_tilde, w_prev_global, c2_w_tilde, avg_c2, e: float
) -> list[float]:
    """Per-layer drift ratio checking the bounded-weight-difference assumption.

    For each layer:
        max(||wt - wp||_F, ||C2(wt) - wp||_F)
        / (sqrt(1 - e) * min(||wt||_F, ||avgC2||_F))
    Values <= 1 are the regime in which truncation ranks cannot grow. A zero
    denominator yields +inf with a warning rather than an exception.
    """
    if not 0.0 < e < 1.0:
        raise ValueError("the drift ratio is defined only for e in (0, 1)")
    layers = list(zip(w_tilde, w_prev_global, c2_w_tilde, avg_c2))
    out = []
    scale = math.sqrt(1.0 - e)
    for idx, (wt, wp, c2, avg) in enumerate(layers):
        if not (wt.shape == wp.shape == c2.shape == avg.shape):
            raise ValueError(f"layer {idx}: shapes disagree")
        num = max(frobenius_norm(wt - wp), frobenius_norm(c2 - wp))
        den = scale * min(frobenius_norm(wt), frobenius_norm(avg))
        if den == 0.0:
            warnings.warn(
                f"layer {idx}: zero denominator in drift ratio, reporting inf",
                RuntimeWarning,
                stacklevel=2,
            )
            out.append(math.inf if num > 0.0 else 0.0)
        else:
            out.append(num / den)
    return out


def mac_ratio(dense_macs: float, lowrank_macs: float) -> float:
    """Dense-over-factored MAC quotient (inference efficiency factor)."""
    if lowrank_macs <= 0.0:
        raise ValueError("low-rank MAC count must be positive")
    return dense_macs / lowrank_macs


@dataclass(frozen=True)
class MacReport:
    dense_macs: int
    lowrank_macs: int
    params_dense: int
    params_lowrank: int
    mac_ratio: float


def mac_count(layer_shapes, ranks=None) -> MacReport:
    """Per-sample MAC and parameter counts for dense vs factored layers.

    A dense (m, n) layer costs m*n MACs; with rank r it costs r*(m+n) when
    that is smaller, else it stays dense. Biases count as parameters but not
    as MACs (accumulate-only convention). ``ranks`` may be None (all dense) or
    one rank per layer with 1 <= r <= min(m, n).
    """
    shapes = [(int(m), int(n)) for m, n in layer_shapes]
    if ranks is not None:
        ranks = [int(r) for r in ranks]
        if len(ranks) != len(shapes):
            raise ValueError("need exactly one rank per layer")
        for (m, n), r in zip(shapes, ranks):
            if not 1 <= r <= min(m, n):
                raise ValueError(f"rank {r} out of range for a {m}x{n} layer")
    dense_macs = sum(m * n for m, n in shapes)
    params_dense = sum(m * n + m for m, n in shapes)
    if ranks is None:
        lowrank_macs = dense_macs
        params_lowrank = params_dense
    else:
        lowrank_macs = 0
        params_lowrank = 0
        for (m, n), r in zip(shapes, ranks):
            cost = r * (m + n) if r * (m + n) < m * n else m * n
            lowrank_macs += cost
            params_lowrank += cost + m
    return MacReport(
        dense_macs=dense_macs,
        lowrank_macs=lowrank_macs,
        params_dense=params_dense,
        params_lowrank=params_lowrank,
        mac_ratio=mac_ratio(dense_macs, lowrank_macs),
    )


@dataclass(frozen=True)
class ConvergenceConstants:
    """Constants entering the convergence bound; estimates are lower bounds
    ("empirical lower estimates") when produced by estimate_constants."""

    smoothness: float  # L
    grad_bound: float  # G1
    weight_bound: float  # G2
    drift_bound: float  # G3
    grad_variance: float  # delta
    f_star: float
    aggregations: int  # H
    batch_size: int
    clients: int
    local_iters: int
    total_iters: int
    e: float
    eta: float


@dataclass(frozen=True)
class BoundTerms:
    init_term: float
    variance_term: float
    drift_term: float
    compression_term: float
    total: float


def bound_rhs(c: ConvergenceConstants, f0: float) -> BoundTerms:
    """The four summands of the stationarity bound and their total.

    term1 = (f0 - f*) / (eta T)          initial suboptimality
    term2 = eta L delta^2 / (b K)        local SGD variance
    term3 = 2 eta^2 L^2 G1^2 R^2         client drift between aggregations
    term4 = 4 (1 - e^2) H L^2 G2^2 / T   compression error, zero at e = 1
    """
    if min(c.total_iters, c.batch_size, c.clients, c.local_iters) < 1:
        raise ValueError("T, b, K, R must all be >= 1")
    if c.eta <= 0.0:
        raise ValueError("eta must be positive")
    t1 = (f0 - c.f_star) / (c.eta * c.total_iters)
    t2 = c.eta * c.smoothness * c.grad_variance**2 / (c.batch_size * c.clients)
    t3 = 2.0 * c.eta**2 * c.smoothness**2 * c.grad_bound**2 * c.local_iters**2
    t4 = (
        4.0
        * (1.0 - c.e**2)
        * c.aggregations
        * c.smoothness**2
        * c.weight_bound**2
        / c.total_iters
    )
    return BoundTerms(
        init_term=t1,
        variance_term=t2,
        drift_term=t3,
        compression_term=t4,
        total=t1 + t2 + t3 + t4,
    )


def estimate_lipschitz(points, gradients) -> float:
    """max ||g(x_{i+1}) - g(x_i)|| / ||x_{i+1} - x_i|| over consecutive pairs.

    Pairs with identical points are skipped; returns 0.0 with no usable pair.
    """
    best = 0.0
    for (x0, g0), (x1, g1) in zip(zip(points, gradients), zip(points[1:], gradients[1:])):
        dx = float(np.linalg.norm(np.asarray(x1) - np.asarray(x0)))
        if dx == 0.0:
            continue
        dg = float(np.linalg.norm(np.asarray(g1) - np.asarray(g0)))
        best = max(best, dg / dx)
    return best


def estimate_constants(log: MetricsLog, traces: RunTraces) -> ConvergenceConstants:
    """Assemble empirical lower estimates of the bound constants from traces.

    All norms are over the full parameter vector. f* is the minimum observed
    training loss; the reported eta is the schedule's initial step size.
    """
    if traces is None:
        raise ValueError("run was executed without trace capture")
    cfg = log.config
    return ConvergenceConstants(
        smoothness=traces.lipschitz_max,
        grad_bound=traces.grad_norm_max,
        weight_bound=traces.wtilde_norm_max,
        drift_bound=traces.drift_max,
        grad_variance=traces.batch_full_dev_max,
        f_star=0.0 if math.isinf(traces.min_loss) else traces.min_loss,
        aggregations=len(log.records),
        batch_size=int(cfg["batch_size"]),
        clients=int(cfg["clients"]),
        local_iters=int(cfg["local_iters"]),
        total_iters=int(cfg["total_iters"]),
        e=float(cfg["e_client"]),
        eta=float(cfg["lr_eta0"]),
    )


def comm_accounting(
    uploads: list[CompressedModel],
    broadcast: CompressedModel,
    broadcast_count: str = BROADCAST_PER_CLIENT,
) -> tuple[int, int, int, int]:
    """(uplink params, downlink params, uplink bytes, downlink bytes).

    Uplink sums transmitted parameters over all client uploads. Downlink counts
    the broadcast once, or once per client when ``broadcast_count`` is
    "per_client" (the default, matching uplink symmetry in a star topology).
    """
    if broadcast_count not in (BROADCAST_ONCE, BROADCAST_PER_CLIENT):
        raise ValueError(f"unknown broadcast accounting mode {broadcast_count!r}")
    up_params = sum(transmitted_params(l) for cm in uploads for l in cm.layers)
    up_bytes = sum(layer_wire_size(l) for cm in uploads for l in cm.layers)
    down_params = sum(transmitted_params(l) for l in broadcast.layers)
    down_bytes = sum(layer_wire_size(l) for l in broadcast.layers)
    if broadcast_count == BROADCAST_PER_CLIENT:
        replicas = max(len(uploads), 1)
        down_params *= replicas
        down_bytes *= replicas
    return up_params, down_params, up_bytes, down_bytes


@dataclass(frozen=True)
class RankCheckResult:
    """Outcome of the empirical rank-monotonicity audit.

    A (layer, client, round) triple participates once round >= 1. Rounds where
    every recorded drift ratio is <= 1 are "gated": there the broadcast rank
    must not grow and every upload rank must not exceed the previous broadcast
    rank. Violations elsewhere are reported, not asserted.
    """

    gated_rounds: int
    checked_rounds: int
    lambda_le_one_fraction: float
    gated_violations: list[str]
    ungated_violations: list[str]


def check_rank_monotonicity(log: MetricsLog) -> RankCheckResult:
    records = [r for r in log.records if r.downlink_ranks is not None]
    gated_violations: list[str] = []
    ungated_violations: list[str] = []
    gated_rounds = 0
    triples = 0
    triples_le_one = 0
    for rec in records:
        if rec.lambdas is not None:
            for per in rec.lambdas:
                for v in per:
                    triples += 1
                    triples_le_one += v <= 1.0
    for prev, cur in zip(records, records[1:]):
        lams = cur.lambdas
        gated = lams is not None and all(v <= 1.0 for per in lams for v in per)
        if gated:
            gated_rounds += 1
        sink = gated_violations if gated else ungated_violations
        for li, (r_prev, r_cur) in enumerate(zip(prev.downlink_ranks, cur.downlink_ranks)):
            if r_cur > r_prev:
                sink.append(
                    f"round {cur.round_index}: layer {li} broadcast rank "
                    f"{r_cur} > previous {r_prev}"
                )
        if cur.uplink_ranks is not None:
            for k, ranks in enumerate(cur.uplink_ranks):
                for li, r_up in enumerate(ranks):
                    if r_up > prev.downlink_ranks[li]:
                        sink.append(
                            f"round {cur.round_index}: client {k} layer {li} upload "
                            f"rank {r_up} > previous broadcast {prev.downlink_ranks[li]}"
                        )
    frac = triples_le_one / triples if triples else 1.0
    return RankCheckResult(
        gated_rounds=gated_rounds,
        checked_rounds=max(len(records) - 1, 0),
        lambda_le_one_fraction=frac,
        gated_violations=gated_violations,
        ungated_violations=ungated_violations,
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_header(num_layers: int) -> list[str]:
    cols = [
        "round",
        "t",
        "uplink_params",
        "downlink_params",
        "cum_params",
        "uplink_bytes",
        "downlink_bytes",
        "train_loss",
        "test_acc",
    ]
    cols += [f"rank_L{i}" for i in range(num_layers)]
    cols += [f"lambda_max_L{i}" for i in range(num_layers)]
    cols.append("wall_time_s")
    return cols


def write_metrics_csv(log: MetricsLog, path) -> None:
    """One row per aggregation round; floats at full repr precision.

    Rerunning an identical config reproduces this file byte for byte except
    for the final wall_time_s column.
    """
    num_layers = len(log.layer_shapes)
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(num_layers))
        for rec in log.records:
            row = [
                rec.round_index,
                rec.global_iter,
                rec.uplink_params,
                rec.downlink_params,
                rec.cum_params,
                rec.uplink_bytes,
                rec.downlink_bytes,
                _fmt(rec.train_loss),
                _fmt(rec.test_accuracy),
            ]
            ranks = rec.downlink_ranks or (None,) * num_layers
            row += [_fmt(r) for r in ranks]
            lam = rec.lambda_max_per_layer() or (None,) * num_layers
            row += [_fmt(v) for v in lam]
            row.append(_fmt(rec.wall_time_s))
            writer.writerow(row)


def summary_dict(log: MetricsLog) -> dict:
    last = log.records[-1] if log.records else None
    summary = {
        "config": log.config,
        "rounds": len(log.records),
        "final_accuracy": log.final_accuracy(),
        "final_train_loss": last.train_loss if last else None,
        "total_uplink_params": last.cum_uplink_params if last else 0,
        "total_downlink_params": last.cum_downlink_params if last else 0,
        "total_params": last.cum_params if last else 0,
        "total_uplink_bytes": last.cum_uplink_bytes if last else 0,
        "total_downlink_bytes": last.cum_downlink_bytes if last else 0,
    }
    if log.traces is not None:
        consts = estimate_constants(log, log.traces)
        f0 = log.records[0].train_loss if log.records else 0.0
        terms = bound_rhs(consts, f0)
        summary["constants_empirical_lower_estimates"] = {
            "L": consts.smoothness,
            "G1": consts.grad_bound,
            "G2": consts.weight_bound,
            "G3": consts.drift_bound,
            "delta": consts.grad_variance,
            "f_star": consts.f_star,
        }
        summary["bound_terms"] = {
            "init_term": terms.init_term,
            "variance_term": terms.variance_term,
            "drift_term": terms.drift_term,
            "compression_term": terms.compression_term,
            "total": terms.total,
        }
    return summary


def write_summary_json(log: MetricsLog, path) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(summary_dict(log), fh, indent=2, sort_keys=True)
        fh.write("\n")
