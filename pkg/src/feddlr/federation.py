"""Round-based federated training: FedAvg and its dual-side compressed variant.

One round is R local SGD iterations on every client, an upload, a uniform
1/K parameter average at the server, and a broadcast. In "feddlr" mode each
weight matrix is truncated by the energy rule before upload (the client-side
compression) and again after averaging (the server-side compression); in
"fedavg" mode models travel uncompressed. All clients participate in every
round, and clients always reconstruct the broadcast before training rather
than operating on factors.

Determinism: data generation, shard assignment, weight init, and every
client's batch stream derive from the run seed through independent seeded
streams keyed by (seed, client, round), so any execution order of the clients
within a round produces identical results.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import compression, data, metrics, nn

MODE_FEDAVG = "fedavg"
MODE_FEDDLR = "feddlr"

# Stream tags for per-purpose RNG derivation from the run seed.
_STREAM_INIT = 0x12
_STREAM_BATCH = 0xBA


class ConfigError(ValueError):
    """Raised when a training configuration fails validation."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-mixture dataset settings for a run."""

    classes: int = 10
    dim: int = 32
    train_per_class: int = 200
    test_per_class: int = 100
    separation: float = 4.6


@dataclass(frozen=True)
class CsvSpec:
    """External CSV dataset: separate train and test files."""

    train_path: str
    test_path: str
    num_classes: int
    dim: int


@dataclass(frozen=True)
class TrainConfig:
    mode: str = MODE_FEDDLR
    clients: int = 10
    local_iters: int = 25
    total_iters: int = 1000
    batch_size: int = 20
    e_client: float = 0.99
    e_server: float = 0.99
    lr: nn.LrSchedule = field(default_factory=nn.LrSchedule)
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64, 64)
    dataset: SyntheticSpec | CsvSpec = field(default_factory=SyntheticSpec)
    broadcast_count: str = metrics.BROADCAST_PER_CLIENT
    allow_dense_fallback: bool = True
    capture_traces: bool = False

    def validate(self) -> None:
        if self.mode not in (MODE_FEDAVG, MODE_FEDDLR):
            raise ConfigError(f"mode must be 'fedavg' or 'feddlr', got {self.mode!r}")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if self.local_iters < 1:
            raise ConfigError("local_iters must be >= 1")
        if self.total_iters < self.local_iters:
            raise ConfigError("total_iters must be >= local_iters")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name, e in (("e_client", self.e_client), ("e_server", self.e_server)):
            if not 0.0 < e <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {e}")
        if self.broadcast_count not in (metrics.BROADCAST_ONCE, metrics.BROADCAST_PER_CLIENT):
            raise ConfigError("broadcast_count must be 'once' or 'per_client'")
        if any(d < 1 for d in self.hidden_dims):
            raise ConfigError("hidden layer dims must be positive")

    def num_rounds(self) -> int:
        return math.ceil(self.total_iters / self.local_iters)

    def echo(self) -> dict:
        """Flat, JSON-safe snapshot sufficient to reproduce the run."""
        out = {
            "mode": self.mode,
            "clients": self.clients,
            "local_iters": self.local_iters,
            "total_iters": self.total_iters,
            "batch_size": self.batch_size,
            "e_client": self.e_client,
            "e_server": self.e_server,
            "lr_eta0": self.lr.eta0,
            "lr_decay_base": self.lr.decay_base,
            "lr_decay_period": self.lr.decay_period,
            "seed": self.seed,
            "hidden_dims": list(self.hidden_dims),
            "broadcast_count": self.broadcast_count,
            "allow_dense_fallback": self.allow_dense_fallback,
            "capture_traces": self.capture_traces,
        }
        if isinstance(self.dataset, SyntheticSpec):
            out.update(
                data_source="synthetic",
                classes=self.dataset.classes,
                input_dim=self.dataset.dim,
                train_per_class=self.dataset.train_per_class,
                test_per_class=self.dataset.test_per_class,
                separation=self.dataset.separation,
            )
        else:
            out.update(
                data_source="csv",
                csv_train_path=self.dataset.train_path,
                csv_test_path=self.dataset.test_path,
                classes=self.dataset.num_classes,
                input_dim=self.dataset.dim,
            )
        return out


@dataclass
class ClientState:
    """One client: id, local shard, current model, and its sampling cursor.

    The epoch permutation and position persist across rounds; the generator
    used to reshuffle is re-derived per round from (seed, client, round), so
    client execution order cannot perturb sampling.
    """

    client_id: int
    shard: data.Dataset
    model: nn.MlpModel
    epoch_order: np.ndarray
    epoch_pos: int = 0

    def next_batch_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        n = len(self.shard)
        if batch_size > n:
            raise ConfigError(
                f"client {self.client_id}: batch size {batch_size} exceeds shard size {n}"
            )
        remaining = max(len(self.epoch_order) - self.epoch_pos, 0)
        if remaining >= batch_size:
            idx = self.epoch_order[self.epoch_pos : self.epoch_pos + batch_size]
            self.epoch_pos += batch_size
            return idx
        # finish the epoch, reshuffle, and top up from the fresh permutation
        head = self.epoch_order[self.epoch_pos :] if remaining else np.empty(0, dtype=np.intp)
        self.epoch_order = rng.permutation(n)
        take = batch_size - len(head)
        idx = np.concatenate([head, self.epoch_order[:take]])
        self.epoch_pos = take
        return idx


@dataclass
class ServerState:
    """Last broadcast, completed-round counter, and aggregation iteration indices."""

    broadcast: compression.CompressedModel
    round_counter: int = 0
    aggregation_iters: list[int] = field(default_factory=list)


def _client_rng(seed: int, client_id: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), _STREAM_BATCH, int(client_id), int(round_index)])
    )


@dataclass
class LocalStats:
    mean_loss: float
    max_grad_norm: float


def local_train(
    client: ClientState,
    start_model: nn.MlpModel,
    num_iters: int,
    t0: int,
    schedule: nn.LrSchedule,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[nn.MlpModel, LocalStats]:
    """Run ``num_iters`` SGD steps from ``start_model`` on the client's shard.

    Step i uses the learning rate at global iteration t0 + i. Batches are
    drawn without replacement within an epoch, reshuffling when exhausted.
    Returns the locally trained (pre-compression) model and loss statistics.
    """
    if num_iters < 0 or t0 < 0:
        raise ConfigError("iteration counts must be non-negative")
    model = start_model
    total_loss = 0.0
    max_grad = 0.0
    for i in range(num_iters):
        idx = client.next_batch_indices(batch_size, rng)
        batch = nn.Batch(inputs=client.shard.features[idx], labels=client.shard.labels[idx])
        loss, grads = nn.forward_loss_grad(model, batch)
        total_loss += loss
        gnorm = float(np.linalg.norm(grads.param_vector()))
        if gnorm > max_grad:
            max_grad = gnorm
        model = nn.sgd_step(model, grads, nn.lr_at(schedule, t0 + i))
    mean_loss = total_loss / num_iters if num_iters else math.nan
    return model, LocalStats(mean_loss=mean_loss, max_grad_norm=max_grad)


def aggregate(uploads: list[compression.CompressedModel]) -> nn.MlpModel:
    """Reconstruct every upload and average parameter-wise with weights 1/K."""
    if not uploads:
        raise ConfigError("cannot aggregate zero uploads")
    models = [compression.reconstruct_model(cm) for cm in uploads]
    shapes = models[0].weight_shapes()
    for i, m in enumerate(models[1:], start=1):
        if m.weight_shapes() != shapes:
            raise ConfigError(
                f"upload {i} shapes {m.weight_shapes()} do not match {shapes}"
            )
    k = len(models)
    layers = []
    for li in range(len(shapes)):
        w = sum(m.layers[li].weights for m in models) / k
        b = sum(m.layers[li].bias for m in models) / k
        layers.append(nn.Layer(weights=w, bias=b))
    return nn.MlpModel(layers=tuple(layers))


def _full_gradient(model: nn.MlpModel, shard: data.Dataset) -> np.ndarray:
    batch = nn.Batch(inputs=shard.features, labels=shard.labels)
    _, grads = nn.forward_loss_grad(model, batch)
    return grads.param_vector()


def _capture_client_traces(
    traces: metrics.RunTraces,
    client: ClientState,
    start_model: nn.MlpModel,
    end_model: nn.MlpModel,
    batch_size: int,
) -> None:
    """Full-shard gradient probes for the constant estimators (2 passes)."""
    g_start = _full_gradient(start_model, client.shard)
    first = nn.Batch(
        inputs=client.shard.features[:batch_size], labels=client.shard.labels[:batch_size]
    )
    _, batch_grads = nn.forward_loss_grad(start_model, first)
    dev = float(np.linalg.norm(batch_grads.param_vector() - g_start))
    traces.batch_full_dev_max = max(traces.batch_full_dev_max, dev)
    dx = float(np.linalg.norm(end_model.param_vector() - start_model.param_vector()))
    if dx > 0.0:
        g_end = _full_gradient(end_model, client.shard)
        traces.lipschitz_max = max(
            traces.lipschitz_max, float(np.linalg.norm(g_end - g_start)) / dx
        )
        traces.lipschitz_samples += 1


def feddlr_round(
    server: ServerState,
    clients: list[ClientState],
    t0: int,
    cfg: TrainConfig,
    test_set: data.Dataset | None = None,
    num_iters: int | None = None,
    traces: metrics.RunTraces | None = None,
) -> tuple[ServerState, metrics.RoundRecord]:
    """One aggregation round; clients may be processed in any order.

    In feddlr mode: local training, client-side truncation, upload; the server
    reconstructs, averages, truncates again, and broadcasts; clients then
    reconstruct the broadcast. In fedavg mode the truncation steps are skipped
    and models travel dense. The returned record carries the round's ranks,
    traffic, losses, and drift ratios.
    """
    start_time = time.perf_counter()
    if num_iters is None:
        num_iters = cfg.local_iters
    compressing = cfg.mode == MODE_FEDDLR
    prev_weights = [l.weights() for l in server.broadcast.layers]

    # Aggregation is a synchronization barrier: results are assembled in
    # client-id order so any execution schedule yields identical output.
    clients = sorted(clients, key=lambda c: c.client_id)
    uploads: list[compression.CompressedModel] = []
    wtilde_models: list[nn.MlpModel] = []
    losses: list[float] = []
    for client in clients:
        rng = _client_rng(cfg.seed, client.client_id, server.round_counter)
        try:
            trained, stats = local_train(
                client, client.model, num_iters, t0, cfg.lr, cfg.batch_size, rng
            )
        except (nn.NnError, ConfigError) as exc:
            raise RuntimeError(
                f"round {server.round_counter}, client {client.client_id}: {exc}"
            ) from exc
        losses.append(stats.mean_loss)
        if traces is not None:
            traces.grad_norm_max = max(traces.grad_norm_max, stats.max_grad_norm)
            traces.wtilde_norm_max = max(
                traces.wtilde_norm_max, float(np.linalg.norm(trained.param_vector()))
            )
            traces.min_loss = min(traces.min_loss, stats.mean_loss)
            _capture_client_traces(traces, client, client.model, trained, cfg.batch_size)
        wtilde_models.append(trained)
        if compressing:
            uploads.append(
                compression.compress_model(trained, cfg.e_client, cfg.allow_dense_fallback)
            )
        else:
            uploads.append(compression.dense_model(trained))

    averaged = aggregate(uploads)
    if compressing:
        broadcast = compression.compress_model(
            averaged, cfg.e_server, cfg.allow_dense_fallback
        )
    else:
        broadcast = compression.dense_model(averaged)

    new_global = compression.reconstruct_model(broadcast)
    for client in clients:
        client.model = new_global

    lambdas = None
    if compressing and cfg.e_client < 1.0:
        avg_c2 = [
            sum(cm.layers[li].weights() for cm in uploads) / len(uploads)
            for li in range(len(broadcast.layers))
        ]
        per_layer: list[list[float]] = [[] for _ in broadcast.layers]
        for k, wt in enumerate(wtilde_models):
            vals = metrics.lambda_diagnostic(
                [l.weights for l in wt.layers],
                prev_weights,
                [uploads[k].layers[li].weights() for li in range(len(wt.layers))],
                avg_c2,
                cfg.e_client,
            )
            for li, v in enumerate(vals):
                per_layer[li].append(v)
        lambdas = tuple(tuple(vals) for vals in per_layer)
        if traces is not None:
            for k, wt in enumerate(wtilde_models):
                for li, layer in enumerate(wt.layers):
                    drift = max(
                        float(np.linalg.norm(layer.weights - prev_weights[li])),
                        float(
                            np.linalg.norm(
                                uploads[k].layers[li].weights() - prev_weights[li]
                            )
                        ),
                    )
                    traces.drift_max = max(traces.drift_max, drift)

    up_params, down_params, up_bytes, down_bytes = metrics.comm_accounting(
        uploads, broadcast, cfg.broadcast_count
    )
    up_per_client = tuple(
        sum(compression.transmitted_params(l) for l in cm.layers) for cm in uploads
    )
    if compressing:
        uplink_ranks = tuple(tuple(l.rank for l in cm.layers) for cm in uploads)
        downlink_ranks = tuple(l.rank for l in broadcast.layers)
    else:
        uplink_ranks = None
        downlink_ranks = None

    test_acc = math.nan
    test_loss = math.nan
    if test_set is not None:
        test_acc, test_loss = nn.evaluate(new_global, test_set)

    record = metrics.RoundRecord(
        round_index=server.round_counter,
        global_iter=t0 + num_iters,
        uplink_ranks=uplink_ranks,
        downlink_ranks=downlink_ranks,
        uplink_params_per_client=up_per_client,
        uplink_params=up_params,
        downlink_params=down_params,
        uplink_bytes=up_bytes,
        downlink_bytes=down_bytes,
        cum_uplink_params=0,
        cum_downlink_params=0,
        cum_params=0,
        cum_uplink_bytes=0,
        cum_downlink_bytes=0,
        train_loss=float(np.mean(losses)),
        test_accuracy=test_acc,
        test_loss=test_loss,
        lambdas=lambdas,
        wall_time_s=time.perf_counter() - start_time,
    )
    new_server = ServerState(
        broadcast=broadcast,
        round_counter=server.round_counter + 1,
        aggregation_iters=server.aggregation_iters + [t0 + num_iters - 1],
    )
    return new_server, record


def build_datasets(cfg: TrainConfig) -> tuple[data.Dataset, data.Dataset]:
    """(train, test) pair for the config's dataset spec."""
    spec = cfg.dataset
    if isinstance(spec, SyntheticSpec):
        pool = data.synth_gaussian_mixture(
            seed=cfg.seed,
            classes=spec.classes,
            dim=spec.dim,
            n_per_class=spec.train_per_class + spec.test_per_class,
            separation=spec.separation,
        )
        train, test = data.split_train_test(pool, spec.test_per_class)
        return train, test
    train = data.load_csv(spec.train_path, spec.num_classes)
    test = data.load_csv(spec.test_path, spec.num_classes)
    return train, test


def init_run(cfg: TrainConfig) -> tuple[ServerState, list[ClientState], data.Dataset]:
    """Datasets, shards, shared initial model, and initial server state."""
    cfg.validate()
    train, test = build_datasets(cfg)
    shards = data.partition_iid(train, cfg.clients, cfg.seed)
    for shard in shards:
        if cfg.batch_size > len(shard):
            raise ConfigError(
                f"batch size {cfg.batch_size} exceeds shard size {len(shard)}"
            )
    init_rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), _STREAM_INIT]))
    dims = (train.features.shape[1],) + tuple(cfg.hidden_dims) + (train.num_classes,)
    w0 = nn.init_mlp(dims, init_rng)
    clients = []
    for k, shard in enumerate(shards):
        # Exhausted-cursor start: the first batch request reshuffles from the
        # round-0 stream, so no permutation is ever drawn twice.
        clients.append(
            ClientState(
                client_id=k,
                shard=shard,
                model=w0,
                epoch_order=np.empty(0, dtype=np.intp),
                epoch_pos=len(shard),
            )
        )
    # The initial model is installed directly on the clients; it is not a
    # broadcast and is not counted as traffic.
    server = ServerState(broadcast=compression.dense_model(w0))
    return server, clients, test


def run_training(cfg: TrainConfig) -> metrics.MetricsLog:
    """Execute ceil(T / R) rounds and return the full metrics log.

    Fully deterministic given the config. The final round is shortened when
    the local iteration count does not divide the total.
    """
    server, clients, test = init_run(cfg)
    traces = metrics.RunTraces() if cfg.capture_traces else None
    log = metrics.MetricsLog(
        config=cfg.echo(),
        layer_shapes=compression.reconstruct_model(server.broadcast).weight_shapes(),
        traces=traces,
    )
    cum = dict(up_p=0, down_p=0, up_b=0, down_b=0)
    t0 = 0
    for _ in range(cfg.num_rounds()):
        iters = min(cfg.local_iters, cfg.total_iters - t0)
        server, record = feddlr_round(
            server, clients, t0, cfg, test_set=test, num_iters=iters, traces=traces
        )
        cum["up_p"] += record.uplink_params
        cum["down_p"] += record.downlink_params
        cum["up_b"] += record.uplink_bytes
        cum["down_b"] += record.downlink_bytes
        record = replace(
            record,
            cum_uplink_params=cum["up_p"],
            cum_downlink_params=cum["down_p"],
            cum_params=cum["up_p"] + cum["down_p"],
            cum_uplink_bytes=cum["up_b"],
            cum_downlink_bytes=cum["down_b"],
        )
        log.records.append(record)
        t0 += iters
    return log
