import math

import numpy as np
import pytest

from feddlr.compression import compress_model, dense_model
from feddlr.metrics import (
    BROADCAST_ONCE,
    BROADCAST_PER_CLIENT,
    ConvergenceConstants,
    MetricsLog,
    RoundRecord,
    RunTraces,
    bound_rhs,
    check_rank_monotonicity,
    comm_accounting,
    csv_header,
    estimate_constants,
    estimate_lipschitz,
    lambda_diagnostic,
    mac_count,
    mac_ratio,
    write_metrics_csv,
)
from feddlr.nn import init_mlp


def test_lambda_zero_when_no_drift_and_exact_compression():
    w = np.outer([1.0, 2.0], [3.0, 4.0, 5.0])  # rank one, compressed exactly
    vals = lambda_diagnostic([w], [w], [w], [w], e=0.9)
    assert vals == [0.0]


def test_lambda_hand_computed_two_by_two():
    wt = np.array([[2.0, 0.0], [0.0, 1.0]])
    wp = np.array([[1.0, 0.0], [0.0, 1.0]])
    c2 = np.array([[2.0, 0.0], [0.0, 0.0]])
    avg = np.array([[1.5, 0.0], [0.0, 0.5]])
    e = 0.84
    num = max(
        math.sqrt(((wt - wp) ** 2).sum()), math.sqrt(((c2 - wp) ** 2).sum())
    )
    den = math.sqrt(1 - e) * min(
        math.sqrt((wt**2).sum()), math.sqrt((avg**2).sum())
    )
    expected = num / den
    got = lambda_diagnostic([wt], [wp], [c2], [avg], e=e)[0]
    assert got == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("scale", [0.125, 3.0, 1000.0])
def test_lambda_scale_invariant(scale):
    rng = np.random.default_rng(0)
    wt, wp, c2, avg = (rng.standard_normal((3, 4)) for _ in range(4))
    base = lambda_diagnostic([wt], [wp], [c2], [avg], e=0.9)[0]
    scaled = lambda_diagnostic(
        [wt * scale], [wp * scale], [c2 * scale], [avg * scale], e=0.9
    )[0]
    assert scaled == pytest.approx(base, rel=1e-12)


def test_lambda_zero_denominator_warns_inf():
    z = np.zeros((2, 2))
    wp = np.ones((2, 2))
    with pytest.warns(RuntimeWarning, match="zero denominator"):
        vals = lambda_diagnostic([z], [wp], [z], [z], e=0.9)
    assert math.isinf(vals[0])


def test_lambda_rejects_e_one():
    w = np.ones((2, 2))
    with pytest.raises(ValueError):
        lambda_diagnostic([w], [w], [w], [w], e=1.0)


def test_mac_single_dense_layer():
    report = mac_count([(100, 50)])
    assert report.dense_macs == 5000
    assert report.lowrank_macs == 5000


def test_mac_single_factored_layer():
    report = mac_count([(100, 50)], ranks=[10])
    assert report.lowrank_macs == 1500
    assert report.dense_macs == 5000
    assert report.mac_ratio == pytest.approx(5000 / 1500, rel=1e-12)


def test_mac_ratio_large_network_inputs():
    # measured dense/compressed MAC totals of a 9.76M-parameter network
    assert mac_ratio(153.75e6, 18.50e6) == pytest.approx(8.31, abs=0.01)


def test_mac_rank_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        mac_count([(4, 4)], ranks=[5])


def test_mac_reference_mlp_hand_computation():
    shapes = [(64, 32), (64, 64), (10, 64)]
    ranks = [4, 8, 2]
    report = mac_count(shapes, ranks)
    assert report.dense_macs == 64 * 32 + 64 * 64 + 10 * 64
    assert report.lowrank_macs == 4 * 96 + 8 * 128 + 2 * 74
    assert report.params_dense == (64 * 32 + 64) + (64 * 64 + 64) + (10 * 64 + 10)
    assert report.params_lowrank == (4 * 96 + 64) + (8 * 128 + 64) + (2 * 74 + 10)


def make_constants(e=0.9, **overrides):
    values = dict(
        smoothness=2.0,
        grad_bound=3.0,
        weight_bound=4.0,
        drift_bound=1.0,
        grad_variance=0.5,
        f_star=0.1,
        aggregations=8,
        batch_size=20,
        clients=10,
        local_iters=25,
        total_iters=200,
        e=e,
        eta=0.1,
    )
    values.update(overrides)
    return ConvergenceConstants(**values)


def test_bound_compression_term_zero_at_full_energy():
    terms = bound_rhs(make_constants(e=1.0), f0=1.0)
    assert terms.compression_term == 0.0


def test_bound_reduces_to_init_term_with_zero_constants():
    c = make_constants(smoothness=0.0, grad_bound=0.0, weight_bound=0.0, grad_variance=0.0)
    terms = bound_rhs(c, f0=1.0)
    assert terms.total == pytest.approx((1.0 - 0.1) / (0.1 * 200), rel=1e-15)


def test_bound_matches_hand_sum():
    c = make_constants()
    f0 = 2.3
    t1 = (f0 - c.f_star) / (c.eta * c.total_iters)
    t2 = c.eta * c.smoothness * c.grad_variance**2 / (c.batch_size * c.clients)
    t3 = 2 * c.eta**2 * c.smoothness**2 * c.grad_bound**2 * c.local_iters**2
    t4 = 4 * (1 - c.e**2) * c.aggregations * c.smoothness**2 * c.weight_bound**2 / c.total_iters
    terms = bound_rhs(c, f0)
    assert terms.total == pytest.approx(t1 + t2 + t3 + t4, rel=1e-12)
    assert abs(terms.total - (terms.init_term + terms.variance_term + terms.drift_term + terms.compression_term)) <= 1e-12


def test_bound_compression_term_strictly_decreasing_in_e():
    values = [bound_rhs(make_constants(e=e), f0=1.0).compression_term for e in (0.5, 0.9, 0.99, 1.0)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_lipschitz_quadratic_oracle():
    # gradient descent on f(w) = 0.5 w^T diag(d) w has gradient diag(d) w and
    # true smoothness max(d)
    d = np.array([5.0, 1.0, 0.5, 0.25])
    w = np.ones(4)
    points, grads = [], []
    for _ in range(20):
        g = d * w
        points.append(w.copy())
        grads.append(g)
        w = w - 0.05 * g
    estimate = estimate_lipschitz(points, grads)
    assert estimate <= 5.0 + 1e-9
    assert estimate >= 0.9 * 5.0


def test_lipschitz_constant_iterates_skipped():
    w = np.ones(3)
    assert estimate_lipschitz([w, w, w], [w, w, w]) == 0.0


def _log_with(records, config=None):
    cfg = {
        "batch_size": 20,
        "clients": 10,
        "local_iters": 25,
        "total_iters": 1000,
        "e_client": 0.99,
        "lr_eta0": 0.1,
    }
    if config:
        cfg.update(config)
    return MetricsLog(config=cfg, layer_shapes=((4, 3),), records=records)


def test_estimate_constants_assembles_traces():
    traces = RunTraces(
        grad_norm_max=2.0,
        wtilde_norm_max=7.0,
        drift_max=1.5,
        batch_full_dev_max=0.25,
        lipschitz_max=3.0,
        min_loss=0.4,
    )
    c = estimate_constants(_log_with([]), traces)
    assert c.grad_bound == 2.0
    assert c.weight_bound == 7.0
    assert c.drift_bound == 1.5
    assert c.grad_variance == 0.25
    assert c.smoothness == 3.0
    assert c.f_star == 0.4


def test_estimate_constants_requires_traces():
    with pytest.raises(ValueError, match="trace"):
        estimate_constants(_log_with([]), None)


def test_comm_accounting_dense_fedavg_counts():
    model = init_mlp((6, 8, 4), np.random.default_rng(0))
    p = sum(w.size + b.size for w, b in ((l.weights, l.bias) for l in model.layers))
    uploads = [dense_model(model) for _ in range(5)]
    broadcast = dense_model(model)
    up, down, up_b, down_b = comm_accounting(uploads, broadcast, BROADCAST_ONCE)
    assert up == 5 * p
    assert down == p
    up, down, _, _ = comm_accounting(uploads, broadcast, BROADCAST_PER_CLIENT)
    assert down == 5 * p
    # bytes: per layer 19-byte header + 8 per payload value + 4 + 8 per bias value
    expected_layer_bytes = sum(
        19 + 8 * l.weights().size + 4 + 8 * l.bias.size for l in broadcast.layers
    )
    assert down_b == expected_layer_bytes


def test_comm_accounting_factored_counts():
    rng = np.random.default_rng(1)
    from feddlr.nn import Layer, MlpModel

    w = np.outer(rng.standard_normal(20), rng.standard_normal(10))
    model = MlpModel(layers=(Layer(weights=w, bias=np.zeros(20)),))
    cm = compress_model(model, 0.9)
    assert cm.layers[0].mode == "factored"
    up, down, _, _ = comm_accounting([cm], cm, BROADCAST_ONCE)
    assert up == 1 * (20 + 10) + 20
    assert down == up


def _record(i, ranks, lams, up_ranks=None):
    return RoundRecord(
        round_index=i,
        global_iter=25 * (i + 1),
        uplink_ranks=up_ranks,
        downlink_ranks=ranks,
        uplink_params_per_client=(),
        uplink_params=0,
        downlink_params=0,
        uplink_bytes=0,
        downlink_bytes=0,
        cum_uplink_params=0,
        cum_downlink_params=0,
        cum_params=0,
        cum_uplink_bytes=0,
        cum_downlink_bytes=0,
        train_loss=1.0,
        test_accuracy=0.5,
        test_loss=1.0,
        lambdas=lams,
        wall_time_s=0.0,
    )


def test_rank_monotonicity_checker_gates_on_lambda():
    records = [
        _record(0, (8,), ((0.5,),)),
        _record(1, (7,), ((0.5,),), up_ranks=((8,),)),  # gated, ok (8 <= 8)
        _record(2, (9,), ((1.5,),)),  # violating but ungated
        _record(3, (8,), ((0.9,),)),  # gated, ok vs previous 9
    ]
    result = check_rank_monotonicity(_log_with(records))
    assert result.gated_violations == []
    assert len(result.ungated_violations) == 1
    assert result.gated_rounds == 2
    assert result.lambda_le_one_fraction == pytest.approx(3 / 4)


def test_rank_monotonicity_checker_flags_gated_violation():
    records = [
        _record(0, (5,), ((0.5,),)),
        _record(1, (6,), ((0.5,),)),
    ]
    result = check_rank_monotonicity(_log_with(records))
    assert len(result.gated_violations) == 1


def test_csv_writer_schema_and_rows(tmp_path):
    records = [_record(0, (3,), ((0.5,),)), _record(1, (3,), ((0.5,),))]
    log = _log_with(records)
    path = tmp_path / "m.csv"
    write_metrics_csv(log, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(csv_header(1))
    assert len(lines) == 3
