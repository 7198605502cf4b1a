import json

import numpy as np
import pytest

from omniscale.data_io import TimeSeriesDataset, sine_square_dataset
from omniscale.errors import InvalidArgumentError, RunAbortedError, TrainingDivergedError
from omniscale.experiment import (
    RunResult,
    SeedResult,
    TrainConfig,
    batch_size,
    evaluate,
    fingerprint,
    fit,
    model_spec_for,
    rank_table,
    read_results,
    rf_sweep,
    run_protocol,
    train,
)
from omniscale.models import FCN_REFERENCE_WEIGHTS, build_model, fcn_architecture


def rule_oracle(n):
    """Half-up rounding of n/10 via Python's exact decimal handling, clamped to [2, 16]."""
    from decimal import ROUND_HALF_UP, Decimal

    return max(2, min(16, int((Decimal(n) / 10).quantize(Decimal(1), rounding=ROUND_HALF_UP))))


@pytest.mark.parametrize("n, b", [(17, 2), (160, 16), (1000, 16), (1, 2), (25, 3), (35, 4), (14, 2), (155, 16), (145, 15)])
def test_batch_size_examples(n, b):
    assert batch_size(n) == b


def test_batch_size_matches_oracle():
    for n in range(1, 3000):
        assert batch_size(n) == rule_oracle(n)


def test_batch_size_override():
    assert TrainConfig(batch_size=10).batch_size_for(17) == 10
    assert TrainConfig().batch_size_for(17) == 2
    with pytest.raises(InvalidArgumentError):
        batch_size(0)


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(seeds=()), dict(seeds=(1, 1)), dict(device="cuda"), dict(learning_rate=0)])
def test_config_invariants(kw):
    with pytest.raises(InvalidArgumentError):
        TrainConfig(**kw)


def test_config_defaults_and_round_trip():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.learning_rate, len(cfg.seeds)) == (500, 1e-3, 10)
    assert (cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr) == (0.5, 50, 1e-4)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def stub_trainer(accs):
    def run(spec, tr, te, config, seed):
        return SeedResult(seed, accs[config.seeds.index(seed)], 0.0, 0.0)

    return run


def _toy():
    return sine_square_dataset(3, 16, seed=0, split="train"), sine_square_dataset(3, 16, seed=1, split="test")


def test_protocol_stub_means():
    tr, te = _toy()
    res = run_protocol(tr, te, TrainConfig(), trainer=stub_trainer([1.0] * 10), branch_channels=1)
    assert res.mean_accuracy == 1.0 and len(res.accuracies) == 10
    res = run_protocol(tr, te, TrainConfig(seeds=(0, 1)), trainer=stub_trainer([0.9, 1.0]), branch_channels=1)
    assert res.mean_accuracy == pytest.approx(0.95, abs=1e-15)


def test_protocol_persists_jsonl(tmp_path):
    tr, te = _toy()
    out = tmp_path / "runs.jsonl"
    for accs in ([0.5, 0.7], [1.0, 1.0]):
        run_protocol(tr, te, TrainConfig(seeds=(3, 4)), trainer=stub_trainer(accs), out_path=out, branch_channels=1)
    lines = out.read_text().splitlines()
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert first["schema_version"] == 1 and first["seeds"] == [3, 4] and first["mean_accuracy"] == 0.6
    assert len(first["fingerprint"]["sha256"]) == 64
    assert [r.mean_accuracy for r in read_results(out)] == [0.6, 1.0]


def test_protocol_abort_carries_partial(tmp_path):
    tr, te = _toy()

    def flaky(spec, a, b, config, seed):
        if seed == 2:
            raise TrainingDivergedError(7, seed)
        return SeedResult(seed, 0.8, 0.0, 0.0)

    out = tmp_path / "r.jsonl"
    with pytest.raises(RunAbortedError) as err:
        run_protocol(tr, te, TrainConfig(seeds=(0, 1, 2, 3)), trainer=flaky, out_path=out, branch_channels=1)
    partial = err.value.partial
    assert partial.status == "aborted" and partial.seeds == [0, 1] and partial.accuracies == [0.8, 0.8]
    assert read_results(out)[0].status == "aborted"
    assert isinstance(err.value.__cause__, TrainingDivergedError) and err.value.__cause__.epoch == 7


def test_divergence_raises_with_epoch():
    samples = [np.full((1, 8), np.inf), np.ones((1, 8))]
    ds = TimeSeriesDataset(samples, [0, 1], ["a", "b"], "train")
    model = build_model(model_spec_for("os-cnn", ds, branch_channels=1))
    with pytest.raises(TrainingDivergedError) as err, np.errstate(invalid="ignore"):
        fit(model, ds, TrainConfig(epochs=3, seeds=(5,)), seed=5)
    assert err.value.epoch == 0 and err.value.seed == 5


def test_run_result_invariants():
    with pytest.raises(InvalidArgumentError):
        RunResult("d", "m", {}, [0], [1.5], 0.0)
    with pytest.raises(InvalidArgumentError):
        RunResult("d", "m", {}, [0, 1], [0.5], 0.0)


def test_seed_determinism():
    tr, te = _toy()
    spec = model_spec_for("os-cnn", tr, branch_channels=2)
    cfg = TrainConfig(epochs=5, seeds=(11,))
    a = train(spec, tr, te, cfg, 11)
    b = train(spec, tr, te, cfg, 11)
    assert a.accuracy == b.accuracy and a.final_loss == b.final_loss


def test_training_ignores_test_split():
    tr, te = _toy()
    spec = model_spec_for("os-cnn", tr, branch_channels=2)
    cfg = TrainConfig(epochs=3, seeds=(0,))
    m1, m2 = build_model(spec, 0), build_model(spec, 0)
    fit(m1, tr, cfg, 0)
    fit(m2, tr, cfg, 0)
    flipped = TimeSeriesDataset(te.samples, 1 - te.labels, te.label_names, "test")
    assert evaluate(m1, te) + evaluate(m2, flipped) == pytest.approx(1.0)
    for (_, p), (_, q) in zip(m1.named_parameters(), m2.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_shuffled_labels_near_chance():
    tr = sine_square_dataset(10, 32, seed=5, split="train")
    te = sine_square_dataset(100, 32, seed=6, split="test")
    rng = np.random.default_rng(0)
    shuffle = lambda ds: TimeSeriesDataset(ds.samples, rng.permutation(ds.labels), ds.label_names, ds.split)
    res = run_protocol(shuffle(tr), shuffle(te), TrainConfig(epochs=30, seeds=(0,)), branch_channels=2)
    assert abs(res.mean_accuracy - 0.5) <= 0.15


def test_model_names():
    tr, _ = _toy()
    assert model_spec_for("os-cnn-res:3", tr).depth == 3
    assert model_spec_for("FCN", tr).kind == "FCN"
    with pytest.raises(InvalidArgumentError):
        model_spec_for("resnet", tr)


def test_fingerprint_changes_with_config():
    tr, _ = _toy()
    spec = model_spec_for("os-cnn", tr, branch_channels=1)
    a, b = fingerprint(spec, TrainConfig()), fingerprint(spec, TrainConfig(epochs=7))
    assert a["sha256"] != b["sha256"] and a["residual_order"] == "add-before-final-relu"
    assert fingerprint(spec, TrainConfig())["sha256"] == a["sha256"]


def _recording_trainer(seen):
    def run(spec, tr, te, config, seed):
        seen.append(spec)
        return SeedResult(seed, 0.5, 0.0, 0.0)

    return run


def test_rf_sweep_cardinality_and_budget():
    tr, te = _toy()
    seen = []
    cfg = TrainConfig(seeds=(0,))
    results = rf_sweep(tr, te, [10, 50], "fixed_size", cfg, trainer=_recording_trainer(seen),
                       os_overrides={"branch_channels": 1})
    assert len(results) == 3
    assert results[-1].model == "os-cnn"
    for spec in seen[:2]:
        kernels, channels = fcn_architecture(spec)
        weights = sum(a * b * k for a, b, k in zip((spec.n_variates,) + channels[:-1], channels, kernels))
        assert abs(weights - FCN_REFERENCE_WEIGHTS) <= 0.02 * FCN_REFERENCE_WEIGHTS
    seen2 = []
    again = rf_sweep(tr, te, [30, 70, 120], "fixed_channels", cfg, trainer=_recording_trainer(seen2),
                     os_overrides={"branch_channels": 1})
    assert seen2[-1] == seen[-1]
    assert again[-1].fingerprint["sha256"] == results[-1].fingerprint["sha256"]
    with pytest.raises(InvalidArgumentError):
        rf_sweep(tr, te, [10], "bogus", cfg)


def test_rank_table():
    mk = lambda m, a: RunResult("d", m, {}, [0], [a], 0.0)
    table = rank_table({"d1": [mk("A", 0.9), mk("B", 0.8)], "d2": [mk("A", 0.7), mk("B", 0.7)]})
    assert table[0] == {"model": "A", "average_rank": 1.25, "datasets": 2}


def _parallel_stub(spec, tr, te, config, seed):
    return SeedResult(seed, seed / 10, 0.0, 0.0)


def test_jobs_match_sequential():
    tr, te = _toy()
    cfg = TrainConfig(seeds=(1, 2, 3))
    a = run_protocol(tr, te, cfg, trainer=_parallel_stub, jobs=1, branch_channels=1)
    b = run_protocol(tr, te, cfg, trainer=_parallel_stub, jobs=2, branch_channels=1)
    assert a.accuracies == b.accuracies == [0.1, 0.2, 0.3]
