import csv

import numpy as np
import pytest

from lognn_mec import autodiff as ad
from lognn_mec.baselines import init_mlp
from lognn_mec.core import check_feasibility, generate_instance
from lognn_mec.errors import ConfigurationError, NumericError
from lognn_mec.graph import GraphBatch, project_pairs
from lognn_mec.lognn import init_model
from lognn_mec.trainer import (
    TrainConfig, evaluate, fit_critic, ga_labels, init_critic, make_dataset, smoothed, supervised_loss,
    train, train_unsupervised,
)


def _small(method="unsupervised", sizes=((4, 2),), **kw):
    base = dict(epochs=3, batch_size=8, n_train_samples=16, held_out_samples=8, size_distribution=list(sizes),
                method=method, label_generations=5, label_population=20, seed=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"n_train_samples": 0}, {"batch_size": 64},
                                    {"method": "rl"}, {"size_distribution": [(0, 2)]}, {"lr": -1.0}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        _small(**kwargs)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.n_train_samples, cfg.lr) == (500, 32, 2048, 1e-4)
    assert cfg.size_distribution == [(2 * m, m) for m in range(2, 11)]
    assert cfg.digest() == TrainConfig().digest() != TrainConfig(seed=3).digest()


def test_dataset_deterministic():
    a = make_dataset(20, [(4, 2), (6, 3)], 5)
    b = make_dataset(20, [(4, 2), (6, 3)], 5)
    assert a.content_hash() == b.content_hash() != make_dataset(20, [(4, 2), (6, 3)], 6).content_hash()
    assert {(i.n_users, i.n_servers) for i in a.instances} == {(4, 2), (6, 3)}


def test_smoothed_trailing_window():
    values = np.arange(1.0, 13.0)
    s = smoothed(values, window=10)
    assert s[0] == 1.0 and s[1] == 1.5
    assert s[9] == pytest.approx(values[:10].mean())
    assert s[11] == pytest.approx(values[2:12].mean())


def test_unsupervised_training_is_deterministic_and_logs():
    cfg = _small(sizes=((4, 2), (6, 3)))
    data = make_dataset(cfg.n_train_samples, cfg.size_distribution, 0)
    m1, log1 = train_unsupervised(init_model(0), data, cfg)
    m2, log2 = train_unsupervised(init_model(0), data, cfg)
    assert m1.content_hash() == m2.content_hash()
    assert len(log1.records) == 3 and log1.aborted is None
    np.testing.assert_array_equal(log1.train_curve, log2.train_curve)
    assert np.all(log1.epoch_seconds > 0)


def test_unsupervised_step_lowers_objective():
    cfg = _small(epochs=15, lr=1e-3, n_train_samples=32, batch_size=32)
    data = make_dataset(32, cfg.size_distribution, 0)
    model = init_model(0)
    before = evaluate(model, data)
    model, log = train_unsupervised(model, data, cfg)
    assert evaluate(model, data) < before


def test_log_csv_and_manifest(tmp_path):
    cfg = _small(epochs=2)
    data = make_dataset(16, cfg.size_distribution, 0)
    model, log = train(init_model(0), data, cfg)
    log.write_csv(tmp_path / "log.csv")
    log.write_manifest(tmp_path / "manifest.json", data)
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert float(rows[0]["train_obj"]) == log.records[0].train_obj


def test_supervised_loss_zero_at_label():
    inst = generate_instance(4, 2, 0)
    batch = GraphBatch([inst])
    alloc = project_pairs(batch, *init_model(0).logits({k: ad.Tensor(v) for k, v in init_model(0).params.items()}, batch))
    label = alloc.to_allocations(batch)[0]
    assert float(supervised_loss(batch, alloc, [label]).data) == pytest.approx(0.0, abs=1e-20)


def test_supervised_and_actor_critic_run():
    cfg = _small(method="supervised", epochs=2)
    data = make_dataset(16, cfg.size_distribution, 0)
    _, log = train(init_model(0), data, cfg)
    assert len(log.records) == 2 and np.all(np.isfinite(log.test_curve))
    cfg = _small(method="actor_critic", epochs=2)
    _, log = train(init_mlp(4, 2, 0), data, cfg)
    assert len(log.records) == 2 and log.critic is not None


def test_actor_critic_needs_single_size():
    cfg = _small(method="actor_critic", sizes=((4, 2), (6, 3)))
    data = make_dataset(16, cfg.size_distribution, 0)
    with pytest.raises(ConfigurationError):
        train(init_model(0), data, cfg)


def test_ga_labels_feasible():
    insts = [generate_instance(4, 2, s) for s in range(3)]
    labels = ga_labels(insts, 3, 20, 0)
    assert len(labels) == 3
    for inst, label in zip(insts, labels):
        assert check_feasibility(inst, label).feasible


def test_critic_learns_delay_surface():
    data = make_dataset(64, [(4, 2)], 0)
    critic, mse, var = fit_critic(init_critic(4, 2, 0), init_mlp(4, 2, 1), data, steps=300)
    assert mse < var


def test_abort_keeps_partial_log():
    cfg = _small(epochs=3)
    data = make_dataset(16, cfg.size_distribution, 0)
    model = init_model(0)
    model.params["readout_user"] = np.full_like(model.params["readout_user"], np.inf)
    with pytest.raises(NumericError) as info:
        train(model, data, cfg)
    assert info.value.train_log.aborted.startswith("epoch 1")
    assert info.value.train_log.records == []
