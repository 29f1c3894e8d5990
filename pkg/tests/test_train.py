import hashlib

import numpy as np
import pytest
import torch

from apc.data import PAD, ContractError, SequenceDataset, reverse_dataset
from apc.train import TrainConfig, train_model, train_pair, training_view, validation_ndcg
from apc import train as train_mod


def cycle_dataset(n_items=20, length=8):
    """One user alternating 1, 2, 1, 2, ...; the held-out items continue the pattern."""
    seq = [1 + (t % 2) for t in range(length + 2)]
    return SequenceDataset(items=[seq[:-2]], n_items=n_items, valid=[seq[-2]], test=[seq[-1]])


def param_hash(model):
    h = hashlib.sha256()
    for v in model.state_dict().values():
        h.update(v.detach().double().numpy().tobytes())
    return h.hexdigest()


CYCLE_CFG = TrainConfig(lr=0.05, dropout=0.0, epochs=60, patience=0, dim=8, exclude_history=False)


def test_cycle_recommender_reaches_ndcg_one():
    ds = cycle_dataset()
    m = train_model(ds, CYCLE_CFG, role="recommender")
    assert m.fit_log["best_ndcg"] == 1.0
    assert validation_ndcg(m, ds.items, ds.valid, exclude_history=False) == 1.0


def test_cycle_pair_abductive_reaches_ndcg_one():
    f_R, f_A = train_pair(cycle_dataset(), CYCLE_CFG, CYCLE_CFG)
    assert f_R.fit_log["best_ndcg"] == 1.0
    assert f_A.fit_log["role"] == "abductive" and f_A.fit_log["best_ndcg"] == 1.0


def test_zero_epochs_returns_initial_model():
    m = train_model(cycle_dataset(), TrainConfig(epochs=0, dim=8), init="zeros")
    assert np.all(m.score_all(np.array([[0, 1, 2]]))[0, 1:] == 0.5)


def test_same_seed_same_parameters_distinct_seed_differs():
    ds = cycle_dataset()
    cfg = TrainConfig(epochs=3, dim=8, seed=7)
    a, b = train_model(ds, cfg), train_model(ds, cfg)
    assert param_hash(a) == param_hash(b)
    assert a.fit_log["losses"] == b.fit_log["losses"]
    c = train_model(ds, TrainConfig(epochs=3, dim=8, seed=8))
    assert param_hash(c) != param_hash(a)


def test_palindromic_data_is_identical_in_both_directions():
    ds = SequenceDataset(items=[[0, 1, 2, 1], [3, 4, 4, 3]], n_items=5)
    assert np.array_equal(reverse_dataset(ds).items, ds.items)


def test_direction_enforced_at_trainer_boundary():
    ds = cycle_dataset()
    with pytest.raises(ContractError):
        train_model(ds, TrainConfig(epochs=1), role="abductive")
    with pytest.raises(ContractError):
        train_model(reverse_dataset(ds), TrainConfig(epochs=1), role="recommender")
    with pytest.raises(ContractError):
        train_pair(reverse_dataset(ds), TrainConfig(epochs=1), TrainConfig(epochs=1))


def test_abductive_view_holds_out_oldest_item():
    rev = reverse_dataset(SequenceDataset(items=[[0, 1, 2, 3]], n_items=3))
    rows, inputs, targets = training_view(rev, "abductive")
    assert rows.tolist() == [[0, 0, 3, 2]] and targets.tolist() == [1]


def test_empty_dataset_is_a_contract_error():
    with pytest.raises(ContractError):
        train_model(SequenceDataset(items=np.zeros((2, 4), dtype=int), n_items=3), TrainConfig(epochs=1))


def test_nan_loss_aborts(monkeypatch):
    class Broken(train_mod.SequentialScorer):
        def reset_parameters(self, init="normal"):
            super().reset_parameters(init)
            with torch.no_grad():
                self.pos_emb.fill_(float("nan"))

    monkeypatch.setattr(train_mod, "SequentialScorer", Broken)
    with pytest.raises(FloatingPointError, match="non-finite"):
        train_model(cycle_dataset(), TrainConfig(epochs=2, dim=8))


def test_early_stop_after_patience():
    rng = np.random.default_rng(0)
    items = rng.integers(1, 30, size=(40, 6))
    ds = SequenceDataset(items=items, n_items=30, valid=rng.integers(1, 30, 40), test=rng.integers(1, 30, 40))
    m = train_model(ds, TrainConfig(epochs=40, patience=2, dim=8, lr=0.05))
    log = m.fit_log
    ran = len(log["val_ndcg"])
    assert ran == 40 or ran == log["best_epoch"] + 2
    assert all(np.isfinite(log["losses"]))


def test_pad_row_stays_zero():
    m = train_model(cycle_dataset(), TrainConfig(epochs=5, dim=8, lr=0.05))
    assert torch.count_nonzero(m.embedding[PAD]) == 0


def test_config_ranges():
    from apc.data import ConfigError

    for bad in ({"lr": 0}, {"l2": -1}, {"dropout": 1.0}, {"batch_size": 0}, {"negatives": 0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_train_pair_writes_checkpoints(tmp_path):
    cfg = TrainConfig(epochs=1, dim=8)
    train_pair(cycle_dataset(), cfg, cfg, out_dir=tmp_path, metadata={"catalog_sha256": "abc"})
    from apc.model import load_checkpoint

    for name in ("f_R", "f_A"):
        m = load_checkpoint(tmp_path / f"{name}.bin")
        assert m.metadata["catalog_sha256"] == "abc" and m.metadata["train_config"]["epochs"] == 1
