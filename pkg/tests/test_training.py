import numpy as np
import pytest

from lvnc.data import generate_dataset, load_arrays
from lvnc.errors import ContractError
from lvnc.losses import LossConfig
from lvnc.training import EarlyStopping, TrainConfig, batch_loss, fit, run_schedule
from lvnc.unet import UNet, UNetConfig


def test_early_stop_after_exactly_patience_bad_epochs():
    losses = [1.0, 0.9, 0.8, 0.85, 0.8, 0.81, 0.9, 0.95, 0.7]
    # best at epoch 3; epochs 4..8 are five non-improving epochs (ties do not count)
    assert run_schedule(losses, 25, 5) == (8, 3)


def test_schedule_capped_at_max_epochs():
    losses = list(np.linspace(1, 0, 40))
    assert run_schedule(losses, 25, 5) == (25, 25)


def test_improvement_resets_counter():
    s = EarlyStopping(2)
    for e, v in enumerate([3, 4, 2, 5], 1):
        s.update(e, v)
    assert not s.should_stop and s.best_epoch == 3
    s.update(5, 6)
    assert s.should_stop


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(patience=0)
    with pytest.raises(ContractError):
        TrainConfig(validation_fraction=1.0)
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)


@pytest.fixture(scope="module")
def tiny_sets(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    m = generate_dataset(d, 8, size=16, seed=0)
    x, y = load_arrays(m)
    return (x[:6], y[:6]), (x[6:], y[6:])


def _train(tiny_sets, **kw):
    model = UNet.create(UNetConfig(depth=1, base_channels=4, input_size=16), seed=0)
    cfg = TrainConfig(max_epochs=4, patience=2, batch_size=2, seed=1, **kw)
    return fit(model, *tiny_sets, LossConfig(), cfg)


def test_fit_history_and_best_restore(tiny_sets):
    seen = []
    model = UNet.create(UNetConfig(depth=1, base_channels=4, input_size=16), seed=0)
    res = fit(model, *tiny_sets, LossConfig(), TrainConfig(max_epochs=4, patience=2, seed=1),
              on_epoch=seen.append)
    assert 1 <= len(res.history) <= 4 and seen == res.history
    assert [h["epoch"] for h in res.history] == list(range(1, len(res.history) + 1))
    best = min(h["val_loss"] for h in res.history)
    assert res.history[res.best_epoch - 1]["val_loss"] == best
    # restored parameters reproduce the best validation loss
    assert batch_loss(res.model, *tiny_sets[1]) == pytest.approx(best, rel=1e-12)


def test_fit_is_deterministic(tiny_sets):
    a, b = _train(tiny_sets), _train(tiny_sets)
    assert a.history == b.history
    for k in a.model.params:
        assert np.array_equal(a.model.params[k].data, b.model.params[k].data)


def test_fit_rejects_empty_sets(tiny_sets):
    (x, y), _ = tiny_sets
    model = UNet.create(UNetConfig(depth=1, base_channels=4, input_size=16))
    with pytest.raises(ContractError):
        fit(model, (x, y), (x[:0], y[:0]))
