import json
import math

import numpy as np
import pytest

import equiflow


def small_config(**train):
    cfg = {
        "group": "C4",
        "seed": 3,
        "dataset": {"kind": "eight-gaussians", "train_size": 500, "test_size": 200},
        "model": {"blocks": 2, "width": 3},
        "train": {"steps": 20, "eval_interval": 10, **train},
    }
    return json.dumps(cfg)


def quarter_turn(x):
    return np.stack([-x[:, 1], x[:, 0]], axis=1)


def test_untrained_model_density_is_invariant():
    model = equiflow.build_model(small_config())
    assert model.dim == 2
    assert model.group == "C4"
    x = np.random.default_rng(0).normal(size=(50, 2))
    lp = model.log_prob(x)
    assert lp.shape == (50,)
    assert np.all(np.isfinite(lp))
    assert np.max(np.abs(model.log_prob(quarter_turn(x)) - lp)) < 1e-10


def test_train_returns_history_and_is_deterministic():
    model, history, loss = equiflow.train(small_config())
    assert [h["step"] for h in history] == [0, 10, 20]
    assert len(loss) == 20
    assert all(h["equivariance_gap"] < 1e-8 for h in history)
    _, again, loss2 = equiflow.train(small_config())
    assert again == history
    assert loss2 == loss


def test_save_load_and_sample(tmp_path):
    model, _, _ = equiflow.train(small_config())
    path = tmp_path / "model.json"
    model.save(path)
    loaded = equiflow.load_model(path)
    x = model.sample(30, seed=4)
    assert x.shape == (30, 2)
    np.testing.assert_array_equal(loaded.log_prob(x), model.log_prob(x))
    np.testing.assert_array_equal(loaded.sample(30, seed=4), x)


def test_errors_surface_as_value_errors(tmp_path):
    with pytest.raises(equiflow.ConfigError, match="missing field: group"):
        equiflow.build_model(json.dumps({"seed": 1}))
    with pytest.raises(equiflow.ModelError):
        equiflow.load_model(tmp_path / "absent.json")
    model = equiflow.build_model(small_config())
    with pytest.raises(ValueError):
        model.log_prob(np.zeros((3, 5)))


def test_moser_transport():
    out = equiflow.moser_transport(512, 4, 0.3)
    assert out["grid"].shape == (512,)
    assert out["pushforward_l1"] < 1e-3
    assert out["equivariance_error"] < 1e-6


def test_cli_in_process(tmp_path):
    code, out, err = equiflow.run_cli(["verify", "--model", "builtin-suite", "--out", str(tmp_path)])
    assert code == 0, err
    assert (tmp_path / "report.txt").exists()
    code, _, err = equiflow.run_cli(["no-such-command"])
    assert code == 2
