import json
import os
import pathlib

import numpy as np
import pytest

import mvswin

CONFIG_DIR = pathlib.Path(os.environ.get("MVSWIN_CONFIG_DIR", pathlib.Path(__file__).parents[2] / "configs"))


def test_toy_forward_shapes_and_determinism():
    model = mvswin.Model(mvswin.ModelConfig.toy())
    rng = np.random.default_rng(0)
    cc = rng.standard_normal((3, 8, 8, 1))
    mlo = rng.standard_normal((3, 8, 8, 1))
    logits = model.forward_pair(cc, mlo)
    assert logits.shape == (3,)
    assert np.all(np.isfinite(logits))
    again = mvswin.Model(mvswin.ModelConfig.toy()).forward_pair(cc, mlo)
    np.testing.assert_array_equal(logits, again)
    assert model.forward_single(cc[:, :, :, 0]).shape == (3,)


def test_param_count_ordering():
    counts = [mvswin.Model(mvswin.ModelConfig.tiny(224, f)).num_params for f in (2, 3)]
    assert counts[0] < counts[1]


def test_parameters_round_trip(tmp_path):
    cfg = mvswin.ModelConfig.toy()
    a = mvswin.Model(cfg)
    name = a.parameter_names()[0]
    a.set_parameter(name, a.parameter(name) + 0.5)
    a.save(tmp_path / "ckpt")
    cfg.seed = 7
    b = mvswin.Model(cfg)
    b.load(tmp_path / "ckpt")
    np.testing.assert_array_equal(a.parameter(name), b.parameter(name))
    with pytest.raises(mvswin.ContractError):
        a.set_parameter(name, np.zeros(3))


def test_errors_map_to_python_exceptions():
    cfg = mvswin.ModelConfig.toy()
    cfg.depths = [2, 3, 2, 2]
    with pytest.raises(mvswin.ConfigError, match="depth 3"):
        mvswin.Model(cfg)
    model = mvswin.Model(mvswin.ModelConfig.toy())
    with pytest.raises(mvswin.ContractError):
        model.forward_pair(np.zeros((1, 8, 8, 1)), np.zeros((1, 4, 4, 1)))
    bad = np.zeros((1, 8, 8, 1))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(mvswin.NumericError):
        model.forward_pair(bad, bad)
    with pytest.raises(mvswin.ValidationError):
        mvswin.auc([0.1, 0.2], [1, 1])


def test_auc_example():
    assert mvswin.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_synthetic_pairs():
    cc, mlo, labels = mvswin.synthetic_pairs(3, 50, 16)
    assert cc.shape == (50, 16, 16, 1) and mlo.shape == cc.shape
    assert set(np.unique(labels)) <= {0, 1}
    cc2, _, labels2 = mvswin.synthetic_pairs(3, 50, 16)
    np.testing.assert_array_equal(cc, cc2)
    np.testing.assert_array_equal(labels, labels2)


def test_gradcheck_passes_on_toy():
    report = mvswin.gradcheck(mvswin.ModelConfig.toy(), probes=100)
    assert set(report) == {"mda", "omni_block_pair", "patch_merge", "model"}
    for component, r in report.items():
        assert r["max_rel_error"] < 1e-4, component


def test_train_synthetic_from_config_file():
    cfg = json.loads((CONFIG_DIR / "toy.json").read_text())
    cfg["train"]["max_epochs"] = 1
    cfg["data"]["train_size"] = 60
    cfg["data"]["test_size"] = 30
    out = mvswin.train_synthetic(cfg)
    assert len(out["history"]) == 1
    assert out["test"]["n"] == 30
    assert 0.0 <= out["test"]["auc"] <= 1.0
    with pytest.raises(mvswin.ConfigError, match=r"\$\.model\.windw"):
        mvswin.train_synthetic({"model": {"windw": 3}})
