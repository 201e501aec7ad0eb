import json

import pytest

from goweb.config import PRESETS, ConfigError, RunConfig, config_from_dict, dump_config, load_config, small_config


def test_defaults_carry_reference_hyperparameters():
    cfg = RunConfig()
    assert cfg.recon.dim == 64 and cfg.recon.lr_rsgd == 0.3 and cfg.recon.negatives_per_positive == 50
    assert (cfg.model.d_h, cfg.model.d_V, cfg.model.hidden, cfg.model.heads) == (64, 128, 128, 8)
    assert (cfg.model.d_h, cfg.estimator.d_h) == (64, 64)
    for adam in (cfg.estimator.adam, cfg.rec_train.adam, cfg.rev_train.adam):
        assert (adam.lr, adam.beta1, adam.beta2) == (1e-5, 0.9, 0.999)
    assert (cfg.min_page_count, cfg.min_session_len, cfg.p_pop, cfg.k_cand) == (10, 10, 10, 50_000)


def test_round_trip_through_file(tmp_path):
    cfg = small_config(4).with_mode("np")
    dump_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_partial_overlay_keeps_base():
    cfg = config_from_dict({"seed": 3, "model": {"heads": 2}, "synth": {"title_len": [2, 4]}}, small_config())
    assert cfg.seed == 3 and cfg.model.heads == 2 and cfg.synth.title_len == (2, 4)
    assert cfg.model.d_V == small_config().model.d_V


def test_int_promotes_to_float():
    assert config_from_dict({"rec_train": {"adam": {"lr": 1}}}).rec_train.adam.lr == 1.0


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"model": {"bogus": 1}},
    {"rec_train": {"adam": {"momentum": 0.9}}},
    {"model": {"mode": "other"}},
    {"model": {"heads": "eight"}},
    {"model": 3},
    {"revisit_threshold": 1.5},
    {"synth": {"title_len": 5}},
])
def test_invalid_documents_raise_config_error(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_invalid_json_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


def test_with_seed_reaches_every_component():
    cfg = RunConfig().with_seed(9)
    assert {cfg.synth.seed, cfg.recon.seed, cfg.estimator.seed, cfg.model.seed,
            cfg.rec_train.seed, cfg.rev_train.seed, cfg.seed} == {9}


def test_with_mode_validates():
    assert RunConfig().with_mode("ablation").model.mode == "ablation"
    with pytest.raises(ConfigError):
        RunConfig().with_mode("nope")


def test_presets_and_serialisable():
    assert set(PRESETS) == {"large", "small"}
    assert PRESETS["small"](2) == small_config(2)
    json.dumps(PRESETS["large"](0).to_dict())
