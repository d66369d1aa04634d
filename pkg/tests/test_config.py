import json

import pytest

from badsad import config as cfgmod
from badsad.errors import ConfigurationError, DataError


def test_defaults_resolve():
    cfg = cfgmod.resolve()
    assert cfg["data"]["dataset"] == "mnist"
    assert cfgmod.split_sizes(cfg).as_tuple() == (4000, 500, 500, 200, 180, 760, 430, 500)
    assert cfg["train"]["epochs"] == 50 and cfg["pretrain"]["epochs"] == 30
    assert cfg["train"]["margin"] == 2.0 and cfg["train"]["eps_inv"] == 1e-6
    assert cfgmod.poison_spec(cfg, (1, 28, 28)).square_size == 3
    assert cfgmod.poison_spec(cfg, (3, 32, 32)).square_size == 4
    assert len(cfgmod.ratios(cfg)) == 21 and cfgmod.ratios(cfg)[-1] == 2.0


def test_synth_defaults_apply_only_to_synth():
    cfg = cfgmod.resolve({"data": {"dataset": "synth"}})
    assert cfg["train"]["epochs"] == 100 and cfg["train"]["alpha"] == 10.0
    assert cfgmod.split_sizes(cfg).as_tuple() == (500,) * 8
    assert cfgmod.poison_spec(cfg, (2,)).square_size == 1
    # an explicit value still wins over the synthetic default
    cfg = cfgmod.resolve({"data": {"dataset": "synth"}, "train": {"epochs": "7"}})
    assert cfg["train"]["epochs"] == 7


def test_ini_and_json_files_agree(tmp_path):
    ini = tmp_path / "a.ini"
    ini.write_text("[data]\ndataset = synth\nsplit_seed = 3\n[train]\nalpha = 0.5\nmode = clean\n")
    js = tmp_path / "a.json"
    js.write_text(json.dumps({"data": {"dataset": "synth", "split_seed": 3}, "train": {"alpha": 0.5, "mode": "clean"}}))
    assert cfgmod.load_config(ini) == cfgmod.load_config(js)


def test_to_ini_round_trip(tmp_path):
    cfg = cfgmod.resolve({"data": {"dataset": "synth"}, "train": {"lr": 3e-4}})
    path = tmp_path / "echo.ini"
    path.write_text(cfgmod.to_ini(cfg))
    assert cfgmod.load_config(path) == cfg


@pytest.mark.parametrize(
    "raw",
    [
        {"nope": {}},
        {"data": {"colour": "red"}},
        {"data": {"dataset": "svhn"}},
        {"data": {"normal_class": 12}},
        {"train": {"mode": "sneaky"}},
        {"train": {"epochs": "many"}},
        {"train": {"epochs": 2.5}},
        {"train": {"eta": 0}},
        {"train": {"dtype": "float16"}},
        {"trigger": {"kind": "star"}},
        {"eval": {"ratio_step": 0}},
        {"data": {"dataset": "synth", "synth_spread": 0}},
        {"data": {"dataset": "synth", "synth_normal_center": "1,2,3"}},
    ],
)
def test_invalid_configs(raw):
    with pytest.raises(ConfigurationError):
        cfgmod.resolve(raw)


def test_bad_files(tmp_path):
    with pytest.raises(DataError):
        cfgmod.load_config(tmp_path / "absent.ini")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError):
        cfgmod.load_config(bad)
    bad_ini = tmp_path / "bad.ini"
    bad_ini.write_text("key without section\n")
    with pytest.raises(ConfigurationError):
        cfgmod.load_config(bad_ini)


def test_overrides():
    o = cfgmod.Override.parse("train.alpha = 0.25")
    assert (o.section, o.key, o.value) == ("train", "alpha", "0.25")
    merged = cfgmod.merge_overrides([o, cfgmod.Override.parse("data.normal_class=4")])
    cfg = cfgmod.resolve({}, merged)
    assert cfg["train"]["alpha"] == 0.25 and cfg["data"]["normal_class"] == 4
    for text in ("alpha=1", "train.alpha", "=3"):
        with pytest.raises(ConfigurationError):
            cfgmod.Override.parse(text)


def test_data_root(monkeypatch, tmp_path):
    monkeypatch.delenv(cfgmod.DATA_ROOT_ENV, raising=False)
    assert str(cfgmod.data_root(cfgmod.resolve())) == "data/mnist"
    monkeypatch.setenv(cfgmod.DATA_ROOT_ENV, str(tmp_path))
    assert cfgmod.data_root(cfgmod.resolve()) == tmp_path / "mnist"
    assert cfgmod.data_root(cfgmod.resolve({"data": {"root": "/x/y"}})) == cfgmod.Path("/x/y")
