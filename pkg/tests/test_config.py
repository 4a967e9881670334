import json

import pytest

from astocda import config as C
from astocda.errors import ConfigurationError


def test_defaults_roundtrip():
    cfg = C.RunConfig()
    assert C.from_dict(json.loads(cfg.to_json())).to_dict() == cfg.to_dict()


def test_data_seed_follows_run_seed():
    assert C.from_dict({"seed": 5}).data.seed == 5
    assert C.from_dict({"seed": 5, "data": {"seed": 2}}).data.seed == 2


@pytest.mark.parametrize(
    "raw",
    [
        {"bogus": 1},
        {"adapt": {"pairing": "nearest"}},
        {"adapt": {"frobnicate": True}},
        {"optim": {"erm_steps": "many"}},
        {"optim": {"erm_steps": 1.5}},
        {"adapt": {"use_norm": 1}},
        {"adapt": {"loss_weights": [1.0, 1.0]}},
        {"adapt": {"loss_plain": False, "loss_sim": False}},
        {"eval": {"splits": ["mars"]}},
        {"data": {"image_size": 48}},
        [],
    ],
)
def test_invalid_configs_rejected(raw):
    with pytest.raises(ConfigurationError):
        C.from_dict(raw)


def test_int_accepted_for_float_field():
    assert C.from_dict({"optim": {"erm_lr": 1}}).optim.erm_lr == 1.0


def test_load_reports_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigurationError):
        C.load(str(p))
