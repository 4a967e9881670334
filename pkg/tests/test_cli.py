import json
import os

import numpy as np
import pytest

from astocda import checkpoint, cli, ddm, pipeline, runs, synthdata
from astocda.segmentor import Segmentor
from tiny import TINY_CONFIG, tiny_config


def _write_config(path, cfg_dict):
    with open(path, "w") as fh:
        json.dump(cfg_dict, fh)
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = _write_config(root / "tiny.json", TINY_CONFIG)
    data = str(root / "data")
    assert cli.main(["gen-data", "--config", conf, "--out", data]) == 0
    return root, conf, data


@pytest.fixture(scope="module")
def chain(workspace):
    root, conf, data = workspace
    run = str(root / "run")
    for stage in ("train-erm", "train-ast", "preadapt", "adapt"):
        assert cli.main([stage, "--config", conf, "--data", data, "--out", run]) == 0, stage
    return run


def test_gen_data_refuses_existing_dir(workspace, capsys):
    _, conf, data = workspace
    assert cli.main(["gen-data", "--config", conf, "--out", data]) == 2
    assert "--force" in capsys.readouterr().err


def test_gen_data_force_is_idempotent(workspace):
    _, conf, data = workspace
    before = synthdata.manifest_hash(data)
    assert cli.main(["gen-data", "--config", conf, "--out", data, "--force"]) == 0
    assert synthdata.manifest_hash(data) == before


def test_gen_data_sample_count(workspace):
    _, _, data = workspace
    man, splits = synthdata.load_dataset(data)
    d = TINY_CONFIG["data"]
    expect = d["n_source"] + d["n_compound"] + 3 * d["n_compound_val"] + d["n_open"] + 4 * d["n_ddm"] + d["n_ddm_train"]
    assert sum(len(e["seeds"]) for e in man["splits"]) == expect
    assert len(os.listdir(os.path.join(data, "records"))) == expect


def test_gen_data_seed_flag_changes_dataset(workspace, tmp_path):
    _, conf, data = workspace
    assert cli.main(["gen-data", "--config", conf, "--out", str(tmp_path / "d"), "--seed", "11"]) == 0
    assert synthdata.manifest_hash(str(tmp_path / "d")) != synthdata.manifest_hash(data)


def test_adapt_before_preadapt_exits_2(workspace, tmp_path, capsys):
    _, conf, data = workspace
    run = str(tmp_path / "run")
    assert cli.main(["train-erm", "--config", conf, "--data", data, "--out", run]) == 0
    assert cli.main(["adapt", "--config", conf, "--data", data, "--out", run]) == 2
    assert "preadapt" in capsys.readouterr().err


def test_unknown_config_key_exits_2(workspace, tmp_path):
    _, _, data = workspace
    bad = _write_config(tmp_path / "bad.json", dict(TINY_CONFIG, colour="red"))
    assert cli.main(["train-erm", "--config", bad, "--data", data, "--out", str(tmp_path / "r")]) == 2


def test_changed_config_in_existing_run_exits_2(workspace, chain, tmp_path):
    _, _, data = workspace
    other = _write_config(tmp_path / "other.json", dict(TINY_CONFIG, seed=4))
    assert cli.main(["train-erm", "--config", other, "--data", data, "--out", chain]) == 2


def test_lr_zero_smoke_run(workspace, tmp_path):
    _, _, data = workspace
    raw = json.loads(json.dumps(TINY_CONFIG))
    raw["optim"]["erm_lr"] = 0.0
    raw["optim"]["weight_decay"] = 0.0
    conf = _write_config(tmp_path / "lr0.json", raw)
    run = str(tmp_path / "run")
    assert cli.main(["train-erm", "--config", conf, "--data", data, "--out", run]) == 0
    cfg = tiny_config()
    fresh = Segmentor(cfg.segmentor, seed=cfg.seed).state_dict("net/")
    saved = checkpoint.load(os.path.join(run, "checkpoints", "erm.astc"))
    assert checkpoint.checksum(saved) == checkpoint.checksum(fresh)


def test_chain_writes_layout(chain):
    for name in ("config.json", "data.json", "metrics.csv", "pairs_epoch_0001.json"):
        assert os.path.exists(os.path.join(chain, name)), name
    assert os.path.exists(os.path.join(chain, "checkpoints", "epoch_0001.astc"))
    rows = runs.read_metrics(os.path.join(chain, "metrics.csv"))
    assert [r["epoch"] for r in rows] == [0.0, 1.0]
    with open(os.path.join(chain, "metrics.csv")) as fh:
        assert fh.readline().strip() == ",".join(runs.METRIC_COLUMNS)
    pairs = json.load(open(os.path.join(chain, "pairs_epoch_0001.json")))
    assert sorted(j for _, j in pairs) == list(range(TINY_CONFIG["data"]["n_compound"]))


def test_eval_json_roundtrip_and_in_process_equality(chain, capsys):
    assert cli.main(["eval", "--run", chain, "--split", "compound"]) == 0
    out = capsys.readouterr().out
    with open(os.path.join(chain, "eval_compound.json")) as fh:
        saved = json.load(fh)
    assert json.loads(json.dumps(saved)) == saved
    assert f"mIoU {saved['miou']:.4f}" in out
    run = runs.Run(chain)
    splits = run.bind_data()
    net, asts, proto, mode = runs.final_state(run)
    val = splits["compound_val"]
    res = pipeline.evaluate(net, val.images, val.labels, 5, mode, asts, proto, val.families)
    assert saved["miou"] == res.miou and saved["mode"] == "norm"
    assert saved["confusion"] == res.confusion.astype(int).tolist()


def test_eval_unlabeled_split_exits_2(chain, capsys):
    assert cli.main(["eval", "--run", chain, "--split", "compound_train"]) == 2
    assert "unlabeled" in capsys.readouterr().err


def test_eval_unknown_split_exits_2(chain):
    assert cli.main(["eval", "--run", chain, "--split", "moon"]) == 2


def test_ddm_and_check(workspace, chain, capsys):
    _, _, data = workspace
    assert cli.main(["check", "--run", chain]) == 2  # no report yet
    assert cli.main(["ddm", "--run", chain, "--phase", "pre"]) == 0
    assert cli.main(["ddm", "--run", chain, "--phase", "post"]) == 0
    for phase, tag in (("pre", "pre_adaptation"), ("post", "post_adaptation")):
        path = os.path.join(chain, f"ddm_{phase}.csv")
        with open(path) as fh:
            assert fh.readline().strip() == "phase,layer,spatial_ddm,latent_ddm"
        rows = ddm.read_report(path)
        assert len(rows) == 5 and {r.phase for r in rows} == {tag}
    capsys.readouterr()
    code = cli.main(["check", "--run", chain])
    out = capsys.readouterr().out
    pre = ddm.read_report(os.path.join(chain, "ddm_pre.csv"))
    expect = 0 if all(r.latent_ddm >= r.spatial_ddm - 0.02 for r in pre) else 1
    assert code == expect
    assert out.count("pre_adaptation") == 5 and out.count("info post_adaptation") == 5


def test_check_flags_violation(tmp_path, capsys):
    cfg = tiny_config()
    run = runs.Run(str(tmp_path / "r"), cfg)
    ddm.emit_report([ddm.LayerDdm("pre_adaptation", 1, 0.9, 0.5)], run.file("ddm_pre.csv"))
    assert cli.main(["check", "--run", run.path]) == 1
    ddm.emit_report([ddm.LayerDdm("pre_adaptation", 1, 0.9, 0.89)], run.file("ddm_pre.csv"))
    assert cli.main(["check", "--run", run.path]) == 0


def test_ddm_post_before_adapt_exits_2(workspace, tmp_path):
    _, conf, data = workspace
    run = str(tmp_path / "run")
    assert cli.main(["train-erm", "--config", conf, "--data", data, "--out", run]) == 0
    assert cli.main(["ddm", "--run", run, "--phase", "post"]) == 2


def test_chain_is_byte_identical(workspace, chain, tmp_path):
    _, conf, data = workspace
    run = str(tmp_path / "again")
    for stage in ("train-erm", "train-ast", "preadapt", "adapt"):
        assert cli.main([stage, "--config", conf, "--data", data, "--out", run]) == 0
    for name in ("metrics.csv", "pairs_epoch_0001.json", os.path.join("checkpoints", "epoch_0001.astc")):
        with open(os.path.join(chain, name), "rb") as a, open(os.path.join(run, name), "rb") as b:
            assert a.read() == b.read(), name


def test_console_script_help():
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
