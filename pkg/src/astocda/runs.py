"""Run-directory orchestration: each pipeline stage reads and writes files.

Layout of a run directory::

    config.json                  frozen copy of the run config
    data.json                    dataset location and manifest hash
    checkpoints/erm.astc         source-only segmentor
    checkpoints/ast.astc         pretrained AST_cs / AST_dn
    checkpoints/preadapt.astc    segmentor + ASTs after pre-adaptation
    checkpoints/epoch_%04d.astc  state after each adaptation epoch
    checkpoints/ddm_study.astc   multi-domain network probed by the ddm pre phase
    metrics.csv                  one row per adaptation epoch (epoch 0 = source-only)
    pairs_epoch_%04d.json        source/target pairs used in each epoch
    ddm_pre.csv, ddm_post.csv    discriminability curves
    eval_{split}.json            evaluation results

Stages must run in order; a missing prerequisite raises StageMissing.
"""

import csv
import glob
import io
import json
import logging
import os

import numpy as np

from . import ast as astmod
from . import checkpoint, ddm, pipeline, synthdata
from . import config as config_mod
from .errors import ConfigurationError, StageMissing
from .segmentor import Segmentor

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "epoch",
    "loss_s_g",
    "loss_s_g_sim",
    "loss_t_g",
    "loss_t_g_sim",
    "loss_total",
    "pgt_kept",
    "pgt_acc_kept",
    "pgt_acc_all",
    "empty_pgt_batches",
    "miou_compound",
    "miou_open",
)

EVAL_SPLITS = {"compound": "compound_val", "open": "open", "source": "source", "compound_train": "compound_train"}

# stage name -> checkpoint file that marks it complete
STAGE_FILES = {
    "train-erm": "erm.astc",
    "train-ast": "ast.astc",
    "preadapt": "preadapt.astc",
}


class Run:
    """A run directory bound to one frozen config."""

    def __init__(self, path, cfg=None):
        self.path = path
        cfg_path = os.path.join(path, "config.json")
        if cfg is None:
            if not os.path.exists(cfg_path):
                raise StageMissing("run", "config (no config.json in run directory)")
            cfg = config_mod.load(cfg_path)
        elif os.path.exists(cfg_path):
            frozen = config_mod.load(cfg_path)
            if frozen.to_dict() != cfg.to_dict():
                raise ConfigurationError(f"{cfg_path} holds a different config; use a fresh run directory")
        else:
            os.makedirs(os.path.join(path, "checkpoints"), exist_ok=True)
            with open(cfg_path, "w") as fh:
                fh.write(cfg.to_json())
        os.makedirs(os.path.join(path, "checkpoints"), exist_ok=True)
        self.cfg = cfg

    def file(self, *parts):
        return os.path.join(self.path, *parts)

    def ckpt(self, name):
        return self.file("checkpoints", name)

    def has(self, stage):
        return os.path.exists(self.ckpt(STAGE_FILES[stage]))

    def require(self, stage, prerequisite):
        if not self.has(prerequisite):
            raise StageMissing(stage, prerequisite)

    def epoch_checkpoints(self):
        return sorted(glob.glob(self.ckpt("epoch_*.astc")))

    # -- dataset binding --------------------------------------------------

    def bind_data(self, data_dir=None):
        """Load the dataset for this run; the first call records its location."""
        rec_path = self.file("data.json")
        if data_dir is None:
            if not os.path.exists(rec_path):
                raise StageMissing("data", "gen-data (no dataset recorded for this run; pass --data)")
            with open(rec_path) as fh:
                data_dir = json.load(fh)["data_dir"]
        man, splits = synthdata.load_dataset(data_dir)
        if synthdata.config_from_manifest(man) != self.cfg.data:
            raise ConfigurationError(f"dataset at {data_dir!r} was generated with a different data config")
        rec = {"data_dir": os.path.abspath(data_dir), "manifest_hash": synthdata.manifest_hash(data_dir)}
        if os.path.exists(rec_path):
            with open(rec_path) as fh:
                old = json.load(fh)
            if old["manifest_hash"] != rec["manifest_hash"]:
                raise ConfigurationError("dataset manifest changed since this run started")
        else:
            _write_json(rec_path, rec)
        return splits


# -- state (de)serialization ------------------------------------------------------


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def new_network(cfg, seed_offset=0):
    return Segmentor(cfg.segmentor, seed=cfg.seed + seed_offset)


def new_asts(cfg):
    cs = astmod.AstModule(seed=cfg.seed + 1, **vars(cfg.ast_cs))
    dn = astmod.AstModule(seed=cfg.seed + 2, **vars(cfg.ast_dn))
    return cs, dn


def save_state(path, net=None, ast_cs=None, ast_dn=None, extra=None):
    tensors = {}
    if net is not None:
        tensors.update(net.state_dict("net/"))
    if ast_cs is not None:
        tensors.update(ast_cs.state_dict("ast_cs/"))
    if ast_dn is not None:
        tensors.update(ast_dn.state_dict("ast_dn/"))
    tensors.update(extra or {})
    checkpoint.save(path, tensors)
    return tensors


def load_state(run, name, net=True, asts=True):
    """(net, ast_cs, ast_dn, raw tensors) from a checkpoint in ``run``."""
    raw = checkpoint.load(run.ckpt(name))
    n = cs = dn = None
    if net:
        n = new_network(run.cfg)
        n.load_state_dict(raw, "net/")
    if asts:
        cs, dn = new_asts(run.cfg)
        cs.load_state_dict(raw, "ast_cs/")
        dn.load_state_dict(raw, "ast_dn/")
    return n, cs, dn, raw


# -- stages --------------------------------------------------------------------


def train_erm(run, splits):
    cfg, o = run.cfg, run.cfg.optim
    src = splits["source"]
    net = new_network(cfg)
    hist = pipeline.train_erm(
        net, src.images, src.labels, o.erm_steps, o.erm_lr, o.batch_size, o.momentum, o.weight_decay, o.power, cfg.seed
    )
    save_state(run.ckpt("erm.astc"), net)
    log.info("train-erm: loss %.4f -> %.4f", np.mean(hist[:20]), np.mean(hist[-20:]))
    return hist


def train_ast(run, splits):
    run.require("train-ast", "train-erm")
    cfg, o = run.cfg, run.cfg.optim
    net, _, _, _ = load_state(run, "erm.astc", asts=False)
    cs, dn = new_asts(cfg)
    h_cs, h_dn = pipeline.train_asts(
        net, cs, dn, splits["source"].images, o.ast_steps, o.ast_lr, o.batch_size, o.momentum, o.weight_decay, o.power, cfg.seed
    )
    save_state(run.ckpt("ast.astc"), ast_cs=cs, ast_dn=dn)
    log.info("train-ast: cs %.4f -> %.4f, dn %.4f -> %.4f", h_cs[0], h_cs[-1], h_dn[0], h_dn[-1])
    return h_cs, h_dn


def preadapt(run, splits):
    run.require("preadapt", "train-erm")
    run.require("preadapt", "train-ast")
    cfg = run.cfg
    net, _, _, _ = load_state(run, "erm.astc", asts=False)
    _, cs, dn, _ = load_state(run, "ast.astc", net=False)
    state = pipeline.PipelineState(net, cs, dn, seed=cfg.seed)
    src, tgt = splits["source"], splits["compound_train"]
    hist = pipeline.preadapt(state, src.images, src.labels, tgt.images, cfg, cfg.adapt.preadapt_ast_update)
    save_state(run.ckpt("preadapt.astc"), net, cs, dn)
    return hist


def _evaluate_split(cfg, splits, split, net, mode, asts, prototype):
    data = splits[EVAL_SPLITS[split]]
    if data.labels is None:
        raise ConfigurationError(f"split {split!r} is unlabeled and cannot be evaluated")
    domains = data.families if split == "compound" else None
    return pipeline.evaluate(net, data.images, data.labels, cfg.data.num_classes, mode, asts, prototype, domains)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_metrics(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (float(v) if v != "" else None) for k, v in r.items()})
    return out


def adapt(run, splits):
    """All adaptation epochs; writes metrics.csv, per-epoch checkpoints and pairs."""
    run.require("adapt", "preadapt")
    cfg = run.cfg
    src, tgt = splits["source"], splits["compound_train"]
    target_gt = synthdata.hidden_labels(tgt, cfg.data.image_size, cfg.data.num_classes)

    # epoch 0: the source-only baseline
    erm_net, _, _, _ = load_state(run, "erm.astc", asts=False)
    row = {"epoch": 0}
    for split in cfg.eval.splits:
        row["miou_" + split] = _evaluate_split(cfg, splits, split, erm_net, "plain", (None, None), None).miou
    rows = [row]
    write_metrics(run.file("metrics.csv"), rows)

    net, cs, dn, _ = load_state(run, "preadapt.astc")
    state = pipeline.PipelineState(net, cs, dn, seed=cfg.seed)
    mode = pipeline.eval_mode(cfg, adapted=True)
    for e in range(cfg.optim.adapt_epochs):
        m = pipeline.adapt_epoch(state, src.images, src.labels, tgt.images, cfg, cfg.optim.adapt_epochs, target_gt)
        for split in cfg.eval.splits:
            res = _evaluate_split(cfg, splits, split, net, mode, (cs, dn), state.prototype)
            m["miou_" + split] = res.miou
        rows.append(m)
        extra = {"epoch": np.array(float(state.epoch)), "step": np.array(float(state.step))}
        if state.prototype is not None:
            extra["prototype"] = state.prototype
        save_state(run.ckpt(f"epoch_{state.epoch:04d}.astc"), net, cs, dn, extra)
        _write_json(run.file(f"pairs_epoch_{state.epoch:04d}.json"), [[int(i), int(j)] for i, j in state.pairs])
        write_metrics(run.file("metrics.csv"), rows)
        log.info("adapt epoch %d: %s", state.epoch, {k: round(v, 4) for k, v in m.items() if isinstance(v, float)})
    return rows


def final_state(run):
    """(net, asts, prototype, mode) of the latest completed stage for evaluation."""
    cfg = run.cfg
    epochs = run.epoch_checkpoints()
    if epochs:
        net, cs, dn, raw = load_state(run, os.path.basename(epochs[-1]))
        return net, (cs, dn), raw.get("prototype"), pipeline.eval_mode(cfg, adapted=True)
    run.require("eval", "train-erm")
    net, _, _, _ = load_state(run, "erm.astc", asts=False)
    return net, (None, None), None, "plain"


def evaluate(run, splits, split):
    if split not in EVAL_SPLITS:
        raise ConfigurationError(f"unknown split {split!r}; expected one of {sorted(EVAL_SPLITS)}")
    if splits[EVAL_SPLITS[split]].labels is None:
        raise ConfigurationError(f"split {split!r} is unlabeled and cannot be evaluated")
    net, asts, proto, mode = final_state(run)
    res = _evaluate_split(run.cfg, splits, split, net, mode, asts, proto)
    out = res.to_dict()
    out.update({"split": split, "mode": mode})
    _write_json(run.file(f"eval_{split}.json"), out)
    return res, mode


def train_study_network(run, splits):
    """Network for the discriminability study: trained on the labeled multi-domain split."""
    cfg, o, p = run.cfg, run.cfg.optim, run.cfg.ddm
    tr = splits["ddm_train"]
    net = new_network(cfg, seed_offset=17)
    pipeline.train_erm(net, tr.images, tr.labels, p.erm_steps, p.erm_lr, o.batch_size, o.momentum, o.weight_decay, o.power, cfg.seed)
    save_state(run.ckpt("ddm_study.astc"), net)
    return net


def ddm_study(run, splits, phase):
    """Writes ddm_{phase}.csv and returns the LayerDdm rows."""
    cfg = run.cfg
    ast_cfg = vars(cfg.ast_cs)
    if phase == "pre":
        run.require("ddm", "train-erm")
        if os.path.exists(run.ckpt("ddm_study.astc")):
            net = new_network(cfg, seed_offset=17)
            net.load_state_dict(checkpoint.load(run.ckpt("ddm_study.astc")), "net/")
        else:
            net = train_study_network(run, splits)
        rows = ddm.run_study(net, splits["ddm"], "pre_adaptation", ast_cfg, cfg.ddm, cfg.seed)
    elif phase == "post":
        if not run.epoch_checkpoints():
            raise StageMissing("ddm --phase post", "adapt")
        net, asts, proto, mode = final_state(run)
        rows = ddm.run_study(net, splits["ddm"], "post_adaptation", ast_cfg, cfg.ddm, cfg.seed, mode, asts, proto)
    else:
        raise ConfigurationError(f"phase must be 'pre' or 'post', got {phase!r}")
    ddm.emit_report(rows, run.file(f"ddm_{phase}.csv"))
    return rows


def check(run, slack=0.02):
    """Latent-vs-spatial discriminability check on the pre-adaptation report.

    Post-adaptation rows are listed for information only: adaptation is meant
    to suppress latent discriminability at l'. Returns (ok, lines).
    """
    pre = run.file("ddm_pre.csv")
    if not os.path.exists(pre):
        raise StageMissing("check", "ddm --phase pre")
    lines, ok = [], True
    for r in ddm.read_report(pre):
        good = r.latent_ddm >= r.spatial_ddm - slack
        ok &= good
        lines.append(
            f"{'PASS' if good else 'FAIL'} {r.phase} layer {r.layer}: latent {r.latent_ddm:.3f} vs spatial {r.spatial_ddm:.3f}"
        )
    post = run.file("ddm_post.csv")
    if os.path.exists(post):
        for r in ddm.read_report(post):
            lines.append(f"info {r.phase} layer {r.layer}: latent {r.latent_ddm:.3f} vs spatial {r.spatial_ddm:.3f}")
    return ok, lines
