"""Training stages of the Simulate-then-Normalize adaptation recipe.

Stages, in order:

1. ``train_erm``: plain source cross-entropy training of the segmentor.
2. ``train_asts``: reconstruction training of AST_cs (layer l) and AST_dn
   (layer l') on frozen source features.
3. ``preadapt``: alternating batches of (a) source CE through the frozen
   auto-encoding ASTs, updating the segmentor, and (b) reconstruction on
   source and target features, updating the ASTs.
4. ``adapt_epoch``: with both ASTs frozen, recompute pairs, prototype and
   pseudo-labels, then train the segmentor on the four simulated/normalized
   pathways.

Evaluation accumulates a confusion matrix and reports per-class IoU / mIoU.
"""

from dataclasses import dataclass, field
import logging

import numpy as np

from . import ast as astmod
from . import pairing
from .errors import ConfigurationError, InvariantError, TrainingDivergence
from .optim import SGD, poly_lr
from .segmentor import Segmentor
from .tensor import Tensor, mse, no_grad, softmax_cross_entropy

log = logging.getLogger(__name__)

IGNORE = 255


@dataclass
class PipelineState:
    net: Segmentor
    ast_cs: astmod.AstModule
    ast_dn: astmod.AstModule
    seed: int = 0
    prototype: object = None  # (C_l', d) array
    pairs: list = None
    pseudo: object = None  # (N_t, H, W) int64 with IGNORE where filtered out
    epoch: int = 0
    artifacts_epoch: int = -1
    optimizer: object = None
    step: int = 0


@dataclass
class EvalResult:
    iou: list  # per class, NaN when the class is absent from GT
    miou: float
    confusion: np.ndarray
    per_domain: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "iou": [None if np.isnan(v) else float(v) for v in self.iou],
            "miou": float(self.miou),
            "confusion": self.confusion.astype(int).tolist(),
            "per_domain": {k: float(v) for k, v in self.per_domain.items()},
        }


def _batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i : i + batch] for i in range(0, n, batch)]


def _stream(n, batch, steps, rng):
    """``steps`` minibatch index arrays drawn by reshuffled passes over n items."""
    out, order = [], np.array([], dtype=int)
    while len(out) < steps:
        if len(order) < batch:
            order = np.concatenate([order, rng.permutation(n)])
        out.append(order[:batch])
        order = order[batch:]
    return out


def _check_loss(loss, stage, step, lr):
    v = loss.item()
    if not np.isfinite(v):
        raise TrainingDivergence(stage, step, lr, v)
    return v


# -- stage 1: ERM ------------------------------------------------------------


def train_erm(net, images, labels, steps, lr, batch_size=4, momentum=0.9, weight_decay=5e-4, power=0.9, seed=0):
    """Source-only cross-entropy training of the plain segmentor. Returns loss history."""
    if len(images) == 0:
        raise ConfigurationError("train_erm needs a nonempty labeled source set")
    rng = np.random.default_rng([int(seed), 0xE7])
    opt = SGD(net.parameters(), lr, momentum, weight_decay)
    history = []
    for step, idx in enumerate(_stream(len(images), batch_size, steps, rng)):
        cur = poly_lr(lr, step, steps, power)
        opt.zero_grad()
        loss = softmax_cross_entropy(net.forward_full(images[idx]), labels[idx], IGNORE)
        history.append(_check_loss(loss, "train_erm", step, cur))
        loss.backward()
        opt.step(cur)
    return history


# -- stage 2: AST pretraining -------------------------------------------------


def site_features(net, images, mode="plain", asts=(None, None), batch=32):
    """(h_l, h_l') for all images under ``mode`` ('plain' or 'ae'), without gradients."""
    hl, hlp = [], []
    with no_grad():
        for i in range(0, len(images), batch):
            out = net.run(images[i : i + batch], mode, *asts)
            hl.append(out["h_l"].data)
            hlp.append(out["h_lp"].data)
    return np.concatenate(hl), np.concatenate(hlp)


def train_asts(net, ast_cs, ast_dn, images, steps, lr, batch_size=4, momentum=0.9, weight_decay=5e-4, power=0.9, seed=0):
    """Reconstruction training of both ASTs on frozen plain-network source features."""
    h_l, h_lp = site_features(net, images)
    rng = np.random.default_rng([int(seed), 0xA5])
    idx = _stream(len(images), batch_size, steps, rng)
    hist_cs = astmod.train_autoencoder(ast_cs, (h_l[i] for i in idx), steps, lr, momentum, weight_decay, power, "train_ast_cs")
    hist_dn = astmod.train_autoencoder(ast_dn, (h_lp[i] for i in idx), steps, lr, momentum, weight_decay, power, "train_ast_dn")
    return hist_cs, hist_dn


# -- stage 3: pre-adaptation ---------------------------------------------------


def preadapt(state, src_images, src_labels, tgt_images, cfg, update_asts=True):
    """Alternate segmentor finetuning through frozen AE ASTs with AST refitting on both domains.

    Returns a dict of per-step histories.
    """
    o = cfg.optim
    net, ast_cs, ast_dn = state.net, state.ast_cs, state.ast_dn
    rng = np.random.default_rng([int(state.seed), 0x9A])
    steps = o.preadapt_steps
    s_idx = _stream(len(src_images), o.batch_size, steps, rng)
    t_idx = _stream(len(tgt_images), o.batch_size, steps, rng)
    opt_net = SGD(net.parameters(), o.preadapt_lr, o.momentum, o.weight_decay)
    opt_cs = SGD(ast_cs.parameters(), o.preadapt_ast_lr, o.momentum, o.weight_decay)
    opt_dn = SGD(ast_dn.parameters(), o.preadapt_ast_lr, o.momentum, o.weight_decay)
    hist = {"seg": [], "ast_cs": [], "ast_dn": []}
    for step in range(steps):
        xs, ys, xt = src_images[s_idx[step]], src_labels[s_idx[step]], tgt_images[t_idx[step]]
        # pathway 1: θ through frozen auto-encoding ASTs
        ast_cs.freeze()
        ast_dn.freeze()
        lr = poly_lr(o.preadapt_lr, step, steps, o.power)
        opt_net.zero_grad()
        loss = softmax_cross_entropy(net.forward_full(xs, "ae", ast_cs, ast_dn), ys, IGNORE)
        hist["seg"].append(_check_loss(loss, "preadapt", step, lr))
        loss.backward()
        opt_net.step(lr)
        ast_cs.unfreeze()
        ast_dn.unfreeze()
        if not update_asts:
            continue
        # pathway 2: θ_cs, θ_dn on source and target features with θ frozen
        lr_a = poly_lr(o.preadapt_ast_lr, step, steps, o.power)
        with no_grad():
            out_s = net.run(xs, "ae", ast_cs, ast_dn)
            out_t = net.run(xt, "ae", ast_cs, ast_dn)
        for module, opt, key, site in ((ast_cs, opt_cs, "ast_cs", "h_l"), (ast_dn, opt_dn, "ast_dn", "h_lp")):
            opt.zero_grad()
            hs, ht = out_s[site].detach(), out_t[site].detach()
            loss = mse(hs, astmod.autoencode(module, hs)) + mse(ht, astmod.autoencode(module, ht))
            hist[key].append(_check_loss(loss, "preadapt_" + key, step, lr_a))
            loss.backward()
            opt.step(lr_a)
    return hist


# -- stage 4: adaptation -----------------------------------------------------


def _latents(module, feats, batch=32):
    out = []
    with no_grad():
        for i in range(0, len(feats), batch):
            out.append(astmod.encode(module, feats[i : i + batch]).data)
    return np.concatenate(out)


def _norm_mode(cfg):
    return "norm" if cfg.adapt.use_norm else "ae"


def _sim_mode(cfg):
    return "sim_then_norm" if cfg.adapt.use_norm else "sim"


def compute_epoch_artifacts(state, src_images, tgt_images, cfg, epoch):
    """Pairs, prototype and pseudo-labels as functions of the epoch-start state.

    Returns a dict with ``pairs``, ``prototype`` (or None without AST-Norm),
    ``pseudo`` and ``agree_fraction``.
    """
    a = cfg.adapt
    net, ast_cs, ast_dn = state.net, state.ast_cs, state.ast_dn
    asts = (ast_cs, ast_dn)
    hs_l, _ = site_features(net, src_images, "ae", asts)
    ht_l, _ = site_features(net, tgt_images, "ae", asts)
    z_s, z_t = _latents(ast_cs, hs_l), _latents(ast_cs, ht_l)
    if a.pairing == "mined":
        pairs = pairing.mine_pairs(z_s, z_t)
    else:
        pairs = pairing.random_pairs(len(src_images), len(tgt_images), state.seed * 1000 + epoch)
    pairing.validate(pairs, len(src_images), len(tgt_images))
    src_of = np.array([i for i, _ in sorted(pairs, key=lambda p: p[1])])

    prototype = None
    if a.use_norm:
        # prototype over the l' features of the four pathways of this epoch's pairs
        def variants():
            with no_grad():
                for b in range(0, len(tgt_images), 32):
                    js = np.arange(b, min(b + 32, len(tgt_images)))
                    is_ = src_of[js]
                    hsl, htl = Tensor(hs_l[is_]), Tensor(ht_l[js])
                    yield net.tail(hsl, (1, 1), "ae", *asts)["h_lp"].data
                    yield net.tail(htl, (1, 1), "ae", *asts)["h_lp"].data
                    if a.use_sim:
                        yield net.tail(hsl, (1, 1), "sim", *asts, partner=Tensor(z_t[js]))["h_lp"].data
                        yield net.tail(htl, (1, 1), "sim", *asts, partner=Tensor(z_s[is_]))["h_lp"].data

        prototype = astmod.compute_prototype(ast_dn, variants(), a.renormalize_prototype).data

    # pseudo-labels: keep pixels where the normalized and simulated-then-normalized argmaxes agree
    pseudo = np.full((len(tgt_images),) + tgt_images.shape[2:], IGNORE, dtype=np.int64)
    plain_pred = np.empty_like(pseudo)
    hw = tgt_images.shape[2:]
    with no_grad():
        for b in range(0, len(tgt_images), 32):
            js = np.arange(b, min(b + 32, len(tgt_images)))
            htl = Tensor(ht_l[js])
            y_tg = net.tail(htl, hw, _norm_mode(cfg), *asts, prototype=prototype)["logits"].data
            p_a = y_tg.argmax(axis=1)
            if a.use_sim:
                y_tsim = net.tail(htl, hw, _sim_mode(cfg), *asts, partner=Tensor(z_s[src_of[js]]), prototype=prototype)
                p_b = y_tsim["logits"].data.argmax(axis=1)
            else:
                p_b = p_a
            pseudo[js] = np.where(p_a == p_b, p_a, IGNORE)
            plain_pred[js] = p_a
    return {
        "pairs": pairs,
        "prototype": prototype,
        "pseudo": pseudo,
        "pred": plain_pred,
        "agree_fraction": float(np.mean(pseudo != IGNORE)),
    }


def extract_pseudo_labels(pred_norm, pred_sim):
    """Per-pixel consistency filter: (mask, y_pgt) with y_pgt = IGNORE where argmaxes disagree."""
    pred_norm, pred_sim = np.asarray(pred_norm), np.asarray(pred_sim)
    mask = pred_norm == pred_sim
    return mask, np.where(mask, pred_norm, IGNORE)


def adaptation_losses(state, xs, ys, xt, y_pgt, cfg):
    """The four pathway CE terms for one paired batch, as a dict of scalar Tensors."""
    a = cfg.adapt
    net, asts = state.net, (state.ast_cs, state.ast_dn)
    hw = xs.shape[2:]
    h_s = net.forward_phi(xs)
    h_t = net.forward_phi(xt)
    nm, sm = _norm_mode(cfg), _sim_mode(cfg)
    proto = state.prototype
    terms = {}
    if a.loss_plain:
        terms["s_g"] = softmax_cross_entropy(net.tail(h_s, hw, nm, *asts, prototype=proto)["logits"], ys, IGNORE)
        terms["t_g"] = softmax_cross_entropy(net.tail(h_t, hw, nm, *asts, prototype=proto)["logits"], y_pgt, IGNORE)
    if a.use_sim and a.loss_sim:
        # partner latents from the current forward pass, treated as constants
        z_s = astmod.encode(state.ast_cs, h_s.detach()).detach()
        z_t = astmod.encode(state.ast_cs, h_t.detach()).detach()
        terms["s_g_sim"] = softmax_cross_entropy(
            net.tail(h_s, hw, sm, *asts, partner=z_t, prototype=proto)["logits"], ys, IGNORE
        )
        terms["t_g_sim"] = softmax_cross_entropy(
            net.tail(h_t, hw, sm, *asts, partner=z_s, prototype=proto)["logits"], y_pgt, IGNORE
        )
    return terms


LOSS_KEYS = ("s_g", "s_g_sim", "t_g", "t_g_sim")


def adapt_epoch(state, src_images, src_labels, tgt_images, cfg, total_epochs=None, target_gt=None):
    """One adaptation epoch; mutates ``state`` and returns epoch metrics."""
    o, a = cfg.optim, cfg.adapt
    total_epochs = total_epochs or o.adapt_epochs
    if not (state.ast_cs.frozen and state.ast_dn.frozen):
        state.ast_cs.freeze()
        state.ast_dn.freeze()
    art = compute_epoch_artifacts(state, src_images, tgt_images, cfg, state.epoch)
    state.pairs, state.prototype, state.pseudo = art["pairs"], art["prototype"], art["pseudo"]
    state.artifacts_epoch = state.epoch
    metrics = {"epoch": state.epoch + 1, "pgt_kept": art["agree_fraction"]}
    if target_gt is not None:
        kept = state.pseudo != IGNORE
        metrics["pgt_acc_kept"] = float(np.mean(state.pseudo[kept] == target_gt[kept])) if kept.any() else float("nan")
        metrics["pgt_acc_all"] = float(np.mean(art["pred"] == target_gt))

    if state.optimizer is None:
        state.optimizer = SGD(state.net.parameters(), o.adapt_lr, o.momentum, o.weight_decay)
    opt = state.optimizer
    src_of = dict((j, i) for i, j in state.pairs)
    rng = np.random.default_rng([int(state.seed), 0xAD, state.epoch])
    batches = _batches(len(tgt_images), o.batch_size, rng)
    total_steps = total_epochs * len(batches)
    weights = dict(zip(LOSS_KEYS, a.loss_weights))
    sums = {k: 0.0 for k in LOSS_KEYS + ("total",)}
    empty_pgt = 0
    for js in batches:
        is_ = np.array([src_of[int(j)] for j in js])
        xs, ys, xt, y_pgt = src_images[is_], src_labels[is_], tgt_images[js], state.pseudo[js]
        if not (y_pgt != IGNORE).any():
            empty_pgt += 1
        lr = poly_lr(o.adapt_lr, state.step, total_steps, o.power)
        opt.zero_grad()
        terms = adaptation_losses(state, xs, ys, xt, y_pgt, cfg)
        total = None
        for k, t in terms.items():
            wt = t * weights[k]
            total = wt if total is None else total + wt
            sums[k] += t.item()
        sums["total"] += _check_loss(total, "adapt", state.step, lr)
        total.backward()
        opt.step(lr)
        state.step += 1
    for k in sums:
        metrics["loss_" + k] = sums[k] / len(batches)
    metrics["empty_pgt_batches"] = empty_pgt
    state.epoch += 1
    if not (state.ast_cs.frozen and state.ast_dn.frozen):
        raise InvariantError("AST modules must stay frozen during adaptation")
    return metrics


# -- evaluation ---------------------------------------------------------------


def confusion_matrix(pred, gt, k):
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    keep = gt != IGNORE
    return np.bincount(gt[keep] * k + pred[keep], minlength=k * k).reshape(k, k)


def iou_from_confusion(cm):
    """Per-class IoU (NaN for classes absent from GT) and their mean over present classes."""
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1)
    denom = gt_count + cm.sum(axis=0) - tp
    iou = np.where(gt_count > 0, tp / np.maximum(denom, 1), np.nan)
    present = gt_count > 0
    miou = float(np.mean(iou[present])) if present.any() else float("nan")
    return iou, miou


def predict(net, images, mode="plain", asts=(None, None), prototype=None, batch=32):
    preds = []
    with no_grad():
        for i in range(0, len(images), batch):
            logits = net.forward_full(images[i : i + batch], mode, *asts, prototype=prototype)
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds)


def evaluate(net, images, labels, num_classes, mode="plain", asts=(None, None), prototype=None, domains=None):
    """Confusion-matrix mIoU, with a per-domain mIoU breakdown when ``domains`` is given."""
    if labels is None:
        raise ConfigurationError("evaluation needs a labeled split")
    pred = predict(net, images, mode, asts, prototype)
    cm = confusion_matrix(pred, labels, num_classes)
    iou, miou = iou_from_confusion(cm)
    per = {}
    if domains is not None:
        domains = np.asarray(domains)
        for d in dict.fromkeys(domains.tolist()):
            sel = domains == d
            per[d] = iou_from_confusion(confusion_matrix(pred[sel], labels[sel], num_classes))[1]
    return EvalResult(list(iou), miou, cm, per)


def eval_mode(cfg, adapted=True):
    if not adapted:
        return "plain"
    if cfg.adapt.eval_mode != "auto":
        return cfg.adapt.eval_mode
    return _norm_mode(cfg)
