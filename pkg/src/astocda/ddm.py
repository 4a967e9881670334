"""Domain-discriminability probes over frozen per-layer features.

DDM at layer k is the held-out accuracy of a discriminator trained from
scratch to predict the style family of a sample:

* spatial: a small conv net on the (pooled) feature maps h_k;
* latent: a 2-layer MLP on the AST latents of h_k, from a throwaway AST
  auto-encoder fitted to that layer's features.

Samples are split 80/20 by content seed, so all styles of one scene land on
the same side of the split.
"""

from dataclasses import dataclass, field
import csv
import io
import math

import numpy as np

from . import ast as astmod
from .errors import ConfigurationError, TrainingDivergence
from .optim import SGD, poly_lr
from .tensor import (
    Tensor,
    conv2d,
    leaky_relu,
    linear,
    no_grad,
    parameter,
    relu,
    softmax_cross_entropy,
    tmean,
)

CSV_COLUMNS = ("phase", "layer", "spatial_ddm", "latent_ddm")
PHASES = ("pre_adaptation", "post_adaptation")


@dataclass
class ProbeConfig:
    erm_steps: int = 4000  # study network trained on the labeled multi-domain split
    erm_lr: float = 0.02
    pool_to: int = 16
    spatial_widths: list = field(default_factory=lambda: [32, 64])
    spatial_steps: int = 600
    spatial_lr: float = 0.02
    latent_hidden: int = 256
    latent_steps: int = 600
    latent_lr: float = 0.05
    ast_steps: int = 800
    ast_lr: float = 0.05
    batch_size: int = 32
    train_fraction: float = 0.8  # used when folds == 1
    folds: int = 5  # grouped cross-validation; every sample is scored once
    weight_decay: float = 5e-4


@dataclass
class LayerDdm:
    phase: str
    layer: int
    spatial_ddm: float
    latent_ddm: float


def seed_split(seeds, fraction=0.8, seed=0):
    """Boolean train mask over samples, grouping samples by content seed."""
    uniq = np.array(sorted(set(int(s) for s in seeds)))
    perm = np.random.default_rng([int(seed), 0xDD]).permutation(len(uniq))
    n_train = int(round(fraction * len(uniq)))
    train_seeds = set(uniq[perm[:n_train]].tolist())
    return np.array([int(s) in train_seeds for s in seeds])


def seed_folds(seeds, k, seed=0):
    """Fold index per sample; all samples of one content seed share a fold."""
    uniq = np.array(sorted(set(int(s) for s in seeds)))
    if k < 2 or k > len(uniq):
        raise ConfigurationError(f"need 2 <= folds <= {len(uniq)} content seeds, got {k}")
    perm = np.random.default_rng([int(seed), 0xDD]).permutation(len(uniq))
    fold_of = {int(uniq[j]): i % k for i, j in enumerate(perm)}
    return np.array([fold_of[int(s)] for s in seeds])


def heldout_masks(seeds, cfg, seed=0):
    """Train masks whose complements partition the samples (a single split if folds == 1)."""
    if cfg.folds <= 1:
        return [seed_split(seeds, cfg.train_fraction, seed)]
    fold = seed_folds(seeds, cfg.folds, seed)
    return [fold != i for i in range(cfg.folds)]


def pool_features(f, max_side=16):
    """Average-pool (N, C, H, W) by an integer factor until H, W <= max_side."""
    n, c, h, w = f.shape
    k = max(1, math.ceil(max(h, w) / max_side))
    if k == 1:
        return f
    if h % k or w % k:
        raise ConfigurationError(f"cannot pool {h}x{w} evenly by {k}")
    return f.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def _minibatches(n, batch, steps, rng):
    order = np.array([], dtype=int)
    for _ in range(steps):
        if len(order) < batch:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:batch]
        order = order[batch:]


def _fit(params, forward, x, y, steps, lr, batch, wd, rng, stage="ddm_probe"):
    opt = SGD(params, lr, 0.9, wd)
    for step, idx in enumerate(_minibatches(len(x), batch, steps, rng)):
        cur = poly_lr(lr, step, steps)
        opt.zero_grad()
        logits = forward(Tensor(x[idx]))
        loss = softmax_cross_entropy(logits.reshape(len(idx), -1, 1, 1), y[idx].reshape(-1, 1, 1))
        if not np.isfinite(loss.item()):
            raise TrainingDivergence(stage, step, cur, loss.item())
        loss.backward()
        opt.step(cur)


def _accuracy(forward, x, y):
    with no_grad():
        pred = np.argmax(forward(Tensor(x)).data, axis=1)
    return float(np.mean(pred == y))


class SpatialDiscriminator:
    """conv4x4/s2 -> LReLU(0.2) -> conv4x4/s2 -> LReLU(0.2) -> conv4x4/s2 -> global mean."""

    def __init__(self, in_channels, n_domains, widths=(32, 64), seed=0):
        rng = np.random.default_rng([int(seed), 0xD15C])
        chans = [in_channels] + list(widths) + [n_domains]
        self.layers = []
        for a, b in zip(chans[:-1], chans[1:]):
            w = parameter(rng.normal(0.0, math.sqrt(2.0 / (a * 16)), size=(b, a, 4, 4)))
            self.layers.append((w, parameter(np.zeros(b))))

    def parameters(self):
        return [p for wb in self.layers for p in wb]

    def __call__(self, x):
        for i, (w, b) in enumerate(self.layers):
            x = conv2d(x, w, b, stride=2, pad=1)
            if i < len(self.layers) - 1:
                x = leaky_relu(x, 0.2)
        return tmean(tmean(x, axis=3), axis=2)


class LatentDiscriminator:
    """Linear -> ReLU -> Linear on flattened latents."""

    def __init__(self, in_dim, n_domains, hidden=256, seed=0):
        rng = np.random.default_rng([int(seed), 0x1A7])
        self.w1 = parameter(rng.normal(0.0, math.sqrt(2.0 / in_dim), size=(in_dim, hidden)))
        self.b1 = parameter(np.zeros(hidden))
        self.w2 = parameter(rng.normal(0.0, math.sqrt(1.0 / hidden), size=(hidden, n_domains)))
        self.b2 = parameter(np.zeros(n_domains))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x):
        return linear(relu(linear(x, self.w1, self.b1)), self.w2, self.b2)


def _check_domains(labels):
    n_dom = len(np.unique(labels))
    if n_dom < 2:
        raise ConfigurationError("a discriminability probe needs at least two domains")
    return int(labels.max()) + 1


def spatial_accuracy(features, labels, train_mask, cfg=None, seed=0):
    """Held-out accuracy of a fresh conv discriminator on (N, C, H, W) features."""
    cfg = cfg or ProbeConfig()
    labels = np.asarray(labels)
    n_dom = _check_domains(labels)
    f = pool_features(np.asarray(features, dtype=np.float64), cfg.pool_to)
    # fixed per-channel standardization (train statistics) keeps one optimizer setting usable at every depth
    mu = f[train_mask].mean(axis=(0, 2, 3), keepdims=True)
    sd = f[train_mask].std(axis=(0, 2, 3), keepdims=True)
    f = (f - mu) / (sd + 1e-8)
    disc = SpatialDiscriminator(f.shape[1], n_dom, cfg.spatial_widths, seed)
    rng = np.random.default_rng([int(seed), 0x5A])
    _fit(disc.parameters(), disc, f[train_mask], labels[train_mask], cfg.spatial_steps,
         cfg.spatial_lr, cfg.batch_size, cfg.weight_decay, rng, "ddm_spatial")
    return _accuracy(disc, f[~train_mask], labels[~train_mask])


def latent_accuracy(latents, labels, train_mask, cfg=None, seed=0):
    """Held-out accuracy of a fresh MLP discriminator on (N, ...) latents."""
    cfg = cfg or ProbeConfig()
    labels = np.asarray(labels)
    n_dom = _check_domains(labels)
    z = np.asarray(latents, dtype=np.float64).reshape(len(labels), -1)
    disc = LatentDiscriminator(z.shape[1], n_dom, cfg.latent_hidden, seed)
    rng = np.random.default_rng([int(seed), 0x1B])
    _fit(disc.parameters(), disc, z[train_mask], labels[train_mask], cfg.latent_steps,
         cfg.latent_lr, cfg.batch_size, cfg.weight_decay, rng, "ddm_latent")
    return _accuracy(disc, z[~train_mask], labels[~train_mask])


def fit_layer_ast(features, train_mask, ast_cfg, cfg=None, seed=0):
    """Throwaway AST for one layer, fitted by reconstruction on the train features."""
    cfg = cfg or ProbeConfig()
    module = astmod.AstModule(seed=seed, **ast_cfg)
    train = features[train_mask]
    rng = np.random.default_rng([int(seed), 0xA57])
    batches = (train[idx] for idx in _minibatches(len(train), 8, cfg.ast_steps, rng))
    history = astmod.train_autoencoder(module, batches, cfg.ast_steps, cfg.ast_lr, stage="ddm_ast")
    return module, history


def encode_all(module, features, batch=32):
    out = []
    with no_grad():
        for i in range(0, len(features), batch):
            out.append(astmod.encode(module, features[i : i + batch]).data)
    return np.concatenate(out)


def layer_features(net, images, mode="plain", asts=None, prototype=None, batch=32):
    """Per-block outputs [(N, C_k, H_k, W_k)] of the frozen network."""
    ast_cs, ast_dn = asts if asts is not None else (None, None)
    blocks = None
    with no_grad():
        for i in range(0, len(images), batch):
            out = net.run(images[i : i + batch], mode, ast_cs, ast_dn, prototype=prototype)
            feats = [b.data for b in out["blocks"]]
            blocks = [[f] for f in feats] if blocks is None else [acc + [f] for acc, f in zip(blocks, feats)]
    return [np.concatenate(b) for b in blocks]


def run_study(net, split, phase, ast_cfg, cfg=None, seed=0, mode="plain", asts=None, prototype=None, layers=None):
    """DDM at every probed layer for one network state. Returns [LayerDdm]."""
    if phase not in PHASES:
        raise ConfigurationError(f"phase must be one of {PHASES}")
    cfg = cfg or ProbeConfig()
    fams = sorted(set(split.families), key=list(split.families).index)
    labels = np.array([fams.index(f) for f in split.families])
    masks = heldout_masks(split.seeds, cfg, seed)
    feats = layer_features(net, split.images, mode, asts, prototype)
    layers = layers or list(range(1, len(feats) + 1))
    rows = []
    for k in layers:
        f = feats[k - 1]
        s_hits = l_hits = n_test = 0
        for i, mask in enumerate(masks):
            pseed = (seed * 100 + k) * 10 + i
            n = int((~mask).sum())
            s_hits += n * spatial_accuracy(f, labels, mask, cfg, seed=pseed)
            # throwaway AST at the layer's own resolution, no resize
            layer_ast = dict(ast_cfg, resize_h=f.shape[2], resize_w=f.shape[3])
            module, _ = fit_layer_ast(f, mask, layer_ast, cfg, seed=pseed)
            z = encode_all(module, f)
            l_hits += n * latent_accuracy(z, labels, mask, cfg, seed=pseed)
            n_test += n
        rows.append(LayerDdm(phase, k, round(s_hits) / n_test, round(l_hits) / n_test))
    return rows


def emit_report(reports, path=None):
    """Render [LayerDdm] as CSV text (columns phase, layer, spatial_ddm, latent_ddm)."""
    if not reports:
        raise ConfigurationError("emit_report needs at least one row")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([r.phase, r.layer, repr(float(r.spatial_ddm)), repr(float(r.latent_ddm))])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_report(path_or_text):
    text = path_or_text
    if "\n" not in path_or_text:
        with open(path_or_text) as fh:
            text = fh.read()
    rows = list(csv.DictReader(io.StringIO(text)))
    return [LayerDdm(r["phase"], int(r["layer"]), float(r["spatial_ddm"]), float(r["latent_ddm"])) for r in rows]
