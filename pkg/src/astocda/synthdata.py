"""Procedural multi-domain dense-labeling benchmark.

A scene is a textured background (class 0) with geometric objects of
classes 1..K-1 painted over it. Content depends only on the scene seed;
domain appearance is applied afterwards by a style pipeline

    gain -> illumination (multiplicative field + additive cast) -> blur -> noise -> clamp

whose parameters are drawn from per-family boxes that do not overlap. Style
acts at low spatial frequency, so it lives mostly in the amplitude spectrum
while the layout (phase structure) is shared across styles of one seed.
"""

from dataclasses import asdict, dataclass, field
import hashlib
import json
import os

import numpy as np
from scipy.ndimage import gaussian_filter

from . import checkpoint
from .errors import ConfigurationError

MANIFEST_VERSION = 1

# per-class appearance: base RGB and texture kind
_PALETTE = [
    (0.50, 0.50, 0.48),  # background
    (0.80, 0.25, 0.20),
    (0.20, 0.35, 0.80),
    (0.85, 0.80, 0.20),
    (0.25, 0.72, 0.35),
    (0.70, 0.30, 0.75),
    (0.20, 0.75, 0.75),
    (0.90, 0.55, 0.15),
    (0.45, 0.30, 0.15),
]
_SHAPES = ("disc", "box", "triangle", "ring")
_TEXTURES = ("flat", "hstripes", "checker", "dstripes")

# parameter boxes per family: gain (3 ranges), offset (3 ranges), illum (one range
# shared by the 3 field coefficients), noise, blur
STYLE_FAMILIES = {
    "source": {
        "gain": [[0.95, 1.05]] * 3,
        "offset": [[0.0, 0.03]] * 3,
        "illum": [-0.1, 0.1],
        "noise": [0.0, 0.01],
        "blur": [0.0, 0.3],
    },
    "dusk": {
        "gain": [[0.50, 0.62], [0.48, 0.60], [0.75, 0.88]],
        "offset": [[0.0, 0.03], [0.0, 0.03], [0.05, 0.10]],
        "illum": [-0.3, 0.3],
        "noise": [0.02, 0.04],
        "blur": [0.3, 0.7],
    },
    "haze": {
        "gain": [[0.60, 0.72]] * 3,
        "offset": [[0.25, 0.35]] * 3,
        "illum": [-0.15, 0.15],
        "noise": [0.01, 0.03],
        "blur": [0.8, 1.2],
    },
    "sunny": {
        "gain": [[1.25, 1.40], [1.05, 1.20], [0.70, 0.85]],
        "offset": [[0.0, 0.03], [0.0, 0.03], [0.0, 0.03]],
        "illum": [-0.2, 0.2],
        "noise": [0.01, 0.03],
        "blur": [0.0, 0.3],
    },
    "night": {
        "gain": [[0.35, 0.45], [0.38, 0.48], [0.45, 0.55]],
        "offset": [[0.0, 0.03], [0.02, 0.05], [0.10, 0.18]],
        "illum": [-0.4, 0.4],
        "noise": [0.05, 0.07],
        "blur": [0.5, 0.9],
    },
    # strong augmentations of source content for the discriminability study
    "tint": {
        "gain": [[1.15, 1.25], [0.85, 0.95], [1.15, 1.25]],
        "offset": [[0.0, 0.03]] * 3,
        "illum": [-0.1, 0.1],
        "noise": [0.0, 0.01],
        "blur": [0.0, 0.3],
    },
    "frost": {
        "gain": [[0.70, 0.80]] * 3,
        "offset": [[0.18, 0.24], [0.20, 0.26], [0.24, 0.30]],
        "illum": [-0.1, 0.1],
        "noise": [0.04, 0.06],
        "blur": [0.0, 0.3],
    },
    "cartoon": {
        "gain": [[1.30, 1.45]] * 3,
        "offset": [[-0.28, -0.22]] * 3,
        "illum": [-0.1, 0.1],
        "noise": [0.0, 0.01],
        "blur": [1.0, 1.4],
    },
}

COMPOUND_FAMILIES = ("dusk", "haze", "sunny")
OPEN_FAMILY = "night"
DDM_FAMILIES = ("source", "tint", "frost", "cartoon")

# content-seed offsets keep splits disjoint
_SPLIT_OFFSETS = {
    "source": 0,
    "compound_train": 100_000,
    "compound_val": 200_000,
    "open": 300_000,
    "ddm": 400_000,
    "ddm_train": 500_000,
}


@dataclass
class StyleParams:
    gain: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    offset: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    illum: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    noise: float = 0.0
    blur: float = 0.0


@dataclass
class DomainSample:
    image: np.ndarray
    label: object  # (H, W) int array or None
    domain: str  # "source", "compound:<family>", "open" or "ddm:<family>"
    seed: int


@dataclass
class DataConfig:
    seed: int = 0
    image_size: int = 64
    num_classes: int = 5
    n_source: int = 400
    n_compound: int = 300
    n_compound_val: int = 200  # per compound family
    n_open: int = 100
    n_ddm: int = 200  # per discriminability family (probe split)
    n_ddm_train: int = 400  # labeled multi-domain set for the discriminability study network

    def __post_init__(self):
        sizes = (self.n_source, self.n_compound, self.n_compound_val, self.n_open, self.n_ddm, self.n_ddm_train)
        if min(sizes) <= 0:
            raise ConfigurationError("all split sizes must be positive")
        if not 2 <= self.num_classes <= len(_PALETTE):
            raise ConfigurationError(f"num_classes must be in [2, {len(_PALETTE)}]")
        if self.image_size < 16 or self.image_size & (self.image_size - 1):
            raise ConfigurationError("image_size must be a power of two >= 16")


# -- content -----------------------------------------------------------------


def _texture(kind, yy, xx, rng):
    if kind == "flat":
        return np.zeros_like(yy)
    if kind == "hstripes":
        return 0.10 * np.sign(np.sin(2 * np.pi * yy / 4.0 + rng.uniform(0, 2 * np.pi)))
    if kind == "checker":
        p = rng.uniform(0, 6)
        return 0.08 * (((np.floor((yy + p) / 3) + np.floor((xx + p) / 3)) % 2) * 2 - 1)
    return 0.10 * np.sign(np.sin(2 * np.pi * (xx + yy) / 5.0 + rng.uniform(0, 2 * np.pi)))


def _shape_mask(shape, yy, xx, cy, cx, r, rng):
    if shape == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "box":
        hy, hx = r * rng.uniform(0.6, 1.0), r * rng.uniform(0.6, 1.0)
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    if shape == "triangle":
        # upward triangle of height 2r
        top, base = cy - r, cy + r
        half = (yy - top) / (2 * r) * r
        return (yy >= top) & (yy <= base) & (np.abs(xx - cx) <= half)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)


def generate_scene(seed, size=64, num_classes=5):
    """(image (3, H, W) in [0, 1], label (H, W) int64) for a content seed."""
    rng = np.random.default_rng([int(seed), 0x5CE4E])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = np.array(_PALETTE[0]) + rng.uniform(-0.05, 0.05, 3)
    tex = np.zeros((size, size))
    for _ in range(2):
        fy, fx = rng.uniform(0.02, 0.12, 2)
        tex += 0.05 * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    image = base[:, None, None] + tex[None] + 0.02 * rng.standard_normal((3, size, size))
    label = np.zeros((size, size), dtype=np.int64)

    n_obj = int(rng.integers(3, 7))
    classes = list(rng.integers(1, num_classes, size=n_obj))
    if num_classes > 2:
        # the two topmost objects have distinct classes so >= 3 classes stay visible
        top = rng.choice(np.arange(1, num_classes), size=2, replace=False)
        classes[-2:] = [int(c) for c in top]
    scale = size / 64.0
    margin = 8 * scale
    for attempt in range(10):
        canvas, lab = image.copy(), label.copy()
        for k in classes:
            k = int(k)
            shape = _SHAPES[(k - 1) % len(_SHAPES)]
            kind = _TEXTURES[((k - 1) + (k - 1) // len(_SHAPES)) % len(_TEXTURES)]
            cy, cx = rng.uniform(margin, size - margin, 2)
            r = rng.uniform(8, 15) * scale
            mask = _shape_mask(shape, yy, xx, cy, cx, r, rng)
            color = np.array(_PALETTE[k]) + rng.uniform(-0.08, 0.08, 3)
            fill = color[:, None, None] + _texture(kind, yy, xx, rng)[None]
            canvas = np.where(mask[None], fill, canvas)
            lab[mask] = k
        if len(np.unique(lab)) >= min(3, num_classes) or attempt == 9:
            break
    return np.clip(canvas, 0.0, 1.0), lab


# -- style -------------------------------------------------------------------


def sample_style(family, seed):
    ranges = STYLE_FAMILIES[family]
    rng = np.random.default_rng([int(seed), sorted(STYLE_FAMILIES).index(family), 0x57])
    gain = [float(rng.uniform(lo, hi)) for lo, hi in ranges["gain"]]
    offset = [float(rng.uniform(lo, hi)) for lo, hi in ranges["offset"]]
    illum = [float(v) for v in rng.uniform(*ranges["illum"], size=3)]
    return StyleParams(gain, offset, illum, float(rng.uniform(*ranges["noise"])), float(rng.uniform(*ranges["blur"])))


def apply_style(image, style, noise_seed=0):
    """Apply a StyleParams to a (3, H, W) image in [0, 1]; labels are never touched."""
    img = np.asarray(image, dtype=np.float64) * np.asarray(style.gain)[:, None, None]
    h, w = img.shape[1:]
    yn = np.linspace(-1.0, 1.0, h)[:, None]
    xn = np.linspace(-1.0, 1.0, w)[None, :]
    c1, c2, c3 = style.illum
    img = img * (1.0 + c1 * xn + c2 * yn + c3 * xn * yn)[None] + np.asarray(style.offset)[:, None, None]
    if style.blur > 0:
        img = gaussian_filter(img, sigma=(0.0, style.blur, style.blur), mode="reflect")
    if style.noise > 0:
        img = img + style.noise * np.random.default_rng([int(noise_seed), 0x401]).standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def styled_sample(seed, family, size, num_classes):
    image, label = generate_scene(seed, size, num_classes)
    return apply_style(image, sample_style(family, seed), seed), label


def families_disjoint(a, b):
    """True if the parameter boxes of two families share no point."""
    ra, rb = STYLE_FAMILIES[a], STYLE_FAMILIES[b]
    pairs = list(zip(ra["gain"], rb["gain"])) + list(zip(ra["offset"], rb["offset"]))
    pairs += [(ra[k], rb[k]) for k in ("illum", "noise", "blur")]
    return any(x[1] < y[0] or y[1] < x[0] for x, y in pairs)


# -- splits ------------------------------------------------------------------


def split_plan(cfg):
    """Manifest split entries: [{name, family, seeds, labeled}]."""
    base = cfg.seed * 1_000_000

    def seeds(split, n, start=0):
        off = base + _SPLIT_OFFSETS[split] + start
        return list(range(off, off + n))

    plan = [{"name": "source", "family": "source", "seeds": seeds("source", cfg.n_source), "labeled": True}]
    # compound mixture: family drawn per sample, family ids kept for evaluation only
    rng = np.random.default_rng([cfg.seed, 0xC0])
    fam_of = rng.integers(0, len(COMPOUND_FAMILIES), size=cfg.n_compound)
    all_c = seeds("compound_train", cfg.n_compound)
    for f, fam in enumerate(COMPOUND_FAMILIES):
        plan.append(
            {"name": "compound_train", "family": fam, "seeds": [s for s, g in zip(all_c, fam_of) if g == f], "labeled": False}
        )
    for f, fam in enumerate(COMPOUND_FAMILIES):
        plan.append(
            {
                "name": "compound_val",
                "family": fam,
                "seeds": seeds("compound_val", cfg.n_compound_val, f * cfg.n_compound_val),
                "labeled": True,
            }
        )
    plan.append({"name": "open", "family": OPEN_FAMILY, "seeds": seeds("open", cfg.n_open), "labeled": True})
    ddm_seeds = seeds("ddm", cfg.n_ddm)
    for fam in DDM_FAMILIES:
        plan.append({"name": "ddm", "family": fam, "seeds": list(ddm_seeds), "labeled": True})
    # labeled source content cycled through the discriminability families
    train_seeds = seeds("ddm_train", cfg.n_ddm_train)
    for f, fam in enumerate(DDM_FAMILIES):
        plan.append({"name": "ddm_train", "family": fam, "seeds": train_seeds[f :: len(DDM_FAMILIES)], "labeled": True})
    return plan

_INTERLEAVED = ("compound_train", "ddm_train")


@dataclass
class Split:
    name: str
    images: np.ndarray  # (N, 3, H, W)
    labels: object  # (N, H, W) int64 or None
    families: list
    seeds: list

    def __len__(self):
        return len(self.seeds)

    def samples(self):
        tag = {"source": "source", "open": "open"}.get(self.name)
        for i in range(len(self)):
            dom = tag or f"{'ddm' if self.name.startswith('ddm') else 'compound'}:{self.families[i]}"
            lab = None if self.labels is None else self.labels[i]
            yield DomainSample(self.images[i], lab, dom, self.seeds[i])


def _build_split(name, entries, size, num_classes):
    items = [(s, e["family"]) for e in entries for s in e["seeds"]]
    if name in _INTERLEAVED:
        items.sort()  # families interleaved by seed order
    imgs, labs = [], []
    for s, fam in items:
        img, lab = styled_sample(s, fam, size, num_classes)
        imgs.append(img)
        labs.append(lab)
    labeled = all(e["labeled"] for e in entries)
    return Split(
        name,
        np.stack(imgs),
        np.stack(labs) if labeled else None,
        [f for _, f in items],
        [s for s, _ in items],
    )


def make_splits(cfg):
    """Deterministic in-memory splits keyed by name."""
    plan = split_plan(cfg)
    out = {}
    for name in dict.fromkeys(e["name"] for e in plan):
        out[name] = _build_split(name, [e for e in plan if e["name"] == name], cfg.image_size, cfg.num_classes)
    return out


def hidden_labels(split, size, num_classes):
    """Ground truth of an unlabeled split, regenerated from its content seeds (diagnostics only)."""
    return np.stack([generate_scene(s, size, num_classes)[1] for s in split.seeds])


# -- persistence -------------------------------------------------------------


def manifest(cfg):
    return {
        "version": MANIFEST_VERSION,
        "image_size": cfg.image_size,
        "class_count": cfg.num_classes,
        "seed": cfg.seed,
        "splits": split_plan(cfg),
        "style_ranges": STYLE_FAMILIES,
    }


def _record_name(split, i):
    return os.path.join("records", f"{split}_{i:05d}.astc")


def write_dataset(cfg, out_dir):
    """Write manifest.json and one ASTC record per sample; returns the manifest."""
    man = manifest(cfg)
    os.makedirs(os.path.join(out_dir, "records"), exist_ok=True)
    for name, split in make_splits(cfg).items():
        for i in range(len(split)):
            rec = {"image": split.images[i]}
            if split.labels is not None:
                rec["label"] = split.labels[i].astype(np.float64)
            checkpoint.save(os.path.join(out_dir, _record_name(name, i)), rec)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return man


def config_from_manifest(man):
    counts = {}
    for e in man["splits"]:
        counts.setdefault(e["name"], []).append(len(e["seeds"]))
    return DataConfig(
        seed=man["seed"],
        image_size=man["image_size"],
        num_classes=man["class_count"],
        n_source=sum(counts["source"]),
        n_compound=sum(counts["compound_train"]),
        n_compound_val=counts["compound_val"][0],
        n_open=sum(counts["open"]),
        n_ddm=counts["ddm"][0],
        n_ddm_train=sum(counts["ddm_train"]),
    )


def load_dataset(data_dir):
    """Read splits back from disk. Returns (manifest, {name: Split})."""
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise ConfigurationError(f"no manifest.json in {data_dir!r}; run gen-data first")
    with open(path) as fh:
        man = json.load(fh)
    if man.get("version") != MANIFEST_VERSION:
        raise ConfigurationError(f"unsupported manifest version {man.get('version')}")
    splits = {}
    for name in dict.fromkeys(e["name"] for e in man["splits"]):
        entries = [e for e in man["splits"] if e["name"] == name]
        items = [(s, e["family"]) for e in entries for s in e["seeds"]]
        if name in _INTERLEAVED:
            items.sort()
        imgs, labs = [], []
        for i in range(len(items)):
            rec = checkpoint.load(os.path.join(data_dir, _record_name(name, i)))
            imgs.append(rec["image"])
            if "label" in rec:
                labs.append(rec["label"].astype(np.int64))
        labeled = all(e["labeled"] for e in entries)
        splits[name] = Split(
            name,
            np.stack(imgs),
            np.stack(labs) if labeled else None,
            [f for _, f in items],
            [s for s, _ in items],
        )
    return man, splits


def manifest_hash(data_dir):
    with open(os.path.join(data_dir, "manifest.json"), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def config_dict(cfg):
    return asdict(cfg)
