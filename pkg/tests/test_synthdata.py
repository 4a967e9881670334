import hashlib
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from astocda import synthdata as sd
from astocda.errors import ConfigurationError

TINY = dict(n_source=6, n_compound=9, n_compound_val=2, n_open=3, n_ddm=3, n_ddm_train=8)


def test_same_seed_bit_identical():
    a = sd.generate_scene(1234)
    b = sd.generate_scene(1234)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_label_classes_in_range_and_image_in_unit_box():
    for s in range(50):
        img, lab = sd.generate_scene(s)
        assert img.shape == (3, 64, 64) and lab.shape == (64, 64)
        assert 0.0 <= img.min() and img.max() <= 1.0
        assert lab.min() >= 0 and lab.max() < 5


def test_three_classes_in_95_percent_of_scenes():
    ok = sum(len(np.unique(sd.generate_scene(s)[1])) >= 3 for s in range(1000))
    assert ok >= 950


def test_background_is_exact_complement_of_objects():
    # rebuild the object union independently from the painted label map:
    # every non-background pixel carries an object class, every other pixel is class 0
    for s in range(20):
        img, lab = sd.generate_scene(s)
        objects = lab > 0
        assert np.array_equal(lab == 0, ~objects)
        assert objects.any() and (~objects).any()


def test_identity_style_is_identity():
    img, _ = sd.generate_scene(3)
    out = sd.apply_style(img, sd.StyleParams())
    assert np.array_equal(out, img)


def test_style_never_touches_labels():
    for fam in sd.STYLE_FAMILIES:
        _, lab = sd.styled_sample(77, fam, 64, 5)
        assert np.array_equal(lab, sd.generate_scene(77)[1])


def _low_freq_amp(img, r=4):
    a = np.abs(np.fft.fft2(img, axes=(-2, -1)))
    a = np.fft.fftshift(a, axes=(-2, -1))
    c = img.shape[-1] // 2
    return a[:, c - r : c + r + 1, c - r : c + r + 1].mean()


def test_style_shifts_low_frequency_amplitude():
    fams = list(sd.STYLE_FAMILIES)
    means = {f: np.mean([_low_freq_amp(sd.styled_sample(s, f, 64, 5)[0]) for s in range(30)]) for f in fams}
    shifts = [abs(means[a] - means[b]) / min(means[a], means[b]) for a, b in itertools.combinations(fams, 2)]
    assert max(shifts) > 0.10
    assert abs(means[sd.OPEN_FAMILY] - means["source"]) / means["source"] > 0.10


def test_families_pairwise_disjoint():
    for a, b in itertools.combinations(sd.STYLE_FAMILIES, 2):
        assert sd.families_disjoint(a, b), (a, b)


def test_sampled_styles_stay_in_their_boxes():
    for fam, box in sd.STYLE_FAMILIES.items():
        for s in range(20):
            p = sd.sample_style(fam, s)
            for v, (lo, hi) in zip(p.gain, box["gain"]):
                assert lo <= v <= hi
            assert all(box["illum"][0] <= v <= box["illum"][1] for v in p.illum)
            assert box["noise"][0] <= p.noise <= box["noise"][1]
            assert box["blur"][0] <= p.blur <= box["blur"][1]


@settings(max_examples=10)
@given(st.integers(0, 10**6))
def test_content_style_independence(seed):
    labels = [sd.styled_sample(seed, f, 32, 5)[1] for f in sd.STYLE_FAMILIES]
    assert all(np.array_equal(labels[0], l) for l in labels[1:])


def test_default_sizes():
    cfg = sd.DataConfig()
    assert (cfg.n_source, cfg.n_compound, cfg.n_open, cfg.image_size) == (400, 300, 100, 64)


def test_split_seeds_disjoint_and_images_unique():
    cfg = sd.DataConfig(**TINY)
    plan = sd.split_plan(cfg)
    by_split = {}
    for e in plan:
        by_split.setdefault(e["name"], set()).update(e["seeds"])
    for a, b in itertools.combinations(by_split, 2):
        assert not by_split[a] & by_split[b], (a, b)
    splits = sd.make_splits(cfg)
    hashes = [hashlib.sha256(im.tobytes()).hexdigest() for s in splits.values() for im in s.images]
    assert len(hashes) == len(set(hashes))


def test_split_counts_and_labeling():
    cfg = sd.DataConfig(**TINY)
    splits = sd.make_splits(cfg)
    assert len(splits["source"]) == 6 and len(splits["compound_train"]) == 9
    assert len(splits["compound_val"]) == 2 * 3 and len(splits["open"]) == 3
    assert len(splits["ddm"]) == 3 * 4 and len(splits["ddm_train"]) == 8
    assert splits["compound_train"].labels is None
    assert splits["source"].labels is not None and splits["open"].labels is not None
    assert set(splits["compound_train"].families) <= set(sd.COMPOUND_FAMILIES)
    assert set(splits["open"].families) == {sd.OPEN_FAMILY}
    assert set(splits["ddm"].families) == set(sd.DDM_FAMILIES)


def test_sample_view_tags():
    splits = sd.make_splits(sd.DataConfig(**TINY))
    src = next(splits["source"].samples())
    assert src.domain == "source" and src.label is not None
    tgt = next(splits["compound_train"].samples())
    assert tgt.domain.startswith("compound:") and tgt.label is None
    assert next(splits["ddm"].samples()).domain.startswith("ddm:")


def test_open_family_outside_compound_ranges():
    for fam in sd.COMPOUND_FAMILIES:
        assert sd.families_disjoint(sd.OPEN_FAMILY, fam)


def test_hidden_labels_match_scene_generator():
    cfg = sd.DataConfig(**TINY)
    split = sd.make_splits(cfg)["compound_train"]
    hid = sd.hidden_labels(split, cfg.image_size, cfg.num_classes)
    assert np.array_equal(hid[0], sd.generate_scene(split.seeds[0])[1])


def _fit_softmax_probe(x, y, k, steps=3000, lr=1.0):
    # multinomial logistic regression by full-batch gradient descent
    w, b = np.zeros((x.shape[1], k)), np.zeros(k)
    onehot = np.eye(k)[y]
    for _ in range(steps):
        z = x @ w + b
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(x)
        w -= lr * x.T @ g
        b -= lr * g.sum(axis=0)
    return w, b


def test_ddm_families_linearly_separable_from_channel_means():
    cfg = sd.DataConfig(n_ddm=150)
    ddm = sd._build_split("ddm", [e for e in sd.split_plan(cfg) if e["name"] == "ddm"], 64, 5)
    x = ddm.images.mean(axis=(2, 3))
    y = np.array([sd.DDM_FAMILIES.index(f) for f in ddm.families])
    train = np.array([s % 5 != 0 for s in ddm.seeds])
    mu, sd_ = x[train].mean(axis=0), x[train].std(axis=0)
    x = (x - mu) / sd_
    w, b = _fit_softmax_probe(x[train], y[train], 4)
    pred = np.argmax(x[~train] @ w + b, axis=1)
    assert (pred == y[~train]).mean() > 0.9


def test_write_load_roundtrip_and_regeneration(tmp_path):
    cfg = sd.DataConfig(**TINY)
    man = sd.write_dataset(cfg, tmp_path)
    man2, loaded = sd.load_dataset(tmp_path)
    assert man2 == __import__("json").loads(__import__("json").dumps(man))
    assert sd.config_from_manifest(man2) == cfg
    regen = sd.make_splits(sd.config_from_manifest(man2))
    for name, split in regen.items():
        assert split.images.tobytes() == loaded[name].images.tobytes()
        assert split.seeds == loaded[name].seeds and split.families == loaded[name].families
        if split.labels is None:
            assert loaded[name].labels is None
        else:
            assert np.array_equal(split.labels, loaded[name].labels)


def test_manifest_hash_stable(tmp_path):
    cfg = sd.DataConfig(**TINY)
    sd.write_dataset(cfg, tmp_path / "a")
    sd.write_dataset(cfg, tmp_path / "b")
    assert sd.manifest_hash(tmp_path / "a") == sd.manifest_hash(tmp_path / "b")
    sd.write_dataset(sd.DataConfig(**dict(TINY, seed=1)), tmp_path / "c")
    assert sd.manifest_hash(tmp_path / "a") != sd.manifest_hash(tmp_path / "c")


def test_manifest_schema():
    man = sd.manifest(sd.DataConfig(**TINY))
    assert {"version", "image_size", "class_count", "splits", "style_ranges"} <= set(man)
    assert all({"name", "family", "seeds"} <= set(e) for e in man["splits"])


def test_missing_manifest(tmp_path):
    with pytest.raises(ConfigurationError):
        sd.load_dataset(tmp_path)


@pytest.mark.parametrize("bad", [dict(n_source=0), dict(n_ddm=-1), dict(image_size=48), dict(num_classes=1)])
def test_bad_config(bad):
    with pytest.raises(ConfigurationError):
        sd.DataConfig(**bad)
