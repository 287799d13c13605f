import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from auxgan.errors import InvalidArgumentError
from auxgan.metrics import dice
from auxgan.phantom import (
    ANATOMY_LABELS,
    DatasetManifest,
    Label,
    Modality,
    SliceImage,
    file_digest,
    generate_dataset,
    label_map,
    render,
    sample_geometry,
    segment_rule_based,
)

seeds = st.integers(0, 2**31 - 2)


def test_sample_geometry_deterministic():
    a, b = sample_geometry(7), sample_geometry(7)
    assert a.to_dict() == b.to_dict()
    assert sample_geometry(8).to_dict() != a.to_dict()


def test_geometry_roundtrip():
    g = sample_geometry(3)
    assert type(g).from_dict(json.loads(json.dumps(g.to_dict()))).to_dict() == g.to_dict()


def test_min_resolution():
    with pytest.raises(InvalidArgumentError):
        sample_geometry(0, resolution=31)
    sample_geometry(0, resolution=32)


@settings(max_examples=40, deadline=None)
@given(seed=seeds, res=st.sampled_from([32, 64, 128]))
def test_geometry_constraints(seed, res):
    g = sample_geometry(seed, res)
    m = g.organ_masks()
    inner_body = ndimage.binary_erosion(m["body"], iterations=2)
    organs = ["femur_left", "femur_right", "bladder", "prostate"] + (["air_cavity"] if g.air_cavity else [])
    for name in organs:
        assert m[name].any()
        assert not (m[name] & ~inner_body).any(), name
    for i, a in enumerate(organs):
        for b in organs[i + 1 :]:
            assert not (ndimage.binary_dilation(m[a]) & m[b]).any(), (a, b)
    assert not (m["couch"] & m["body"]).any()


@settings(max_examples=25, deadline=None)
@given(seed=seeds, noise=st.integers(0, 1000))
def test_mr_and_mrcat_aligned(seed, noise):
    g = sample_geometry(seed, 64)
    _, lab_mr = render(g, Modality.MR, noise)
    _, lab_cat = render(g, Modality.MRCAT, noise + 1)
    for label in ANATOMY_LABELS:
        assert np.array_equal(lab_mr == label, lab_cat == label)


@settings(max_examples=25, deadline=None)
@given(seed=seeds)
def test_mrcat_quantized_and_noise_free(seed):
    g = sample_geometry(seed, 64)
    a, lab = render(g, Modality.MRCAT, noise_seed=1)
    b, _ = render(g, Modality.MRCAT, noise_seed=2)
    assert np.array_equal(a.pixels, b.pixels)
    assert len(np.unique(a.pixels)) <= 5
    assert not (lab == Label.AIR_CAVITY).any()
    assert not (lab == Label.COUCH).any()


@settings(max_examples=25, deadline=None)
@given(seed=seeds, noise=st.integers(0, 1000))
def test_ct_has_couch_mr_does_not(seed, noise):
    g = sample_geometry(seed, 64)
    _, ct_lab = render(g, Modality.CT, noise)
    img_mr, mr_lab = render(g, Modality.MR, noise)
    assert (ct_lab == Label.COUCH).any()
    assert not (mr_lab == Label.COUCH).any()
    assert img_mr.pixels.min() >= -1.0 and img_mr.pixels.max() <= 1.0


def test_pixels_in_range_and_float32():
    g = sample_geometry(11)
    for mod in (Modality.MR, Modality.CT, Modality.MRCAT):
        img, lab = render(g, mod, 5)
        assert img.pixels.dtype == np.float32
        assert img.pixels.shape == (1, 128, 128)
        assert lab.shape == (128, 128)
        assert -1.0 <= img.pixels.min() and img.pixels.max() <= 1.0


def test_render_rejects_synthetic_modalities():
    g = sample_geometry(0, 64)
    for mod in (Modality.sCT, Modality.sMR):
        with pytest.raises(InvalidArgumentError):
            render(g, mod)
    with pytest.raises(InvalidArgumentError):
        render(g, Modality.CT, channels=3, channel_mode="bogus")


def test_channel_modes():
    g = sample_geometry(2, 64)
    rep, lab1 = render(g, Modality.CT, 0, channels=3)
    stack, lab3 = render(g, Modality.CT, 0, channels=3, channel_mode="stack")
    assert np.array_equal(rep.pixels[0], rep.pixels[2])
    assert not np.array_equal(stack.pixels[0], stack.pixels[1])
    assert np.array_equal(lab1, lab3)


def test_air_cavity_fraction():
    n = 400
    hits = sum(sample_geometry(s, 64).air_cavity is not None for s in range(n))
    # binomial(400, 0.5): 4 sigma is 40
    assert abs(hits - n / 2) <= 40
    assert all(sample_geometry(s, 64, air_cavity_prob=0.0).air_cavity is None for s in range(20))


def test_label_map_mr_has_no_ct_only_labels():
    g = next(sample_geometry(s) for s in range(100) if sample_geometry(s).air_cavity is not None)
    assert (label_map(g, Modality.CT) == Label.AIR_CAVITY).any()
    assert not (label_map(g, Modality.MR) == Label.AIR_CAVITY).any()


# -- segmentation oracle ------------------------------------------------------


@pytest.mark.parametrize("modality", [Modality.CT, Modality.MR, Modality.MRCAT])
def test_segmenter_recovers_ground_truth(modality):
    worst = {}
    for seed in range(100):
        img, lab = render(sample_geometry(seed), modality, noise_seed=seed)
        seg = segment_rule_based(img)
        labels = set(np.unique(lab)) | set(np.unique(seg))
        for label in labels - {0}:
            worst[label] = min(worst.get(label, 1.0), dice(seg, lab, label))
    assert min(worst.values()) >= 0.95, worst


def test_segmenter_blank_image_is_background():
    for mod in (Modality.CT, Modality.MR, Modality.sCT):
        img = SliceImage(np.full((1, 64, 64), -1.0, np.float32), mod)
        assert not segment_rule_based(img).any()


def test_segmenter_mr_never_labels_couch():
    img, _ = render(sample_geometry(4), Modality.MR, 4)
    assert not (segment_rule_based(img) == Label.COUCH).any()


# -- dataset ------------------------------------------------------------------


def test_generate_dataset_layout(tmp_path):
    m = generate_dataset(4, 6, 64, 1, tmp_path / "d", eval_fraction=0.5)
    assert len(m.select(paired=True)) == 4 and len(m.select(paired=False)) == 6
    assert len(m.select(split="eval", paired=True)) == 2
    assert len(m.select(split="eval", paired=False)) == 3
    seeds_p = {c["geometry_seed"] for c in m.select(paired=True)}
    seeds_c = {c["geometry_seed"] for c in m.select(paired=False)}
    assert not seeds_p & seeds_c
    case = m.select(paired=True)[0]
    assert set(case["files"]) == {"MR", "MRCAT"}
    img, lab = m.load_image(case, Modality.MR)
    assert img.pixels.shape == (1, 64, 64) and img.case_id == case["case_id"]
    raw = np.load(m.root / case["files"]["MR"]["image"])
    assert raw.dtype == np.float32 and raw.shape == (64, 64)
    assert np.load(m.root / case["files"]["MR"]["labels"]).dtype == np.uint8
    ct = m.select(paired=False)[0]
    meta = json.loads((m.root / ct["files"]["CT"]["meta"]).read_text())
    assert meta["hu_map"] == {"scale": 1000.0, "offset": 0.0}


def test_generate_dataset_idempotent(tmp_path):
    a = generate_dataset(2, 3, 32, 5, tmp_path / "a")
    b = generate_dataset(2, 3, 32, 5, tmp_path / "b")
    files_a = sorted(p.relative_to(a.root) for p in a.root.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b.root) for p in b.root.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert file_digest(a.root / rel) == file_digest(b.root / rel)


def test_generate_dataset_bad_args(tmp_path):
    with pytest.raises(InvalidArgumentError):
        generate_dataset(0, 3, 64, 1, tmp_path)
    with pytest.raises(InvalidArgumentError):
        generate_dataset(2, 3, 16, 1, tmp_path)
    with pytest.raises(InvalidArgumentError):
        generate_dataset(2, 3, 64, 1, tmp_path, eval_fraction=1.0)


def test_manifest_rejects_foreign_json(tmp_path):
    (tmp_path / "manifest.json").write_text('{"format": "x"}')
    with pytest.raises(InvalidArgumentError):
        DatasetManifest.load(tmp_path)
