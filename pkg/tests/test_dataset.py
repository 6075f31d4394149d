import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import extract_corners
from sspsd.dataset import (
    DatasetStats,
    SplitProtocol,
    SynthConfig,
    dataset_stats,
    generate_synthetic,
    labeled_count,
    load_annotations,
    save_annotations,
    split_semi,
)
from sspsd.errors import ConfigError, DanglingSlotRef, EmptyDataset, SchemaError, TwoPointsOneCell
from sspsd.types import AnnotatedImage, ParkingSlot


@pytest.fixture(scope="module")
def small_set():
    return generate_synthetic(SynthConfig(n_images=12), seed=5)


def test_load_three_records(tmp_path, small_set):
    save_annotations(small_set[:3], tmp_path)
    loaded = load_annotations(tmp_path)
    assert len(loaded) == 3
    assert all(isinstance(x, AnnotatedImage) and x.labeled for x in loaded)


def test_roundtrip(tmp_path, small_set):
    save_annotations(small_set, tmp_path)
    loaded = load_annotations(tmp_path)
    assert len(loaded) == len(small_set)
    for a, b in zip(small_set, loaded):
        np.testing.assert_array_equal(a.image, b.image)
        assert a.scene == b.scene
        assert len(a.points) == len(b.points) and len(a.slots) == len(b.slots)
        for p, q in zip(a.points, b.points):
            assert abs(p.x - q.x) < 1e-6 and abs(p.y - q.y) < 1e-6
            assert abs(p.theta1 - q.theta1) < 1e-6 and abs(p.theta2 - q.theta2) < 1e-6
            assert (p.shape, p.ptype) == (q.shape, q.ptype)
        for s, t in zip(a.slots, b.slots):
            assert max(abs(u - v) for u, v in zip(s.p1 + s.p2, t.p1 + t.p2)) < 1e-6
            assert abs(s.theta_s - t.theta_s) < 1e-6 and s.ptype == t.ptype


def _write_one(tmp_path, small_set, mutate):
    (sidecar,) = save_annotations(small_set[:1], tmp_path)
    record = json.loads(sidecar.read_text())
    mutate(record)
    sidecar.write_text(json.dumps(record))
    return sidecar.name


def test_out_of_range_point_names_file(tmp_path, small_set):
    name = _write_one(tmp_path, small_set, lambda r: r["points"][0].update(x=600))
    with pytest.raises(SchemaError, match=name):
        load_annotations(tmp_path)


def test_missing_field(tmp_path, small_set):
    name = _write_one(tmp_path, small_set, lambda r: r["points"][0].pop("theta2"))
    with pytest.raises(SchemaError, match=name):
        load_annotations(tmp_path)


def test_dangling_slot_reference(tmp_path, small_set):
    _write_one(tmp_path, small_set, lambda r: r["slots"][0].update(p2=99))
    with pytest.raises(DanglingSlotRef):
        load_annotations(tmp_path)


def test_two_points_in_one_cell_on_load(tmp_path, small_set):
    def crowd(r):
        p = dict(r["points"][0])
        p["x"] += 1.0
        r["points"].append(p)
    name = _write_one(tmp_path, small_set, crowd)
    with pytest.raises(TwoPointsOneCell, match=name):
        load_annotations(tmp_path)
    assert load_annotations(tmp_path, skip_invalid=True) == []


# -- split --------------------------------------------------------------

class _Dummy:
    def __init__(self, k):
        self.k = k

    def as_labeled(self):
        return self

    def as_unlabeled(self):
        return self


@pytest.mark.parametrize("n_images,n,expected", [(29803, 12, 2484), (9827, 24, 410)])
def test_reference_split_sizes(n_images, n, expected):
    assert labeled_count(n_images, n) == expected
    lab, unl = split_semi([_Dummy(k) for k in range(n_images)], SplitProtocol(n, seed=3))
    assert len(lab) == expected and len(unl) == n_images - expected


def test_split_n1_all_labeled(small_set):
    lab, unl = split_semi(small_set, SplitProtocol(1))
    assert len(lab) == len(small_set) and unl == []


def test_unlabeled_items_are_flagged(small_set):
    _, unl = split_semi(small_set, SplitProtocol(3, seed=1))
    assert unl and not any(u.labeled for u in unl)
    before = unl[0].label_reads
    _ = unl[0].points
    assert unl[0].label_reads == before + 1


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.integers(1, 40), st.integers(0, 2 ** 31))
def test_split_partitions(size, n, seed):
    items = [_Dummy(k) for k in range(size)]
    lab, unl = split_semi(items, SplitProtocol(n, seed))
    a = {x.k for x in lab}
    b = {x.k for x in unl}
    assert a.isdisjoint(b) and a | b == set(range(size))
    assert len(a) == math.ceil(size / n)
    again, _ = split_semi(items, SplitProtocol(n, seed))
    assert [x.k for x in again] == [x.k for x in lab]


def test_split_rejects_bad_protocol():
    with pytest.raises(ConfigError):
        SplitProtocol(0)
    with pytest.raises(EmptyDataset):
        split_semi([], SplitProtocol(2))


# -- stats --------------------------------------------------------------

def test_density_fixture():
    assert DatasetStats(29803, 118057, 14126, {}).density == pytest.approx(3.96, abs=0.005)


def test_slanted_fixture():
    assert 100 * DatasetStats(29803, 118057, 14126, {}).slanted_pct == pytest.approx(11.97, abs=0.005)


def test_single_empty_image_density_zero():
    item = AnnotatedImage(np.zeros((8, 8), np.uint8), [], [], scene="outdoor_daylight")
    st_ = dataset_stats([item])
    assert st_.density == 0.0 and st_.slanted_pct == 0.0


def test_empty_dataset_raises():
    with pytest.raises(EmptyDataset):
        dataset_stats([])


def test_stats_invariants(small_set):
    s = dataset_stats(small_set)
    assert s.density == s.n_slots / s.n_images
    assert sum(s.per_scene_counts.values()) == s.n_images


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(0, 7)), min_size=2, max_size=20),
       st.integers(1, 19))
def test_stats_additive(counts, cut):
    from sspsd.types import SCENES
    items = []
    for n_perp, n_slant, scene in counts:
        slots = [ParkingSlot((0.0, 0.0), (1.0, 0.0), 0.0, "perpendicular")] * n_perp
        slots += [ParkingSlot((0.0, 0.0), (1.0, 0.0), 0.0, "slanted")] * n_slant
        items.append(AnnotatedImage(np.zeros((2, 2), np.uint8), [], slots, scene=SCENES[scene]))
    cut = min(cut, len(items) - 1)
    whole = dataset_stats(items)
    parts = dataset_stats(items[:cut]) + dataset_stats(items[cut:])
    assert whole.to_dict() == parts.to_dict()


# -- synthetic ----------------------------------------------------------

def test_no_slanted_when_fraction_zero():
    ds = generate_synthetic(SynthConfig(n_images=30, slanted_fraction=0.0), seed=2)
    assert dataset_stats(ds).slanted_pct == 0.0


def test_slanted_generated_when_requested():
    ds = generate_synthetic(SynthConfig(n_images=30, slanted_fraction=1.0), seed=2)
    assert dataset_stats(ds).slanted_pct == 1.0


def test_generation_is_bit_identical():
    cfg = SynthConfig(n_images=100)
    a = generate_synthetic(cfg, seed=11)
    b = generate_synthetic(cfg, seed=11)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.points == y.points and x.slots == y.slots and x.scene == y.scene
    c = generate_synthetic(cfg, seed=12)
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_generated_labels_encode(small_set):
    from sspsd.types import encode_ground_truth
    for item in small_set:
        encode_ground_truth(item.points)
        for s in item.slots:
            assert 120 <= s.length <= 300


@pytest.mark.parametrize("kw", [
    {"slanted_fraction": 1.5},
    {"slot_width_range": (150, 120)},
    {"noise_std": -1},
    {"scene_mix": {"slanted": 1.0}},
    {"scene_mix": {"moon_base": 1.0}},
])
def test_synth_config_validation(kw):
    with pytest.raises(ConfigError):
        SynthConfig(**kw)


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("slanted", [0.0, 1.0])
def test_clean_render_corners_match_annotation(seed, slanted):
    cfg = SynthConfig(n_images=1, slanted_fraction=slanted)
    (item,) = generate_synthetic(cfg, seed=seed, clean=True)
    corners = extract_corners(item.image, cfg.line_thickness)
    assert len(item.points) == 4
    for p in item.points:
        d = min(math.hypot(p.x - cx, p.y - cy) for cx, cy in corners)
        assert d < 1.0, (p, corners)
