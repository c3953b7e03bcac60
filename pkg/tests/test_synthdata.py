import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoigen import synthdata
from hoigen.representation import (
    LEFT_WRIST,
    RIGHT_WRIST,
    RawObjectMotion,
    SequenceRecord,
    derive_enhanced,
    unflatten_human,
    unflatten_object,
)

NAMES = [t.name for t in synthdata.TEMPLATES]


def _layout(name, seed, frames=60):
    tpl = synthdata.TEMPLATE_BY_NAME[name]
    return synthdata.phase_layout(tpl.n_objects, frames, np.random.default_rng(seed))


@pytest.mark.parametrize("name", NAMES)
def test_carry_frames_are_contact(name):
    rec = synthdata.generate(name, seed=3)
    layout = _layout(name, 3)
    for i, o in enumerate(rec.objects):
        enh = unflatten_object(o)
        _, c0, c1 = layout[i * 5 + 2]
        assert layout[i * 5 + 2][0] == "carry"
        held = enh.contact[c0:c1].max(axis=1)
        assert np.all(held == 1)


@pytest.mark.parametrize("name", NAMES)
def test_rest_phases_have_zero_velocity(name):
    rec = synthdata.generate(name, seed=5)
    layout = _layout(name, 5)
    for i, o in enumerate(rec.objects):
        enh = unflatten_object(o)
        c0 = layout[i * 5 + 2][1]
        p1 = layout[i * 5 + 3][2]
        # forward differences: frame k uses k and k+1, so the last rest frame before motion is excluded
        rest = list(range(0, c0 - 1)) + list(range(p1, rec.frames))
        assert np.all(enh.velocity[rest] == 0)
        assert np.all(enh.angular_velocity[rest] == 0)


def test_byte_identical_json():
    for name in NAMES:
        a = synthdata.generate(name, seed=11).dumps()
        b = synthdata.generate(name, seed=11).dumps()
        assert a == b
    assert synthdata.generate("push", seed=1).dumps() != synthdata.generate("push", seed=2).dumps()


def test_impossible_layout_raises():
    with pytest.raises(synthdata.GenerationError):
        synthdata.generate("three-object-sequence", seed=0, frames=29)
    rec = synthdata.generate("three-object-sequence", seed=0, frames=30)
    assert rec.frames == 30


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 3), frames=st.integers(30, 90), seed=st.integers(0, 2 ** 31))
def test_phase_layout_covers_frames(n, frames, seed):
    layout = synthdata.phase_layout(n, frames, np.random.default_rng(seed))
    assert len(layout) == 5 * n
    assert layout[0][1] == 0 and layout[-1][2] == frames
    for (_, _, stop), (_, start, _) in zip(layout, layout[1:]):
        assert stop == start
    assert all(b - a >= 2 for _, a, b in layout)
    assert [p for p, _, _ in layout] == list(synthdata.PHASES) * n


@settings(max_examples=15, deadline=None)
@given(name=st.sampled_from(NAMES), seed=st.integers(0, 2 ** 31))
def test_generated_sequences_validate_and_close(name, seed):
    rec = synthdata.generate(name, seed=seed)
    rec.validate()
    human = unflatten_human(rec.human)
    for o, g in zip(rec.objects, rec.geometry):
        enh = unflatten_object(o)
        again = derive_enhanced(RawObjectMotion(enh.rotation, enh.translation), g,
                                human.joints[:, LEFT_WRIST], human.joints[:, RIGHT_WRIST], rec.fps)
        assert np.array_equal(again.contact, enh.contact)
        assert np.allclose(again.keypoints, enh.keypoints)
    assert len(rec.sub_actions) == len(rec.atomic_id)


def test_build_dataset_files_and_split(tmp_path):
    ds = synthdata.build_dataset(10, seed=0)
    ds.save(tmp_path)
    assert len(list((tmp_path / "sequences").glob("*.json"))) == 10
    assert set(ds.train).isdisjoint(ds.val)
    assert sorted(ds.train + ds.val) == sorted(r.seq_id for r in ds.sequences)
    back = synthdata.Dataset.load(tmp_path)
    assert back.train == ds.train and back.val == ds.val
    assert [r.dumps() for r in back.sequences] == [r.dumps() for r in ds.sequences]
    with pytest.raises(ValueError):
        ds.split("test")
    with pytest.raises(FileNotFoundError):
        synthdata.Dataset.load(tmp_path / "missing")


@pytest.mark.parametrize("n", [10, 37, 256])
def test_template_histogram_balanced(n):
    counts = collections.Counter(r.template for r in synthdata.build_dataset(n, seed=1).sequences)
    assert max(abs(c - n / len(NAMES)) for c in counts.values()) <= 1
    assert set(counts) == set(NAMES)


def test_validation_fraction_near_ten_percent():
    ids = [f"seq_{i:05d}" for i in range(2000)]
    frac = np.mean([synthdata.is_validation(s) for s in ids])
    assert 0.07 < frac < 0.13


def test_dataset_reproducible():
    a = synthdata.build_dataset(6, seed=4)
    b = synthdata.build_dataset(6, seed=4)
    assert [r.dumps() for r in a.sequences] == [r.dumps() for r in b.sequences]
    c = synthdata.build_dataset(6, seed=5)
    assert [r.dumps() for r in a.sequences] != [r.dumps() for r in c.sequences]


def test_record_roundtrip_file(tmp_path):
    rec = synthdata.generate("two-object-transfer", seed=2, seq_id="x")
    rec.save(tmp_path / "x.json")
    back = SequenceRecord.load(tmp_path / "x.json")
    assert back.dumps() == rec.dumps()
    assert back.template == "two-object-transfer" and len(back.objects) == 2


def test_atomic_library_covers_labels():
    lib = synthdata.atomic_library()
    assert lib.labels == list(synthdata.ATOMIC_LABELS)
    assert lib.poses().shape == (len(synthdata.ATOMIC_LABELS), 471)
