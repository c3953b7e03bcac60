import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hoigen import priors as pr
from hoigen import synthdata
from hoigen.substrate import ParameterStore


@pytest.fixture(scope="module")
def vocab():
    return synthdata.vocabulary()


@pytest.fixture(scope="module")
def encoder(vocab):
    enc = pr.TextEncoder(len(vocab), 16, 8, embed_dim=8, max_len=12, heads=2, layers=1)
    ParameterStore(enc, 0).initialize()
    return enc.eval()


def test_vocabulary_unknown_token(vocab):
    with pytest.raises(pr.PriorError, match="xylophone"):
        vocab.encode("pick up the xylophone")
    assert vocab.encode("") == []
    assert pr.Vocabulary.from_json(vocab.to_json()).words == vocab.words


def test_encode_text_deterministic_and_self_cosine(vocab, encoder):
    ids = vocab.encode("pick up the box")
    a, b = pr.encode_text(encoder, ids), pr.encode_text(encoder, ids)
    assert torch.equal(a, b)
    assert a.shape == (1, 8)
    assert torch.allclose(torch.cosine_similarity(a, a), torch.ones(1))


def test_empty_prompt_uses_null_token(vocab, encoder):
    empty = pr.encode_text(encoder, [])
    other = pr.encode_text(encoder, vocab.encode("place"))
    assert not torch.allclose(empty, other)
    ids, mask = pr.pad_ids([vocab.encode("place the box"), []])
    dropped = encoder(ids, mask, drop=torch.tensor([True, False]))[2]
    assert torch.allclose(dropped[0], empty[0], atol=1e-6)
    assert torch.allclose(dropped[1], empty[0], atol=1e-6)
    with torch.no_grad():
        encoder.null_token.add_(1.0)
    try:
        assert not torch.allclose(pr.encode_text(encoder, []), empty)
    finally:
        with torch.no_grad():
            encoder.null_token.sub_(1.0)


def test_encoder_rejects_bad_ids(encoder):
    with pytest.raises(pr.PriorError):
        pr.encode_text(encoder, [10_000])
    with pytest.raises(pr.PriorError):
        pr.encode_text(encoder, [1] * 13)


def _lib(labels):
    return pr.AtomicMotionLibrary([pr.AtomicEntry(lbl, np.full(471, float(i))) for i, lbl in enumerate(labels)])


def test_retrieve_verbatim_and_single(vocab, encoder):
    lib = _lib(list(synthdata.ATOMIC_LABELS))
    for i, lbl in enumerate(lib.labels):
        assert pr.retrieve_atomic(vocab.encode(lbl), lib, encoder, vocab) == i
    one = _lib(["carry"])
    assert pr.retrieve_atomic(vocab.encode("push the box"), one, encoder, vocab) == 0


def test_retrieve_matches_bruteforce_scan(vocab, encoder):
    lib = _lib(list(synthdata.ATOMIC_LABELS))
    keys = [encoder.frozen_embed(*pr.pad_ids([vocab.encode(lbl)]))[0].double().numpy() for lbl in lib.labels]
    rng = np.random.default_rng(0)
    words = vocab.words[1:]
    for _ in range(20):
        q_ids = vocab.encode(" ".join(rng.choice(words, size=3)))
        q = encoder.frozen_embed(*pr.pad_ids([q_ids]))[0].double().numpy()
        best, best_sim = 0, -np.inf
        for i, k in enumerate(keys):
            sim = float(q @ k) / (np.linalg.norm(q) * np.linalg.norm(k))
            if sim > best_sim + 1e-12:
                best, best_sim = i, sim
        assert pr.retrieve_atomic(q_ids, lib, encoder, vocab) == best


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), scale=st.floats(1e-3, 1e3))
def test_cosine_argmax_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    q, keys = rng.normal(size=5), rng.normal(size=(8, 5))
    assert pr.cosine_argmax(q, keys) == pr.cosine_argmax(q * scale, keys * scale)


def test_cosine_argmax_tie_lowest():
    assert pr.cosine_argmax(np.array([1.0, 0]), np.array([[0, 1.0], [2, 0], [1, 0]])) == 1


def test_library_validation_and_roundtrip(tmp_path):
    with pytest.raises(pr.PriorError):
        pr.AtomicMotionLibrary([])
    with pytest.raises(pr.PriorError):
        _lib(["a", "a"])
    lib = _lib(["a", "b"])
    lib.save(tmp_path / "lib.json")
    back = pr.AtomicMotionLibrary.load(tmp_path / "lib.json")
    assert back.labels == ["a", "b"] and np.array_equal(back.poses(), lib.poses())


def test_pointnet_permutation_invariant_and_degenerate():
    net = pr.PointNetEncoder(256, (16, 32))
    ParameterStore(net, 1).initialize()
    pts = torch.randn(64, 3, generator=torch.Generator().manual_seed(0))
    base = net(pts)
    assert base.shape == (256,)
    gen = torch.Generator().manual_seed(1)
    for _ in range(20):
        assert torch.equal(net(pts[torch.randperm(64, generator=gen)]), base)
    one = pts[:1]
    assert torch.allclose(net(one.repeat(10, 1)), net.point_features(one)[0])


def test_pose_encoder_width():
    enc = pr.PoseEncoder()
    assert enc(torch.zeros(2, 471)).shape == (2, 512)


def test_procedural_provider_reproducible():
    a = pr.ProceduralVisualProvider(32, seed=3).features(["pick up the box", "place it"])
    b = pr.ProceduralVisualProvider(32, seed=3).features(["pick up the box", "place it"])
    c = pr.ProceduralVisualProvider(32, seed=4).features(["pick up the box", "place it"])
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.allclose(np.linalg.norm(a, axis=1), 1.0)


def test_file_provider(tmp_path):
    texts = ["pick up the box", "place the box"]
    prov = pr.FileVisualProvider(tmp_path, dim=4)
    with pytest.raises(FileNotFoundError, match=str(prov.path_for(texts))):
        prov.features(texts)
    vals = np.arange(8.0).reshape(2, 4)
    pr.write_feature_file(prov.path_for(texts), vals)
    assert np.array_equal(prov.features(texts), vals)
    with pytest.raises(pr.PriorError):
        pr.read_feature_file(prov.path_for(texts), kind="text")


def test_sub_action_providers():
    assert pr.ClauseSubActions().sub_actions("Pick up the box, then place it") == ["pick up the box", "place it"]
    fixed = pr.FixedSubActions({"go": ["walk to", "push"]})
    assert fixed.sub_actions("go") == ["walk to", "push"]
    assert fixed.sub_actions("lift and carry") == ["lift", "carry"]


def _prior_encoder(vocab):
    enc = pr.TextEncoder(len(vocab), 16, 8, embed_dim=8, max_len=12, heads=2, layers=1)
    pe = pr.PriorEncoder(enc, 8, visual_dim=6, atomic_dim=512, point_dim=256, pointnet_hidden=(16,))
    ParameterStore(pe, 2).initialize()
    return pe


def test_build_bundle_shapes(vocab):
    pe = _prior_encoder(vocab)
    rec = synthdata.generate("three-object-sequence", seed=1)
    lib = synthdata.atomic_library()
    subs = rec.sub_actions
    b = pr.build_bundle(pe, vocab, subs, pr.ProceduralVisualProvider(6), lib, rec.geometry)
    na = len(subs)
    assert na == 3
    assert b.text_feats.shape == (1, na, 8)
    assert b.visual_feats.shape == (1, na, 6)
    assert b.atomic_feats.shape == (1, na, 512)
    assert b.point_feats.shape == (1, 3, 256)
    assert b.human_condition().shape == (1, pe.human_cond_dim)
    assert b.object_condition().shape == (1, pe.object_cond_dim)
    with pytest.raises(pr.PriorError):
        pr.build_bundle(pe, vocab, subs, pr.ProceduralVisualProvider(6), lib, [])


def test_single_object_template_has_two_actions():
    assert len(synthdata.generate("pick-place", seed=0).sub_actions) == 2


def test_modality_mask_zeroes_features(vocab):
    pe = _prior_encoder(vocab)
    ids, tmask = pr.pad_ids([vocab.encode("pick up the box")])
    b = pe(ids[None], tmask[None], torch.ones(1, 1, dtype=torch.bool), torch.ones(1, 1, 6), torch.ones(1, 1, 471),
           torch.randn(1, 1, 20, 3), torch.ones(1, 1, dtype=torch.bool), torch.tensor([[0.0, 1.0, 0.0, 1.0]]))
    assert torch.all(b.text_feats == 0) and torch.all(b.atomic_feats == 0)
    assert torch.all(b.visual_feats == 1)
