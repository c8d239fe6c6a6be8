import numpy as np
import pytest

from subflow import encoders as enc
from subflow.diffcore.rng import named_stream
from subflow.errors import FormatError, NumericsError, ShapeError


@pytest.fixture(scope="module")
def encoders():
    return enc.FeatureEncoders(seed=0)


def test_encoding_is_deterministic(encoders):
    img = enc.procedural_texture(3, 0)
    a = encoders.encode_clip_like(img).vectors
    b = encoders.encode_clip_like(img).vectors
    assert np.array_equal(a, b)
    va = encoders.encode_vgg_like(img).vectors
    vb = encoders.encode_vgg_like(img).vectors
    assert np.array_equal(va, vb)


def test_constant_image_has_zero_tap_stds(encoders):
    const = np.full((64, 64, 3), 0.37, dtype=np.float32)
    for _, std in encoders.tap_stats(const):
        assert np.all(std == 0.0)


def test_tap0_pooled_mean_invariant_to_pixel_permutation(encoders):
    g = named_stream(5, "perm-img")
    img = g.uniform(0, 1, size=(64, 64, 3)).astype(np.float32)
    perm = g.permutation(64 * 64)
    img2 = img.reshape(-1, 3)[perm].reshape(64, 64, 3)
    mean_a, _ = encoders.tap_stats(img)[0]
    mean_b, _ = encoders.tap_stats(img2)[0]
    assert np.allclose(mean_a, mean_b, atol=1e-6)


def test_nonfinite_image_rejected(encoders):
    img = np.full((64, 64, 3), np.nan, dtype=np.float32)
    with pytest.raises(NumericsError):
        encoders.encode_vgg_like(img)


def test_vgg_exposes_at_least_two_taps(encoders):
    img = enc.procedural_texture(3, 1)
    stats = encoders.tap_stats(img)
    assert len(stats) >= 2
    for mean, std in stats:
        assert mean.shape == std.shape


def test_text_encoding_deterministic_and_duplicate_invariant(encoders):
    a = encoders.encode_text(["fire"]).vectors
    b = encoders.encode_text(["fire"]).vectors
    c = encoders.encode_text(["fire", "fire"]).vectors
    assert np.array_equal(a, b)
    assert np.allclose(a, c, atol=1e-6)


def test_text_encoding_rejects_empty(encoders):
    with pytest.raises(ShapeError):
        encoders.encode_text([])


def test_text_dim_and_norm_match_clip_space(encoders):
    row = encoders.encode_text(["molten", "glass"]).vectors[0]
    assert row.shape == (encoders.clip_dim,)
    assert np.linalg.norm(row) == pytest.approx(encoders.text_norm, rel=1e-5)


def test_concept_pairs_text_image_cosine(encoders):
    gen = enc.ConceptPairGenerator(encoders)
    cosines = []
    for i in range(100):
        img, caption = gen.pair(i)
        u = encoders.encode_text([caption]).vectors[0]
        v = encoders.encode_clip_like(img).vectors[0]
        cosines.append(float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v))))
    assert min(cosines) >= 0.8
    assert float(np.mean(cosines)) >= 0.95


def test_domain_separation_on_default_seeds(encoders):
    imgs = [enc.procedural_texture(100, i) for i in range(50)]
    clip = encoders.encode_clip_like(imgs).vectors
    vgg = encoders.encode_vgg_like(imgs).vectors
    cos = np.sum(clip * vgg, axis=1) / (
        np.linalg.norm(clip, axis=1) * np.linalg.norm(vgg, axis=1))
    assert abs(float(cos.mean())) < 0.2


def test_sample_paired_single_component_moments():
    dim = 4
    spec = enc.PairedDistributionSpec(
        enc.MixtureSpec.isotropic([[1.0, -2.0, 0.5, 3.0]], sigma=1.0),
        enc.MixtureSpec.isotropic([[0.0, 0.0, 0.0, 0.0]], sigma=2.0),
        pairing="index", seed=7)
    clip, vgg = enc.sample_paired(spec, 10000)
    bound_c = 5.0 * 1.0 / np.sqrt(10000)
    bound_v = 5.0 * 2.0 / np.sqrt(10000)
    assert np.all(np.abs(clip.vectors.mean(axis=0) - [1.0, -2.0, 0.5, 3.0]) < bound_c)
    assert np.all(np.abs(vgg.vectors.mean(axis=0)) < bound_v)
    assert np.allclose(clip.vectors.std(axis=0), 1.0, atol=0.05)
    assert np.allclose(vgg.vectors.std(axis=0), 2.0, atol=0.1)


def test_sample_paired_identical_sides_index_pairing_equal_rows():
    side = enc.MixtureSpec.isotropic([[0.0, 1.0], [2.0, -1.0]], sigma=0.7)
    spec = enc.PairedDistributionSpec(side, side, pairing="index", seed=3)
    clip, vgg = enc.sample_paired(spec, 64)
    assert np.allclose(clip.vectors, vgg.vectors, atol=1e-6)


def test_sample_paired_component_occupancy():
    side = enc.MixtureSpec.isotropic([[-10.0, 0.0], [10.0, 0.0]], sigma=0.5,
                                     weights=[0.5, 0.5])
    spec = enc.PairedDistributionSpec(side, side, pairing="index", seed=11)
    _, _, comps = enc.sample_paired(spec, 10000, return_components=True)
    count0 = int((comps == 0).sum())
    assert abs(count0 - 5000) <= 300   # binomial 5 sigma ~ 250


def test_sample_paired_nearest_pairs_are_close():
    side = enc.MixtureSpec.isotropic([[0.0, 0.0]], sigma=1.0)
    spec = enc.PairedDistributionSpec(side, side, pairing="nearest", seed=5)
    clip, vgg = enc.sample_paired(spec, 400)
    d_paired = np.linalg.norm(clip.vectors - vgg.vectors, axis=1).mean()
    d_index = np.linalg.norm(clip.vectors - np.roll(vgg.vectors, 1, axis=0), axis=1).mean()
    assert d_paired < d_index


def test_sample_paired_rejects_zero():
    side = enc.MixtureSpec.isotropic([[0.0]], sigma=1.0)
    spec = enc.PairedDistributionSpec(side, side)
    with pytest.raises(ShapeError):
        enc.sample_paired(spec, 0)


def test_mixture_spec_validation():
    with pytest.raises(ShapeError, match="weights"):
        enc.MixtureSpec(np.zeros((2, 3)), np.tile(np.eye(3), (2, 1, 1)), [0.7, 0.7])
    with pytest.raises(ShapeError, match="SPD"):
        enc.MixtureSpec(np.zeros((1, 2)), -np.eye(2)[None], [1.0])


def test_feat_round_trip(tmp_path, encoders):
    imgs = [enc.procedural_texture(4, i) for i in range(3)]
    fs = encoders.encode_clip_like(imgs)
    path = tmp_path / "f.feat"
    enc.export_features(path, fs)
    back = enc.import_features(path)
    assert back.domain == "clip_like"
    assert back.provenance == "imported"
    assert np.array_equal(back.vectors, fs.vectors)


def test_feat_header_payload_mismatch(tmp_path):
    fs = enc.FeatureSet("vgg_like", np.ones((2, 4), dtype=np.float32))
    path = tmp_path / "f.feat"
    enc.export_features(path, fs)
    raw = bytearray(path.read_bytes())
    import struct
    struct.pack_into("<I", raw, 12, 8)  # claim dim=8
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="dim=8"):
        enc.import_features(path)


def test_feat_zero_count_rejected(tmp_path):
    import struct
    path = tmp_path / "z.feat"
    path.write_bytes(enc.FEAT_MAGIC + struct.pack("<III", 1, 0, 4) + struct.pack("<B", 0))
    with pytest.raises(FormatError, match="count"):
        enc.import_features(path)


def test_feat_bad_magic(tmp_path):
    path = tmp_path / "bad.feat"
    path.write_bytes(b"NOPE" + b"\x00" * 13)
    with pytest.raises(FormatError, match="magic"):
        enc.import_features(path)
