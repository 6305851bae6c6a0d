import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gscodec.colorfield import ColorField, FieldConfig, query_color
from gscodec.container import (
    BASELINE_FLOATS, CompactScene, DecodeError, PostprocFlags, decode_file, encode_file, encode_scene, stats,
    storage_model,
)
from gscodec.model import GaussianCloud, canonicalize_quaternions
from gscodec.pipeline import Renderer
from gscodec.render import psnr
from gscodec.rvq import RvqCodec, decode as rvq_decode, encode as rvq_encode
from gscodec.synthetic import ring_cameras

SMALL_FIELD = FieldConfig(hash_log2=8, num_levels=4, max_resolution=64, mlp_hidden=16)


def make_scene(rng, n=200, C=16, L=3, cfg=SMALL_FIELD, pp=False, exact=False):
    pos = rng.uniform(-2, 2, size=(n, 3))
    opac = rng.uniform(0.05, 1.0, n)
    scales = np.exp(rng.normal(-3, 0.5, size=(n, 3)))
    rots = canonicalize_quaternions(rng.normal(size=(n, 4)))
    if exact:
        # one stage whose codebook holds every vector: geometry is stored exactly (in f32)
        sc, rc = RvqCodec(scales[None].astype(np.float32)), RvqCodec(rots[None].astype(np.float32))
        si = ri = np.arange(n)[:, None]
    else:
        sc = RvqCodec((rng.normal(size=(L, C, 3)) * 0.02).astype(np.float32))
        rc = RvqCodec((rng.normal(size=(L, C, 4)) * 0.3).astype(np.float32))
        si, ri = rvq_encode(scales, sc)[0], rvq_encode(rots, rc)[0]
    f = ColorField.create(cfg, seed=int(rng.integers(1000)))
    f.grid.table[:] = rng.normal(scale=0.3, size=f.grid.table.shape).astype(np.float32)
    cloud = GaussianCloud(pos, opac, scales, rots, np.zeros((n, 3, 1)))
    return cloud, (sc, si), (rc, ri), f


def encode(rng, pp=False, **kw):
    cloud, s, r, f = make_scene(rng, **kw)
    return cloud, s, r, f, encode_file(cloud, "both", (s, r), f, pp)


# --- storage arithmetic ---------------------------------------------------------------


def test_reference_scale_storage_arithmetic():
    rep = storage_model(1_388_162, 64, 6, FieldConfig())
    mb = {k: v / 1e6 for k, v in rep.bytes.items()}
    assert mb["position"] == pytest.approx(8.3, rel=0.01)
    assert mb["opacity"] == pytest.approx(2.8, rel=0.01)
    assert mb["scale"] == pytest.approx(6.3, rel=0.02)
    assert mb["rotation"] == pytest.approx(6.3, rel=0.02)
    assert mb["hash"] == pytest.approx(25.2, rel=0.10)
    assert rep.total / 1e6 == pytest.approx(48.8, rel=0.05)


def test_baseline_and_ratio():
    assert BASELINE_FLOATS * 4 * 3_161_131 / 1e6 == pytest.approx(746.03, abs=0.01)
    rep = storage_model(1_388_162, baseline_n=3_161_131)
    assert rep.ratio == pytest.approx(746.03 / 48.82, rel=0.01)


@settings(max_examples=25)
@given(st.integers(0, 300), st.sampled_from([2, 7, 16, 64, 300]), st.integers(1, 4), st.integers(4, 9),
       st.integers(0, 2**31))
def test_storage_model_matches_encoder(n, C, L, h, seed):
    rng = np.random.default_rng(seed)
    cfg = FieldConfig(hash_log2=h, num_levels=3, max_resolution=32, mlp_hidden=8)
    cloud, s, r, f = make_scene(rng, n, C, L, cfg)
    data = encode_file(cloud, "both", (s, r), f, False)
    model = storage_model(n, C, L, cfg)
    assert model.total == len(data)
    assert stats(data).bytes == model.bytes


# --- roundtrip ----------------------------------------------------------------------------


@pytest.mark.parametrize("pp", [False, True])
def test_roundtrip_precision(rng, pp):
    cloud, (sc, si), (rc, ri), f, data = encode(rng, pp)
    out = decode_file(data)
    assert len(out) == len(cloud)
    rel = np.abs(out.positions - cloud.positions) / np.maximum(np.abs(cloud.positions), 2**-14)
    assert rel.max() <= 2**-11
    if pp:
        step = (cloud.opacities.max() - cloud.opacities.min()) / 255
        assert np.abs(out.opacities - cloud.opacities).max() <= step / 2 + 1e-7
    else:
        assert np.abs(out.opacities - cloud.opacities).max() <= 2**-11
    np.testing.assert_array_equal(out.scale_indices, si)
    np.testing.assert_array_equal(out.rotation_indices, ri)
    np.testing.assert_array_equal(out.scales, np.abs(rvq_decode(si, sc)).astype(np.float64))
    q = rvq_decode(ri, rc).astype(np.float64)
    np.testing.assert_allclose(out.rotations, q / np.linalg.norm(q, axis=1, keepdims=True))
    np.testing.assert_allclose(np.linalg.norm(out.rotations, axis=1), 1.0, atol=1e-12)
    t0, t1 = f.grid.table.astype(np.float64), out.field.grid.table.astype(np.float64)
    if pp:
        for a, b in zip(f.grid.level_tables(), out.field.grid.level_tables()):
            a, b = a.astype(np.float64), b.astype(np.float64)
            kept = np.abs(a) >= 0.1
            np.testing.assert_array_equal(b[~kept], 0.0)
            step = (a[kept].max() - a[kept].min()) / 255
            assert np.abs(a[kept] - b[kept]).max() <= step / 2 + 1e-6
    else:
        assert np.all(np.abs(t0 - t1) <= np.abs(t0) * 2**-11 + 2**-25)
    for a, b in zip(f.mlp.params(), out.field.mlp.params()):
        assert np.all(np.abs(a - b) <= np.abs(a) * 2**-11 + 2**-25)


def test_pp_is_smaller(rng):
    *_, plain = encode(np.random.default_rng(3), False)
    *_, packed = encode(np.random.default_rng(3), True)
    assert len(packed) < len(plain)


def test_empty_scene_roundtrip(rng):
    for pp in (False, True):
        cloud = GaussianCloud.empty()
        _, s, r, f = make_scene(rng, 5)
        data = encode_file(cloud, None, ((s[0], np.zeros((0, 3), int)), (r[0], np.zeros((0, 3), int))), f, pp)
        out = decode_file(data)
        assert len(out) == 0 and out.mask_mode == "none"
        assert stats(data).total == len(data)


def test_encode_deterministic(rng):
    a = encode(np.random.default_rng(9), True)[-1]
    b = encode(np.random.default_rng(9), True)[-1]
    assert a == b
    plain = encode(np.random.default_rng(9))[-1]
    assert encode_scene(decode_file(plain)) == plain  # decode then re-encode is a fixed point


def test_large_codebooks_fall_back_to_bitpacking(rng):
    cloud, s, r, f, data = encode(rng, True, n=400, C=300, L=2)
    out = decode_file(data)
    np.testing.assert_array_equal(out.scale_indices, s[1])


def test_header_flags_roundtrip(rng):
    cloud, s, r, f = make_scene(rng)
    flags = PostprocFlags(opacity=True, indices=False, hash=True, hash_threshold=0.05)
    out = decode_file(encode_file(cloud, "scale_only", (s, r), f, flags))
    assert (out.pp.opacity, out.pp.indices, out.pp.hash) == (True, False, True)
    assert out.pp.hash_threshold == pytest.approx(0.05)  # stored as f32
    assert out.mask_mode == "scale_only"
    assert out.field.config == f.config


# --- errors ---------------------------------------------------------------------------------


def test_truncation_detected(rng):
    *_, data = encode(rng, True)
    for cut in list(range(0, 60, 7)) + [len(data) // 3, len(data) // 2, len(data) - 1]:
        with pytest.raises(DecodeError) as e:
            decode_file(data[:cut])
        assert e.value.kind in ("truncated", "checksum")


def test_bad_magic_and_version(rng):
    *_, data = encode(rng)
    with pytest.raises(DecodeError) as e:
        decode_file(b"NOTCGS!!" + data[8:])
    assert e.value.kind == "bad_magic"
    bumped = data[:8] + struct.pack("<I", 99) + data[12:]
    with pytest.raises(DecodeError) as e:
        decode_file(bumped)
    assert e.value.kind == "bad_version"


def test_checksum_detects_bit_flip(rng):
    *_, data = encode(rng)
    bad = bytearray(data)
    bad[len(data) // 2] ^= 0x10
    with pytest.raises(DecodeError) as e:
        decode_file(bytes(bad))
    assert e.value.kind == "checksum"


def test_index_out_of_range_detected(rng):
    # 6-bit indices into a 48-entry codebook; force one index to 63 and re-sign the file
    cloud, s, r, f = make_scene(rng, n=10, C=48, L=1)
    data = encode_file(cloud, "both", (s, r), f, False)
    body = bytearray(data[:-4])
    scale_block = data.index(np.asarray(s[0].codebooks, "<f4").tobytes()) + s[0].codebooks.nbytes
    body[scale_block] |= 0xFC
    forged = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    with pytest.raises(DecodeError) as e:
        decode_file(forged)
    assert e.value.kind == "index_range"


def test_encode_rejects_bad_inputs(rng):
    cloud, s, r, f = make_scene(rng)
    with pytest.raises(ValueError):
        encode_file(cloud, "both", ((None, None), r), f)
    with pytest.raises(ValueError):
        encode_file(cloud, "both", (s, r), None)
    with pytest.raises(ValueError):
        encode_file(cloud, "both", ((s[0], s[1][:-1]), r), f)
    far = GaussianCloud(cloud.positions * 1e6, cloud.opacities, cloud.scales, cloud.rotations, cloud.sh_coeffs)
    with pytest.raises(ValueError, match="half precision"):
        encode_file(far, "both", (s, r), f)


# --- stats ----------------------------------------------------------------------------------


@pytest.mark.parametrize("pp", [False, True])
def test_stats_sum_to_file_length(rng, pp):
    *_, data = encode(rng, pp)
    rep = stats(data)
    assert rep.total == len(data)
    assert set(rep.bytes) == {"position", "opacity", "scale", "rotation", "hash", "mlp", "overhead"}
    assert rep.bytes["position"] == 6 * 200


def test_stats_empty_file():
    d = stats(b"").as_dict()
    assert d["total"] == 0 and d["compression_ratio"] == "n/a"


# --- rendering the decoded scene ---------------------------------------------------------------


def test_baked_colors_match_field(rng):
    cloud, s, r, f, data = encode(rng)
    scene = decode_file(data)
    d = np.array([0.3, -0.5, 0.8])
    baked = scene.to_cloud(d)
    want = query_color(scene.positions, np.tile(d, (len(scene), 1)), scene.field)
    np.testing.assert_allclose(baked.colors(baked.positions[0] - d * 1e9), want, atol=1e-6)


def test_f16_only_path_renders_within_precision(rng):
    cloud, s, r, f = make_scene(rng, n=300, exact=True)
    cloud = GaussianCloud(cloud.positions * 0.5, cloud.opacities, cloud.scales * 3, cloud.rotations, cloud.sh_coeffs)
    s = (RvqCodec(cloud.scales[None].astype(np.float32)), s[1])
    original = CompactScene(cloud.positions, cloud.opacities, s[0], s[1], r[0], r[1], f)
    decoded = decode_file(encode_scene(original))
    for cam in ring_cameras(4, size=64):
        assert psnr(Renderer(original)(cam), Renderer(decoded)(cam)) >= 55
