import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.special import sph_harm_y

from gscodec.model import (
    SH_C0, CameraPose, GaussianCloud, PlyError, canonicalize_quaternions, covariance_from, evaluate_sh,
    load_cameras, load_ply, save_cameras, save_ply, sh_basis,
)


def random_cloud(rng, n=20, degree=3):
    B = (degree + 1) ** 2
    return GaussianCloud(
        rng.normal(size=(n, 3)),
        rng.uniform(0.01, 0.99, n),
        np.exp(rng.normal(-3, 1, size=(n, 3))),
        canonicalize_quaternions(rng.normal(size=(n, 4))),
        rng.normal(scale=0.3, size=(n, 3, B)),
    )


def one_vertex_ply(**values):
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3"]
    row = {n: 0.0 for n in names}
    row["rot_0"] = 1.0
    row.update(values)
    head = "ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
    head += "".join(f"property float {n}\n" for n in names) + "end_header\n"
    return head.encode() + np.array([row[n] for n in names], dtype="<f4").tobytes()


# --- PLY ---------------------------------------------------------------------

def test_ply_activations():
    c = load_ply(one_vertex_ply())
    assert c.opacities[0] == 0.5
    np.testing.assert_array_equal(c.scales[0], [1.0, 1.0, 1.0])
    assert c.degree == 0


def test_save_ply_inverse_activations():
    c = GaussianCloud(np.zeros((1, 3)), np.array([0.5]), np.ones((1, 3)), np.array([[1.0, 0, 0, 0]]),
                      np.zeros((1, 3, 1)))
    data = save_ply(c)
    body = np.frombuffer(data[data.index(b"end_header\n") + 11:], dtype="<f4")
    # layout: xyz, normals, dc, opacity, scales, rot
    assert body[9] == 0.0
    np.testing.assert_array_equal(body[10:13], 0.0)


def test_ply_roundtrip(rng):
    c = random_cloud(rng)
    d = load_ply(save_ply(c))
    for name in ("positions", "opacities", "scales", "rotations", "sh_coeffs"):
        np.testing.assert_allclose(getattr(d, name), getattr(c, name), atol=1e-6, rtol=1e-6)


@given(st.integers(0, 3), st.integers(1, 30), st.integers(0, 2**31))
def test_ply_roundtrip_property(degree, n, seed):
    c = random_cloud(np.random.default_rng(seed), n, degree)
    d = load_ply(save_ply(c))
    assert d.degree == degree
    for name in ("positions", "opacities", "scales", "rotations", "sh_coeffs"):
        np.testing.assert_allclose(getattr(d, name), getattr(c, name), atol=1e-6, rtol=1e-6)


def test_save_ply_clamps_extreme_opacity():
    c = GaussianCloud(np.zeros((2, 3)), np.array([0.0, 1.0]), np.ones((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)),
                      np.zeros((2, 3, 1)))
    d = load_ply(save_ply(c))
    assert np.all(np.isfinite(d.opacities))
    np.testing.assert_allclose(d.opacities, [1e-6, 1 - 1e-6], atol=1e-7)


def test_ply_missing_property_named():
    data = one_vertex_ply().replace(b"property float opacity\n", b"")
    data = data[: -4]  # drop one float to keep the row consistent
    with pytest.raises(PlyError, match="opacity"):
        load_ply(data)


def test_ply_nonfinite_named():
    with pytest.raises(PlyError, match="scale_1"):
        load_ply(one_vertex_ply(scale_1=np.inf))


def test_ply_rejects_ascii_and_garbage():
    with pytest.raises(PlyError):
        load_ply(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(PlyError):
        load_ply(b"not a ply")
    with pytest.raises(PlyError, match="truncated"):
        load_ply(one_vertex_ply()[:-3])


def test_ply_quaternions_normalized_and_canonical():
    c = load_ply(one_vertex_ply(rot_0=-2.0, rot_1=0.0, rot_2=0.0, rot_3=0.0))
    np.testing.assert_allclose(c.rotations[0], [1, 0, 0, 0])


# --- SH ----------------------------------------------------------------------

def real_sh_oracle(l, m, d):
    """Real SH from scipy's complex harmonics (Condon-Shortley phase included)."""
    theta = np.arccos(np.clip(d[..., 2], -1, 1))
    phi = np.arctan2(d[..., 1], d[..., 0])
    Y = sph_harm_y(l, abs(m), theta, phi)
    if m > 0:
        return np.sqrt(2) * Y.real
    if m < 0:
        return np.sqrt(2) * Y.imag
    return Y.real


def test_sh_basis_matches_scipy(rng):
    d = rng.normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    Y = sh_basis(d, 3)
    col = 0
    for l in range(4):
        for m in range(-l, l + 1):
            np.testing.assert_allclose(Y[:, col], real_sh_oracle(l, m, d), atol=1e-12)
            col += 1


def test_evaluate_sh_trivial_cases():
    np.testing.assert_allclose(evaluate_sh(np.zeros((3, 1)), [0, 0, 1]), [0.5, 0.5, 0.5])
    k = np.zeros((3, 1))
    k[0, 0] = 1.7726
    assert evaluate_sh(k, [1, 0, 0])[0] == 1.0


def test_evaluate_sh_degree1_at_z(rng):
    k = rng.normal(scale=0.2, size=(3, 4))
    expect = 0.5 + SH_C0 * k[:, 0] + real_sh_oracle(1, 0, np.array([0, 0, 1.0])) * k[:, 2]
    np.testing.assert_allclose(evaluate_sh(k, [0, 0, 1]), np.clip(expect, 0, 1), atol=1e-12)


def test_evaluate_sh_normalizes_direction(rng):
    k = rng.normal(scale=0.2, size=(3, 16))
    np.testing.assert_allclose(evaluate_sh(k, [0, 3, 4]), evaluate_sh(k, [0, 0.6, 0.8]))


def test_evaluate_sh_rejects_bad_basis_count():
    with pytest.raises(ValueError):
        evaluate_sh(np.zeros((3, 5)), [0, 0, 1])


@given(hnp.arrays(np.float64, (3, 1), elements=st.floats(-3, 3)),
       hnp.arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_degree0_view_independent(k, d):
    np.testing.assert_allclose(evaluate_sh(k, d), evaluate_sh(k, [0, 0, 1]))


# --- covariance ----------------------------------------------------------------

def test_covariance_trivial():
    np.testing.assert_allclose(covariance_from([1, 1, 1], [1, 0, 0, 0]), np.eye(3))
    np.testing.assert_allclose(covariance_from([2, 1, 1], [1, 0, 0, 0]), np.diag([4.0, 1, 1]))


def test_covariance_eigenvalues(rng):
    for _ in range(20):
        s = np.exp(rng.normal(size=3))
        q = canonicalize_quaternions(rng.normal(size=4))
        ev = np.linalg.eigvalsh(covariance_from(s, q))
        np.testing.assert_allclose(np.sort(ev), np.sort(s**2), rtol=1e-6)


@given(hnp.arrays(np.float64, 3, elements=st.floats(1e-3, 1e2)),
       hnp.arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 1e-2))
def test_covariance_symmetric_pd(s, q):
    S = covariance_from(s, canonicalize_quaternions(q))
    assert np.abs(S - S.T).max() <= 1e-9 * max(1.0, np.abs(S).max())
    np.linalg.cholesky(S)


@given(hnp.arrays(np.float64, (5, 4), elements=st.floats(-1, 1)).filter(lambda v: np.all(np.linalg.norm(v, axis=1) > 1e-3)))
def test_canonical_quaternions_same_rotation(q):
    c = canonicalize_quaternions(q)
    np.testing.assert_allclose(np.linalg.norm(c, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(covariance_from(np.ones((5, 3)) * [1, 2, 3], c),
                               covariance_from(np.ones((5, 3)) * [1, 2, 3], -c), atol=1e-12)
    assert np.all(c[np.arange(5), np.argmax(c != 0, axis=1)] > 0)


# --- cloud and cameras -----------------------------------------------------------

def test_cloud_rejects_inconsistent_lengths():
    with pytest.raises(ValueError):
        GaussianCloud(np.zeros((2, 3)), np.ones(3) * 0.5, np.ones((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)),
                      np.zeros((2, 3, 1)))


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraPose(np.eye(3) * 2, np.zeros(3))
    with pytest.raises(ValueError):
        CameraPose(np.eye(3), np.zeros(3), focal=(0.0, 1.0))


def test_camera_json_roundtrip(tmp_path):
    cams = [CameraPose.look_at((3, 1, 1), name="a"), CameraPose.look_at((-2, 2, 0.5), size=(64, 32), name="b")]
    save_cameras(cams, tmp_path / "c.json")
    back = load_cameras(tmp_path / "c.json")
    for a, b in zip(cams, back):
        np.testing.assert_allclose(a.rotation, b.rotation)
        assert a.size == b.size and a.name == b.name


def test_look_at_points_forward():
    cam = CameraPose.look_at((4, 0, 0))
    np.testing.assert_allclose(cam.rotation @ (np.zeros(3) - cam.center), [0, 0, 4], atol=1e-12)
