import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sirlan.errors import InsufficientDataError, ShapeError, SingularFitError
from sirlan.shape_model import (PoseShapeParams, ShapeModel, fit_pca, params_to_shape,
                                rotation, shape_to_params, wrap_angle)


def _rot90(v):
    p = v.reshape(-1, 2)
    return np.column_stack([-p[:, 1], p[:, 0]]).reshape(-1)


def _generator(m=8, p=3, seed=0):
    """A centred mean shape and an orthonormal basis orthogonal to similarity motions."""
    rng = np.random.default_rng(seed)
    s0 = rng.normal(size=(m, 2))
    s0 = (s0 - s0.mean(axis=0)).reshape(-1) * 20
    tx = np.tile([1.0, 0.0], m)
    ty = np.tile([0.0, 1.0], m)
    motions, _ = np.linalg.qr(np.column_stack([tx, ty, s0, _rot90(s0)]))
    raw = rng.normal(size=(2 * m, p))
    raw -= motions @ (motions.T @ raw)
    basis, _ = np.linalg.qr(raw)
    return s0, basis


def _random_model(m=6, p=2, seed=0):
    s0, basis = _generator(m, p, seed)
    return ShapeModel(s0, basis, np.ones(p), np.ones(p + 4))


def test_identical_shapes_give_zero_components():
    s = np.array([[0.0, 0.0], [4.0, 1.0], [2.0, 5.0]]) + 10
    model = fit_pca([s, s, s])
    assert model.n_components == 0
    np.testing.assert_allclose(model.mean_points(), s - s.mean(axis=0), atol=1e-9)


def test_rank_one_variation():
    s0, basis = _generator(6, 1, seed=3)
    v = basis[:, 0]
    model = fit_pca([(s0 + 2 * v).reshape(-1, 2), (s0 - 2 * v).reshape(-1, 2)])
    assert model.n_components == 1
    assert abs(abs(model.basis[:, 0] @ v) - 1) < 1e-9


def test_subspace_recovery_principal_angles():
    s0, basis = _generator(10, 3, seed=1)
    rng = np.random.default_rng(2)
    shapes = []
    # antithetic pairs keep the sample mean of alpha at zero, so the
    # Procrustes mean coincides with the generator's mean shape
    draws = rng.normal(size=(25, 3)) * [5, 3, 2]
    for a in np.concatenate([draws, -draws]):
        canon = (s0 + basis @ a).reshape(-1, 2)
        shapes.append(rng.uniform(0.5, 2) * canon @ rotation(rng.uniform(-1, 1)).T + rng.normal(size=2) * 30)
    model = fit_pca(shapes, variance_keep=0.999999)
    assert model.n_components == 3
    # express the generator basis in the model's canonical frame
    m0 = model.mean_shape
    phi = np.arctan2(m0 @ _rot90(s0), m0 @ s0)
    framed = np.column_stack([(b.reshape(-1, 2) @ rotation(phi).T).reshape(-1) for b in basis.T])
    cosines = np.linalg.svd(model.basis.T @ framed, compute_uv=False)
    angles = np.arccos(np.clip(cosines, -1, 1))
    assert angles.max() < 1e-6


def test_model_invariants_after_fit():
    s0, basis = _generator(10, 3, seed=4)
    rng = np.random.default_rng(5)
    shapes = [(s0 + basis @ rng.normal(size=3) + rng.normal(size=20) * 0.1).reshape(-1, 2)
              for _ in range(30)]
    model = fit_pca(shapes)
    np.testing.assert_allclose(model.basis.T @ model.basis, np.eye(model.n_components), atol=1e-10)
    np.testing.assert_allclose(model.mean_points().mean(axis=0), 0, atol=1e-10)
    assert model.param_scales.shape == (model.n_components + 4,)


def test_fit_requires_two_shapes():
    with pytest.raises(InsufficientDataError):
        fit_pca([np.zeros((3, 2))])


def test_identity_params_return_mean():
    model = _random_model()
    out = params_to_shape(PoseShapeParams(np.zeros(2), (0, 0), 0.0, 1.0), model)
    np.testing.assert_array_equal(out, model.mean_points())


def test_quarter_rotation():
    model = _random_model()
    out = params_to_shape(PoseShapeParams(np.zeros(2), (0, 0), np.pi / 2, 1.0), model)
    s = model.mean_points()
    np.testing.assert_allclose(out, np.column_stack([-s[:, 1], s[:, 0]]), atol=1e-12)


def test_params_to_shape_matches_per_point_oracle():
    model = _random_model(seed=9)
    rng = np.random.default_rng(9)
    s = PoseShapeParams(rng.normal(size=2), rng.normal(size=2) * 50, rng.uniform(-3, 3), rng.uniform(0.5, 3))
    canon = model.mean_shape + model.basis @ s.alpha
    c, sn = np.cos(s.beta), np.sin(s.beta)
    expect = []
    for i in range(model.n_landmarks):
        x, y = canon[2 * i], canon[2 * i + 1]
        expect.append([s.f * (c * x - sn * y) + s.t2d[0], s.f * (sn * x + c * y) + s.t2d[1]])
    np.testing.assert_allclose(params_to_shape(s, model), expect, atol=1e-12, rtol=0)


def test_alpha_length_checked():
    with pytest.raises(ShapeError):
        params_to_shape(PoseShapeParams(np.zeros(3), (0, 0), 0, 1), _random_model())


def test_mean_shape_fits_to_identity():
    model = _random_model()
    s = shape_to_params(model.mean_points(), model)
    np.testing.assert_allclose(s.alpha, 0, atol=1e-12)
    np.testing.assert_allclose(s.t2d, 0, atol=1e-12)
    assert abs(s.beta) < 1e-12 and abs(s.f - 1) < 1e-12


def test_orthogonal_residual_is_ignored():
    s0, basis = _generator(6, 3, seed=11)
    model = ShapeModel(s0, basis[:, :2], np.ones(2), np.ones(6))
    v = basis[:, 2] * 1.5
    s = shape_to_params((s0 + v).reshape(-1, 2), model)
    np.testing.assert_allclose(s.alpha, 0, atol=1e-12)
    recon = params_to_shape(s, model).reshape(-1)
    assert abs(np.linalg.norm(recon - (s0 + v)) - np.linalg.norm(v)) < 1e-9


def test_degenerate_shape_rejected():
    with pytest.raises(SingularFitError):
        shape_to_params(np.full((6, 2), 3.0), _random_model())


def test_params_validate_scale():
    with pytest.raises(ShapeError):
        PoseShapeParams(np.zeros(1), (0, 0), 0, 0.0)


def test_model_save_load(tmp_path):
    model = _random_model()
    model.save(tmp_path / "m.bin")
    back = ShapeModel.load(tmp_path / "m.bin")
    for name in ("mean_shape", "basis", "component_std", "param_scales"):
        np.testing.assert_array_equal(getattr(back, name), getattr(model, name))


params = st.tuples(
    st.lists(st.floats(-3, 3), min_size=2, max_size=2),
    st.tuples(st.floats(-200, 200), st.floats(-200, 200)),
    st.floats(-3.1, 3.1),
    st.floats(0.2, 5.0),
)


@settings(max_examples=100, deadline=None)
@given(params)
def test_round_trip(p):
    model = _random_model()
    s = PoseShapeParams(np.array(p[0]), p[1], p[2], p[3])
    back = shape_to_params(params_to_shape(s, model), model)
    np.testing.assert_allclose(back.to_vector(), s.to_vector(), atol=1e-9, rtol=0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20))
def test_rotation_is_proper(beta):
    r = rotation(beta)
    np.testing.assert_allclose(r.T @ r, np.eye(2), atol=1e-12)
    assert abs(np.linalg.det(r) - 1) < 1e-12
    assert -np.pi < wrap_angle(beta) <= np.pi


@settings(max_examples=50, deadline=None)
@given(params, st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 10))
def test_translation_and_scale_equivariance(p, dx, dy, c):
    model = _random_model()
    s = PoseShapeParams(np.array(p[0]), p[1], p[2], p[3])
    base = params_to_shape(s, model)
    moved = params_to_shape(PoseShapeParams(s.alpha, s.t2d + [dx, dy], s.beta, s.f), model)
    np.testing.assert_allclose(moved - base, np.broadcast_to([dx, dy], base.shape), atol=1e-9)
    scaled = params_to_shape(PoseShapeParams(s.alpha, s.t2d, s.beta, s.f * c), model)
    np.testing.assert_allclose(scaled - s.t2d, c * (base - s.t2d), atol=1e-9)
