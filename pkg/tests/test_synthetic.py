import numpy as np
import pytest

from sirlan.errors import DataError
from sirlan.shape_model import fit_pca
from sirlan.synthetic import (SyntheticSpec, build_generator, generate_dataset, generate_one,
                              landmark_template, latent_shapes)


def test_same_seed_is_bit_identical():
    spec = SyntheticSpec(noise=0.0, count=2, seed=11)
    a, b = generate_dataset(spec), generate_dataset(spec)
    for (ia, pa), (ib, pb) in zip(a, b):
        assert ia.pixels.tobytes() == ib.pixels.tobytes()
        assert pa.tobytes() == pb.tobytes() and ia.face_box == ib.face_box


def test_different_seeds_differ():
    a = generate_one(SyntheticSpec(seed=0), 0)[1]
    b = generate_one(SyntheticSpec(seed=1), 0)[1]
    assert not np.array_equal(a, b)


def test_pca_recovers_component_count():
    spec = SyntheticSpec(count=200)
    model = fit_pca(list(latent_shapes(spec)), variance_keep=0.98)
    assert model.n_components == spec.shape_components


def test_latent_shapes_match_rendered_annotations():
    spec = SyntheticSpec(count=4, seed=5)
    np.testing.assert_array_equal(latent_shapes(spec), np.stack([p for _, p in generate_dataset(spec)]))


def test_single_image_regeneration():
    spec = SyntheticSpec(count=5, seed=9)
    im, pts = generate_dataset(spec)[3]
    im2, pts2 = generate_one(spec, 3)
    assert im.pixels.tobytes() == im2.pixels.tobytes() and np.array_equal(pts, pts2)


def _xcorr_peak(pixels, template, up=8):
    """Location of the cross-correlation maximum of a zero-mean template,
    with the correlation upsampled ``up`` times by spectral zero-padding."""
    h, w, _ = pixels.shape
    t = template.shape[0]
    pad = np.zeros_like(pixels)
    # a zero-mean symmetric template is blind to constant and linear background
    pad[:t, :t] = template - template.mean(axis=(0, 1))
    spec = (np.fft.fft2(pixels, axes=(0, 1)) * np.conj(np.fft.fft2(pad, axes=(0, 1)))).sum(axis=2)
    big = np.zeros((h * up, w * up), dtype=complex)
    shifted = np.fft.fftshift(spec)
    oy, ox = (h * up - h) // 2, (w * up - w) // 2
    big[oy:oy + h, ox:ox + w] = shifted
    score = np.real(np.fft.ifft2(np.fft.ifftshift(big)))
    i, j = np.unravel_index(np.argmax(score), score.shape)
    c = (t - 1) / 2
    return np.array([(j / up + c) % w, (i / up + c) % h])


@pytest.mark.parametrize("channels", [3, 1])
def test_pattern_centres_match_annotations(channels):
    spec = SyntheticSpec(count=6, noise=0.0, seed=2, channels=channels)
    gen = build_generator(spec)
    templates = [landmark_template(spec, k, gen=gen) for k in range(spec.landmark_count)]
    for image, pts in generate_dataset(spec):
        for k, tpl in enumerate(templates):
            peak = _xcorr_peak(image.pixels, tpl)
            assert np.linalg.norm(peak - pts[k]) < 0.5, (image.name, k, peak, pts[k])


@pytest.mark.parametrize("channels", [1, 3])
def test_templates_are_mutually_distinguishable(channels):
    spec = SyntheticSpec(channels=channels)
    flat = [landmark_template(spec, k).reshape(-1) for k in range(spec.landmark_count)]
    for a in range(len(flat)):
        for b in range(a + 1, len(flat)):
            x, y = flat[a] - flat[a].mean(), flat[b] - flat[b].mean()
            assert x @ y / (np.linalg.norm(x) * np.linalg.norm(y)) < 0.5


def test_collisions_exhaust_retries():
    with pytest.raises(DataError):
        generate_one(SyntheticSpec(patch_size=61), 0, max_retries=5)


def test_other_landmark_counts():
    spec = SyntheticSpec(landmark_count=9, count=2, shape_components=4)
    im, pts = generate_dataset(spec)[0]
    assert pts.shape == (9, 2) and im.pixels.shape == (64, 64, 3)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(landmark_count=2)
    with pytest.raises(ValueError):
        SyntheticSpec(count=0)


def test_pixels_and_boxes_are_valid():
    for image, pts in generate_dataset(SyntheticSpec(count=10, seed=4)):
        assert image.pixels.min() >= 0 and image.pixels.max() <= 1
        x, y, w, h = image.face_box
        assert w == h and 0 <= x and x + w <= 64
        assert np.all((pts >= 0) & (pts < 64))
