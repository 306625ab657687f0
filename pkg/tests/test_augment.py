"""Augmentation invariants: exact identities, geometric round trips, draw
economy and the 32-policy enumeration."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from cxrnet import augment
from cxrnet.augment import (
    FLAG_ORDER,
    AugmentationParams,
    AugmentationPolicy,
    apply,
    enumerate_policies,
    sample_params,
)


@pytest.fixture
def noise_image():
    return np.random.default_rng(0).random((40, 36, 1)).astype(np.float32)


@pytest.fixture
def smooth_image():
    """Low-resolution noise upsampled bilinearly, so resampling error is
    dominated by interpolation rather than aliasing."""
    lo = (np.random.default_rng(3).random((8, 8)) * 255).astype(np.uint8)
    up = Image.fromarray(lo).resize((64, 64), Image.BILINEAR)
    return (np.asarray(up, dtype=np.float32) / 255.0)[..., None]


class TestExactIdentities:
    def test_identity_params_return_bit_identical_copy(self, noise_image):
        out = apply(noise_image, AugmentationParams())
        assert np.array_equal(out, noise_image)
        assert out is not noise_image

    def test_flip_is_an_exact_mirror(self, noise_image):
        out = apply(noise_image, AugmentationParams(flip=True))
        assert np.array_equal(out, noise_image[:, ::-1, :])

    def test_flip_involution(self, noise_image):
        twice = apply(apply(noise_image, AugmentationParams(flip=True)),
                      AugmentationParams(flip=True))
        assert np.array_equal(twice, noise_image)

    def test_intensity_shift_on_constant_image(self):
        base = np.full((8, 8, 1), 0.5, dtype=np.float32)
        out = apply(base, AugmentationParams(delta_intensity=0.10))
        assert np.allclose(out, 0.6, atol=1e-6)

    def test_output_clipped_to_unit_range(self):
        bright = np.full((4, 4, 1), 0.97, dtype=np.float32)
        dark = np.full((4, 4, 1), 0.02, dtype=np.float32)
        assert apply(bright, AugmentationParams(delta_intensity=0.1)).max() <= 1.0
        assert apply(dark, AugmentationParams(delta_intensity=-0.1)).min() >= 0.0

    def test_integer_translation_matches_shift_with_edge_fill(self, smooth_image):
        out = apply(smooth_image, AugmentationParams(shift_x=4 / 64))
        expected = np.empty_like(smooth_image)
        expected[:, 4:] = smooth_image[:, :-4]
        expected[:, :4] = smooth_image[:, :1]
        assert np.allclose(out, expected, atol=1e-6)


class TestGeometricRoundTrips:
    def test_rotation_inverts_to_small_error(self, smooth_image):
        there = apply(smooth_image, AugmentationParams(theta_deg=10.0))
        back = apply(there, AugmentationParams(theta_deg=-10.0))
        inner = (slice(8, -8), slice(8, -8))
        assert np.abs(back[inner] - smooth_image[inner]).mean() < 0.02

    def test_zoom_inverts_to_small_error(self, smooth_image):
        there = apply(smooth_image, AugmentationParams(zoom_factor=1.15))
        back = apply(there, AugmentationParams(zoom_factor=1 / 1.15))
        inner = (slice(8, -8), slice(8, -8))
        assert np.abs(back[inner] - smooth_image[inner]).mean() < 0.02

    def test_zoom_in_magnifies_center(self):
        # a centered bright square should cover more pixels after zooming in
        img = np.zeros((33, 33, 1), dtype=np.float32)
        img[12:21, 12:21] = 1.0
        zoomed = apply(img, AugmentationParams(zoom_factor=1.15))
        assert zoomed.sum() > img.sum()


class TestShapeAndRange:
    @given(theta=st.floats(-10, 10), sx=st.floats(-0.1, 0.1),
           sy=st.floats(-0.1, 0.1), flip=st.booleans(),
           delta=st.floats(-0.1, 0.1), zoom=st.floats(0.85, 1.15))
    @settings(max_examples=40, deadline=None)
    def test_output_stays_valid(self, theta, sx, sy, flip, delta, zoom):
        img = np.random.default_rng(1).random((24, 20, 3)).astype(np.float32)
        out = apply(img, AugmentationParams(theta, sx, sy, flip, delta, zoom))
        assert out.shape == img.shape
        assert out.dtype == img.dtype
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_rejects_non_hwc_input(self):
        with pytest.raises(ValueError):
            apply(np.zeros((8, 8)), AugmentationParams())


class TestSampling:
    def test_disabled_flags_consume_no_draws(self):
        policy = AugmentationPolicy(rotation=True)
        a = np.random.default_rng(11)
        b = np.random.default_rng(11)
        drawn = sample_params(policy, a)
        assert drawn.theta_deg == b.uniform(-10.0, 10.0)
        assert (drawn.shift_x, drawn.shift_y, drawn.flip,
                drawn.delta_intensity, drawn.zoom_factor) == (0.0, 0.0, False, 0.0, 1.0)

    def test_draw_order_is_stable_across_policies(self):
        # zoom-only must see the same stream position whether or not the
        # earlier flags exist at all
        z_only = sample_params(AugmentationPolicy(zoom=True),
                               np.random.default_rng(5))
        manual = 1.0 + np.random.default_rng(5).uniform(-0.15, 0.15)
        assert z_only.zoom_factor == manual

    def test_ranges_hold_over_many_draws(self):
        policy = AugmentationPolicy(True, True, True, True, True)
        rng = np.random.default_rng(0)
        flips = 0
        for _ in range(2000):
            p = sample_params(policy, rng)
            assert -10.0 <= p.theta_deg <= 10.0
            assert -0.10 <= p.shift_x <= 0.10
            assert -0.10 <= p.shift_y <= 0.10
            assert -0.10 <= p.delta_intensity <= 0.10
            assert 0.85 <= p.zoom_factor <= 1.15
            flips += p.flip
        assert 0.4 < flips / 2000 < 0.6

    def test_custom_ranges_respected(self):
        policy = AugmentationPolicy(rotation=True, rotation_deg=2.0)
        rng = np.random.default_rng(1)
        for _ in range(200):
            assert abs(sample_params(policy, rng).theta_deg) <= 2.0


class TestPolicyEnumeration:
    def test_thirty_two_policies_in_group_order(self):
        labels = [p.label() for p in enumerate_policies()]
        expected = ["none", "all"] + [
            "+".join(combo)
            for k in (1, 2, 3, 4)
            for combo in itertools.combinations(FLAG_ORDER, k)]
        assert labels == expected
        assert len(set(labels)) == 32

    def test_base_ranges_propagate(self):
        base = AugmentationPolicy(rotation_deg=5.0, zoom_frac=0.3)
        for policy in enumerate_policies(base):
            assert policy.rotation_deg == 5.0
            assert policy.zoom_frac == 0.3

    def test_label_round_trip(self):
        policy = AugmentationPolicy(rotation=True, intensity_shift=True)
        assert policy.label() == "rotation+intensity_shift"
        assert AugmentationPolicy(True, True, True, True, True).label() == "all"
        assert AugmentationPolicy().label() == "none"

    def test_json_round_trip_and_unknown_key(self):
        policy = AugmentationPolicy(zoom=True, zoom_frac=0.2)
        assert AugmentationPolicy.from_json(policy.to_json()) == policy
        with pytest.raises(ValueError):
            AugmentationPolicy.from_json({"rotationn": True})


class TestCallCounter:
    def test_counter_tracks_apply_calls(self, noise_image):
        augment.reset_apply_counter()
        assert augment.apply_call_count == 0
        apply(noise_image, AugmentationParams())
        apply(noise_image, AugmentationParams(flip=True))
        assert augment.apply_call_count == 2
        augment.reset_apply_counter()
        assert augment.apply_call_count == 0
