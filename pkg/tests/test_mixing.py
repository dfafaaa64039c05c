import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdmp import mixing as Mx
from sdmp.mixing import MixingError, MixSpec


def batch(n=4, c=3, h=8, w=8, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, c, h, w))


# ---------------------------------------------------------------- pairing

def test_pairing_reverses_batch():
    np.testing.assert_array_equal(Mx.pairing(6), [5, 4, 3, 2, 1, 0])
    assert Mx.pair_index(0, 6) == 5 and Mx.pair_index(2, 6) == 3


@given(st.integers(1, 64))
def test_pairing_is_involution_without_fixed_points(half):
    p = Mx.pairing(2 * half)
    np.testing.assert_array_equal(p[p], np.arange(2 * half))
    assert not np.any(p == np.arange(2 * half))


def test_odd_batch_rejected():
    with pytest.raises(MixingError, match="even"):
        Mx.pairing(5)
    with pytest.raises(MixingError, match="even"):
        Mx.mixup(batch(n=3), np.ones(3))


# ---------------------------------------------------------------- lambdas

def test_lambda_sampling_per_sample_and_per_batch():
    r = np.random.default_rng(0)
    lam = Mx.sample_lambdas(MixSpec(alpha=1.0), 64, r)
    assert lam.shape == (64,) and np.all((lam >= 0) & (lam <= 1)) and len(np.unique(lam)) == 64
    shared = Mx.sample_lambdas(MixSpec(alpha=1.0, lambda_mode="per_batch"), 64, r)
    assert np.all(shared == shared[0])


def test_lambda_sampling_seeded_without_rng():
    spec = MixSpec(alpha=0.8, seed=3)
    np.testing.assert_array_equal(Mx.sample_lambdas(spec, 8), Mx.sample_lambdas(spec, 8))


@pytest.mark.parametrize("alpha", [0.0, -1.0])
def test_nonpositive_alpha_rejected(alpha):
    with pytest.raises(MixingError, match="alpha"):
        MixSpec(alpha=alpha)


def test_beta_moments():
    # Beta(a, a) has mean 1/2 and variance 1 / (4 (2a + 1))
    a = 0.8
    lam = Mx.sample_lambdas(MixSpec(alpha=a), 200_000, np.random.default_rng(5))
    assert abs(lam.mean() - 0.5) < 3e-3
    assert abs(lam.var() - 1 / (4 * (2 * a + 1))) < 3e-3


# ---------------------------------------------------------------- mixup

def test_mixup_example_values():
    imgs = np.stack([np.zeros((1, 2, 2)), np.ones((1, 2, 2))])
    out = Mx.mixup(imgs, np.array([0.25, 0.25]))
    np.testing.assert_allclose(out.images[0], 0.75)
    np.testing.assert_allclose(out.images[1], 0.25)


def test_mixup_extreme_lambdas_copy_sources_bit_exactly():
    x = batch()
    np.testing.assert_array_equal(Mx.mixup(x, np.ones(4)).images, x)
    np.testing.assert_array_equal(Mx.mixup(x, np.zeros(4)).images, x[::-1])


@given(st.floats(0, 1), st.integers(0, 1000))
def test_mixup_is_convex_combination(lam, seed):
    x = batch(seed=seed)
    out = Mx.mixup(x, np.full(4, lam)).images
    lo = np.minimum(x, x[::-1]) - 1e-12
    hi = np.maximum(x, x[::-1]) + 1e-12
    assert np.all((out >= lo) & (out <= hi))


# ---------------------------------------------------------------- cutmix

def test_cutmix_lambda_is_clipped_box_area():
    r = np.random.default_rng(0)
    for _ in range(50):
        lam = r.uniform(size=8)
        out = Mx.cutmix(batch(n=8, h=16, w=12), lam, r)
        area = out.patch_boxes[:, 2] * out.patch_boxes[:, 3]
        np.testing.assert_array_equal(out.lambdas, 1 - area / (16 * 12))
        # pixels inside the box come from the partner, outside from the image itself
        x = batch(n=8, h=16, w=12)
        mixed = Mx.paste_boxes(x, out.patch_boxes)
        for i, (t, l, h, w) in enumerate(out.patch_boxes):
            mask = np.zeros((16, 12), bool)
            mask[t : t + h, l : l + w] = True
            np.testing.assert_array_equal(mixed[i][:, mask], x[7 - i][:, mask])
            np.testing.assert_array_equal(mixed[i][:, ~mask], x[i][:, ~mask])


def test_cutmix_shared_box():
    out = Mx.cutmix(batch(n=6), np.full(6, 0.6), np.random.default_rng(1), shared=True)
    assert np.all(out.patch_boxes == out.patch_boxes[0])
    assert np.all(out.lambdas == out.lambdas[0])


def test_cutmix_unit_lambda_is_identity():
    x = batch()
    out = Mx.cutmix(x, np.ones(4), np.random.default_rng(0))
    np.testing.assert_array_equal(out.images, x)
    np.testing.assert_array_equal(out.lambdas, np.ones(4))


# ---------------------------------------------------------------- resizemix

def test_resizemix_half_side_patch_gives_three_quarters():
    x = batch(n=2, h=32, w=32)
    boxes = np.array([[0, 0, 16, 16], [8, 4, 16, 16]])
    out = Mx.resizemix(x, None, boxes=boxes)
    np.testing.assert_array_equal(out.lambdas, [0.75, 0.75])


def test_resizemix_lambda_formula_exact():
    r = np.random.default_rng(3)
    for _ in range(30):
        out = Mx.resizemix(batch(n=6, h=32, w=32), r)
        b = out.patch_boxes
        np.testing.assert_array_equal(out.lambdas, 1.0 - (b[:, 2] * b[:, 3]) / (32 * 32))


def test_resizemix_patch_is_resized_partner():
    x = batch(n=2, h=16, w=16)
    boxes = np.array([[2, 3, 8, 8], [0, 0, 4, 4]])
    out = Mx.resizemix(x, None, boxes=boxes).images
    np.testing.assert_allclose(out[0, :, 2:10, 3:11], Mx.resize_bilinear(x[1], 8, 8))
    np.testing.assert_allclose(out[1, :, 0:4, 0:4], Mx.resize_bilinear(x[0], 4, 4))
    np.testing.assert_array_equal(out[0, :, 10:, :], x[0, :, 10:, :])


def test_resizemix_patch_size_drawn_per_source():
    boxes = Mx.resizemix_boxes(8, 32, 32, np.random.default_rng(0))
    assert len({tuple(b[2:]) for b in boxes}) > 1
    shared = Mx.resizemix_boxes(8, 32, 32, np.random.default_rng(0), shared=True)
    assert np.all(shared == shared[0])


def test_resize_bilinear_downsample_by_two_averages_pairs():
    x = np.arange(16.0).reshape(1, 4, 4)
    out = Mx.resize_bilinear(x, 2, 2)
    np.testing.assert_allclose(out, x.reshape(1, 2, 2, 2, 2).mean(axis=(2, 4)))


def test_resize_bilinear_identity():
    x = batch(n=2)
    np.testing.assert_allclose(Mx.resize_bilinear(x, 8, 8), x)


def test_resizemix_invalid_range():
    with pytest.raises(MixingError, match="patch_range"):
        Mx.resizemix_boxes(4, 32, 32, np.random.default_rng(0), patch_range=(0.5, 1.0))


# ---------------------------------------------------------------- lambda_c

@pytest.mark.parametrize("li,lj,expected", [(0.3, 0.8, 0.9), (1.0, 1.0, 0.0), (0.5, 0.5, 1.0)])
def test_lambda_c_examples(li, lj, expected):
    lc = Mx.compute_lambda_c(np.array([li, lj]))
    assert lc[0] == pytest.approx(expected, abs=1e-15)


@given(st.floats(0, 1), st.floats(0, 1))
def test_lambda_c_closed_form_and_symmetry(li, lj):
    lc = Mx.compute_lambda_c(np.array([li, lj]))
    assert abs(lc[0] - (1 - abs(li + lj - 1))) <= 1e-15
    assert lc[0] == lc[1]
    assert 0 <= lc[0] <= 1


# ---------------------------------------------------------------- strategy selection, paired views

def test_select_strategy_uniform():
    r = np.random.default_rng(0)
    picks = [Mx.select_strategy(r, Mx.STRATEGIES) for _ in range(30000)]
    counts = np.array([picks.count(s) for s in Mx.STRATEGIES])
    assert np.all(np.abs(counts / 30000 - 1 / 3) < 0.015)


def test_select_strategy_errors():
    with pytest.raises(MixingError, match="no mixing strategy"):
        Mx.select_strategy(np.random.default_rng(0), [])
    with pytest.raises(MixingError, match="unknown"):
        Mx.select_strategy(np.random.default_rng(0), ["cutout"])


@pytest.mark.parametrize("strategy", Mx.STRATEGIES)
def test_mix_views_share_lambda_and_geometry(strategy):
    x, xp = batch(n=6, seed=1), batch(n=6, seed=2)
    a, b = Mx.mix_views(x, xp, strategy, np.random.default_rng(0))
    np.testing.assert_array_equal(a.lambdas, b.lambdas)
    if strategy != Mx.MIXUP:
        np.testing.assert_array_equal(a.patch_boxes, b.patch_boxes)


@pytest.mark.parametrize("strategy", [Mx.CUTMIX, Mx.RESIZEMIX])
def test_mix_views_scaled_geometry_keeps_lambda(strategy):
    small, big = batch(n=4, h=8, w=8), batch(n=4, h=16, w=16)
    a, b = Mx.mix_views(small, big, strategy, np.random.default_rng(4), prime_scale=2)
    np.testing.assert_array_equal(b.patch_boxes, 2 * a.patch_boxes)
    np.testing.assert_array_equal(a.lambdas, b.lambdas)


def test_mix_views_identical_inputs_unit_lambda_is_identity():
    x = batch()
    a, b = Mx.mix_views(x, x.copy(), Mx.MIXUP, np.random.default_rng(0))
    lam = np.ones(4)
    np.testing.assert_array_equal(Mx.mixup(x, lam).images, x)
