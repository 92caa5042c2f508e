import numpy as np
import pytest

from growthcast.synth import (GrowthConfig, frontier, generate_series, growth_stats, stripe_bounds,
                              stripe_image)


def test_accretion_is_monotone():
    masks, _ = generate_series(GrowthConfig(dates=5, growth_rate=0.2, seed=1))
    for a, b in zip(masks, masks[1:]):
        assert np.all(b >= a)
    st = growth_stats(masks)
    assert st.lost == [0] * 4
    assert all(x <= y for x, y in zip(st.fractions, st.fractions[1:]))


def test_growth_only_on_frontier():
    masks, _ = generate_series(GrowthConfig(dates=2, growth_rate=0.5, seed=2))
    new = (masks[1] == 1) & (masks[0] == 0)
    assert np.all(frontier(masks[0])[new])


def test_same_seed_is_bit_identical():
    a_m, a_r = generate_series(GrowthConfig(seed=9))
    b_m, b_r = generate_series(GrowthConfig(seed=9))
    for x, y in zip(a_m, b_m):
        assert x.tobytes() == y.tobytes()
    for x, y in zip(a_r, b_r):
        assert x.pixels.tobytes() == y.pixels.tobytes()
    c_m, _ = generate_series(GrowthConfig(seed=10))
    assert c_m[0].tobytes() != a_m[0].tobytes()


def test_zero_growth_masks_equal():
    masks, _ = generate_series(GrowthConfig(growth_rate=0.0, dates=4))
    assert all(np.array_equal(masks[0], m) for m in masks)
    assert growth_stats(masks).changed == [0, 0, 0]


def test_initial_fraction_reached():
    masks, _ = generate_series(GrowthConfig(initial_fraction=0.15, seed=4))
    assert 0.15 <= masks[0].mean() < 0.3


@pytest.mark.parametrize("seed", range(10))
def test_step_rate_close_to_configured(seed):
    g = 0.05
    masks, _ = generate_series(GrowthConfig(width=128, height=128, growth_rate=g, seed=seed))
    for rate in growth_stats(masks).step_rates:
        assert abs(rate - g) <= 0.2 * g


def test_renders_in_unit_range_and_rgb():
    _, renders = generate_series(GrowthConfig(noise=0.3, seed=5))
    for r in renders:
        assert r.bands == 3
        assert r.pixels.min() >= 0 and r.pixels.max() <= 1


def test_render_separates_urban_from_background():
    masks, renders = generate_series(GrowthConfig(seed=6))
    m = masks[0].astype(bool)
    px = renders[0].pixels
    # concrete is brighter in the blue band than soil
    assert px[2][m].mean() > px[2][~m].mean() + 0.3


@pytest.mark.parametrize("field,value", [("dates", 1), ("initial_fraction", 0.0),
                                         ("initial_fraction", 1.0), ("growth_rate", 1.5),
                                         ("noise", -1.0), ("width", 0)])
def test_invalid_config(field, value):
    with pytest.raises(ValueError, match=field.split("_")[0]):
        generate_series(GrowthConfig(**{field: value}))


def test_growth_stats_needs_two_masks():
    with pytest.raises(ValueError):
        growth_stats([np.zeros((4, 4))])


def test_stripe_image_layout():
    img = stripe_image(64, noise=0.0)
    b = stripe_bounds(64, 3)
    assert b == [0, 21, 42, 64]
    assert np.all(img[:, :, :21] == np.float32(0.2)) and np.all(img[:, :, 42:] == np.float32(0.8))
