import itertools

import numpy as np
import pytest

from nsync.errors import ConfigError
from nsync.metrics import FeatureExtractor, cmmd, extract_features, median_bandwidth, mmd2_unbiased, rbf_kernel
from nsync.model import GENERIC, DenoiserConfig, Model
from nsync.records import sha256_file
from nsync.styleworld import (
    GENERIC_STYLES,
    IDENTITY,
    TARGET_STYLES,
    Dataset,
    StyleParams,
    WorldConfig,
    base_pattern,
    curate_negatives,
    make_dataset,
    render,
    stylize,
)

ALL_STYLES = GENERIC_STYLES + TARGET_STYLES


def test_identity_style_returns_base_pattern(world):
    for c in range(world.n_classes):
        np.testing.assert_array_equal(render(c, IDENTITY, None, world), base_pattern(c, world))


def test_offset_shifts_mean(world):
    shifted = StyleParams("shift", offset=0.5)
    for c in range(world.n_classes):
        diff = render(c, shifted, None, world) - render(c, IDENTITY, None, world)
        np.testing.assert_allclose(diff, 0.5, rtol=0, atol=1e-15)


def test_band_gains_are_linear(world):
    x = base_pattern(0, world)
    a = stylize(x, StyleParams("a", (2.0, 1.0, 1.0, 1.0)), world.grid)
    b = stylize(x, StyleParams("b", (3.0, 1.0, 1.0, 1.0)), world.grid)
    np.testing.assert_allclose(b - a, a - x, atol=1e-12)
    # all gains equal to g scale the whole pattern by g
    g = stylize(x, StyleParams("g", (1.7,) * 4), world.grid)
    np.testing.assert_allclose(g, 1.7 * x, atol=1e-12)


def test_style_params_validation():
    with pytest.raises(ConfigError):
        StyleParams("bad", (1.0, 0.0, 1.0, 1.0))
    with pytest.raises(ConfigError):
        StyleParams("bad", contrast=-1.0)
    with pytest.raises(ConfigError):
        StyleParams("bad", (1.0, 1.0))
    with pytest.raises(ConfigError):
        WorldConfig().style("nope")


@pytest.mark.parametrize("a,b", list(itertools.combinations(ALL_STYLES, 2)), ids=lambda s: s.name)
def test_bundled_styles_differ_by_twenty_percent(a, b):
    fields = list(zip(a.gains, b.gains)) + [(a.offset, b.offset), (a.contrast, b.contrast)]
    rel = [abs(x - y) / max(abs(x), abs(y)) for x, y in fields if max(abs(x), abs(y)) > 0]
    assert max(rel) >= 0.2 - 1e-12


@pytest.fixture(scope="module")
def style_draws(world):
    return {s.name: make_dataset(s, 400, seed=3, world=world).x for s in ALL_STYLES}


@pytest.mark.parametrize("a,b", list(itertools.combinations(ALL_STYLES, 2)), ids=lambda s: s.name)
def test_styles_are_separable(style_draws, a, b):
    xa, xb = style_draws[a.name], style_draws[b.name]
    kernel = rbf_kernel(median_bandwidth(xa, xb))
    between = mmd2_unbiased(xa[:200], xb[:200], kernel)
    within = mmd2_unbiased(xa[:200], xa[200:], kernel)
    assert between >= 5 * abs(within)


def test_style_features_differ(style_draws):
    fe = FeatureExtractor()
    means = {k: extract_features(v, fe).mean(0) for k, v in style_draws.items()}
    for a, b in itertools.combinations(means, 2):
        assert np.linalg.norm(means[a] - means[b]) >= 0.1


def test_dataset_determinism_and_prefix(world):
    a = make_dataset(TARGET_STYLES[0], 50, seed=4, world=world)
    b = make_dataset(TARGET_STYLES[0], 50, seed=4, world=world)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.contents, b.contents)
    short = make_dataset(TARGET_STYLES[0], 20, seed=4, world=world)
    np.testing.assert_array_equal(short.x, a.x[:20])
    assert not np.array_equal(make_dataset(TARGET_STYLES[0], 50, seed=5, world=world).x, a.x)


def test_smallest_positive_set_size(world):
    ds = make_dataset(TARGET_STYLES[1], 137, seed=11, world=world)
    assert len(ds) == 137 and all(s.caption.style is None for s in ds)
    assert np.all(np.isfinite(ds.x))


def test_class_histogram_follows_mix(world):
    mix = np.array([0.05, 0.1, 0.15, 0.2, 0.2, 0.3])
    ds = make_dataset(IDENTITY, 10_000, class_mix=mix, seed=1, world=world)
    freq = np.bincount(ds.contents, minlength=6) / len(ds)
    assert np.all(np.abs(freq - mix) <= 0.02)


def test_class_mix_validation(world):
    for bad in ([], [1.0, 2.0], [-1, 1, 1, 1, 1, 1], [0] * 6):
        with pytest.raises(ValueError):
            make_dataset(IDENTITY, 5, class_mix=bad, world=world)
    with pytest.raises(ValueError):
        make_dataset(IDENTITY, 0, world=world)


def test_dataset_save_load_and_csv(tmp_path, world):
    ds = make_dataset(TARGET_STYLES[0], 7, seed=2, world=world)
    ds.save(tmp_path / "d.ds")
    back = Dataset.load(tmp_path / "d.ds")
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.contents, ds.contents)
    assert back.meta["style"]["name"] == "targetA"
    ds.export_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert len(lines) == 8 and lines[0].startswith("index,content,x0")
    assert float(lines[1].split(",")[2]) == ds.x[0, 0]


def test_negatives_match_positives_in_size_and_classes(tiny_base, world):
    pos = make_dataset(TARGET_STYLES[1], 30, seed=11, world=world)
    neg = curate_negatives(tiny_base, pos.captions, seed=13, n_steps=10)
    assert len(neg) == len(pos)
    np.testing.assert_array_equal(neg.contents, pos.contents)
    again = curate_negatives(tiny_base, pos.captions, seed=13, n_steps=10)
    assert neg.x.tobytes() == again.x.tobytes()
    assert len(curate_negatives(tiny_base, pos.contents, n_per_caption=3, seed=13, n_steps=10)) == 90


def test_negatives_ignore_target_style(tiny_base, world, tmp_path):
    # same captions rendered in two different target styles give the same negatives
    a = make_dataset(TARGET_STYLES[0], 25, seed=11, world=world)
    b = make_dataset(TARGET_STYLES[1], 25, seed=11, world=world)
    np.testing.assert_array_equal(a.contents, b.contents)
    curate_negatives(tiny_base, a.captions, seed=13, n_steps=10).save(tmp_path / "a.ds")
    curate_negatives(tiny_base, b.captions, seed=13, n_steps=10).save(tmp_path / "b.ds")
    assert sha256_file(tmp_path / "a.ds") == sha256_file(tmp_path / "b.ds")


def test_negative_curation_guards(tiny_base):
    fresh = Model.init(DenoiserConfig(d_hidden=8), 6, (GENERIC,), seed=0)
    with pytest.raises(ValueError, match="pretrained"):
        curate_negatives(fresh, [0, 1])
    with pytest.raises(ValueError, match="frozen"):
        curate_negatives(tiny_base.set_adaptation_mode("ti"), [0, 1])
    with pytest.raises(ValueError):
        curate_negatives(tiny_base, [0, 1], n_per_caption=0)
    renamed = Model(tiny_base.config, tiny_base.params, ("OTHER",) + tiny_base.style_names[1:], tiny_base.schedule, None, None, True)
    with pytest.raises(ValueError, match=GENERIC):
        curate_negatives(renamed, [0, 1])


@pytest.mark.parametrize("target", [s.name for s in TARGET_STYLES])
def test_negatives_are_nearer_generic_than_target(small_base, world, target):
    model, generic = small_base
    pos = make_dataset(world.style(target), 137, seed=11, world=world)
    neg = curate_negatives(model, pos.captions, seed=13)
    ref = generic.x[np.random.default_rng(0).choice(len(generic), 137, replace=False)]
    fe = FeatureExtractor()
    fneg, fpos, fgen = (extract_features(x, fe) for x in (neg.x, pos.x, ref))
    assert cmmd(fneg, fpos) > cmmd(fneg, fgen)
