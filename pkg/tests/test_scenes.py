import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdadapt.scenes import (
    DensityConfig,
    SceneParams,
    density_from_heads,
    gen_benchmark,
    gen_scene,
    read_dataset,
    read_pgm,
    render_image,
    sample_scene_params,
    split_scenes,
    write_pgm,
    write_scene,
)


def params(**kw):
    base = dict(scene_id="s", bg_seed=11, brightness=0.0, contrast=1.0, base_radius=3.0,
                perspective_slope=1.0, count_range=(5, 12), blob_intensity=0.6)
    base.update(kw)
    return SceneParams(**base)


def gaussian_oracle(heads, map_shape, downsample=8, sigma=1.0, trunc=4.0):
    """Brute force over every map pixel, independent of the windowed implementation."""
    h, w = map_shape
    ii, jj = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    out = np.zeros((h, w))
    for x, y in heads:
        d2 = (jj - x / downsample) ** 2 + (ii - y / downsample) ** 2
        k = np.where(d2 <= (trunc * sigma) ** 2, np.exp(-d2 / (2 * sigma**2)), 0.0)
        out += k / k.sum()
    return out


class TestSceneParams:
    @pytest.mark.parametrize("kw", [dict(brightness=0.3), dict(contrast=0.7), dict(base_radius=6.0),
                                    dict(perspective_slope=-1.0), dict(count_range=(2, 5)),
                                    dict(count_range=(10, 41)), dict(count_range=(9, 8)),
                                    dict(blob_intensity=0.95)])
    def test_out_of_range_rejected(self, kw):
        with pytest.raises(ValueError):
            params(**kw)

    def test_sampled_params_in_range(self):
        for i in range(200):
            p = sample_scene_params(f"scene_{i}", 3)
            assert 3 <= p.count_range[0] <= p.count_range[1] <= 40

    def test_dict_roundtrip(self):
        p = sample_scene_params("x", 1)
        assert SceneParams.from_dict(json.loads(json.dumps(p.to_dict()))) == p


class TestDensity:
    def test_zero_heads(self):
        m = density_from_heads([], (8, 12))
        assert m.shape == (1, 8, 12)
        assert m.sum() == 0.0

    def test_single_centred_head(self):
        m = density_from_heads([(48.0, 32.0)], (8, 12))
        assert abs(m.sum() - 1.0) <= 1e-6

    def test_seven_heads(self):
        rng = np.random.default_rng(0)
        heads = np.stack([rng.uniform(0, 96, 7), rng.uniform(0, 64, 7)], axis=1)
        assert abs(density_from_heads(heads, (8, 12)).sum() - 7.0) <= 1e-4

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        heads = np.stack([rng.uniform(0, 96, 9), rng.uniform(0, 64, 9)], axis=1)
        np.testing.assert_allclose(density_from_heads(heads, (8, 12))[0], gaussian_oracle(heads, (8, 12)),
                                   atol=1e-12)

    def test_corner_head_keeps_unit_mass(self):
        assert abs(density_from_heads([(0.0, 0.0)], (8, 12)).sum() - 1.0) <= 1e-12

    def test_unnormalised_kernel_loses_mass_at_border(self):
        m = density_from_heads([(0.0, 0.0)], (8, 12), cfg=DensityConfig(renormalize=False))
        assert m.sum() < 0.5

    def test_head_outside_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            density_from_heads([(96.0, 10.0)], (8, 12))

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            DensityConfig(sigma_dm=0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 95.999), st.floats(0, 63.999)), max_size=40),
           st.floats(0.3, 3.0))
    def test_count_exact_property(self, heads, sigma):
        m = density_from_heads(heads, (8, 12), cfg=DensityConfig(sigma_dm=sigma))
        assert abs(m.sum() - len(heads)) <= 1e-9 * max(1, len(heads))
        assert np.all(m >= 0)


class TestGenScene:
    def test_deterministic(self):
        a = gen_scene(params(), 4, (32, 48), seed=3)
        b = gen_scene(params(), 4, (32, 48), seed=3)
        for x, y in zip(a.images + a.heads + a.density_maps, b.images + b.heads + b.density_maps):
            assert x.tobytes() == y.tobytes()

    def test_degenerate_count_range(self):
        ds = gen_scene(params(count_range=(5, 5)), 6, (32, 48), seed=0)
        assert ds.counts() == [5] * 6

    def test_brightness_shift(self):
        # no people so the clamp never bites and the shift is purely additive
        lo = render_image(params(brightness=-0.1), np.zeros((0, 2)), (64, 96))
        hi = render_image(params(brightness=0.1), np.zeros((0, 2)), (64, 96))
        assert abs((hi.mean() - lo.mean()) - 0.2) <= 0.02
        a = gen_scene(params(brightness=-0.1), 5, (64, 96), 2)
        b = gen_scene(params(brightness=0.1), 5, (64, 96), 2)
        diff = np.mean([y.mean() - x.mean() for x, y in zip(a.images, b.images)])
        assert abs(diff - 0.2) <= 0.02

    def test_pixels_in_unit_range_and_quantised(self):
        ds = gen_scene(params(brightness=0.2, contrast=1.2), 3, (32, 48), 0)
        for im in ds.images:
            assert im.shape == (1, 32, 48)
            assert im.min() >= 0 and im.max() <= 1
            np.testing.assert_array_equal(np.round(im * 255) / 255, im)

    def test_heads_in_bounds(self):
        for s in gen_benchmark(5, 10, (64, 96), 4):
            for h in s.heads:
                assert np.all((h[:, 0] >= 0) & (h[:, 0] < 96) & (h[:, 1] >= 0) & (h[:, 1] < 64))

    def test_people_darken(self):
        p = params(count_range=(20, 20))
        empty = render_image(p, np.zeros((0, 2)), (64, 96))
        full = gen_scene(p, 2, (64, 96), 0).images[0]
        assert full.mean() < empty.mean()

    def test_preconditions(self):
        with pytest.raises(ValueError):
            gen_scene(params(), 1, (32, 48), 0)
        with pytest.raises(ValueError):
            gen_scene(params(), 3, (63, 96), 0)

    def test_count_exactness_many_images(self):
        scenes = gen_benchmark(10, 20, (64, 96), 5)
        for s in scenes:
            for dm, n in zip(s.density_maps, s.counts()):
                assert abs(dm.sum() - n) <= 1e-4


def test_scene_separability():
    """Between-scene variance of mean intensity exceeds within-scene variance."""
    scenes = gen_benchmark(12, 10, (64, 96), 0)
    means = np.array([[im.mean() for im in s.images] for s in scenes])
    within = means.var(axis=1).mean()
    between = means.mean(axis=1).var()
    assert between > within


class TestSplit:
    def test_partition(self):
        scenes = gen_benchmark(20, 2, (16, 16), 0)
        tr, te = split_scenes(scenes, 15, seed=1)
        assert len(tr) == 15 and len(te) == 5
        ids_tr, ids_te = {s.scene_id for s in tr}, {s.scene_id for s in te}
        assert not ids_tr & ids_te
        assert ids_tr | ids_te == {s.scene_id for s in scenes}

    def test_deterministic(self):
        scenes = gen_benchmark(20, 2, (16, 16), 0)
        a = [s.scene_id for s in split_scenes(scenes, 15, 1)[0]]
        b = [s.scene_id for s in split_scenes(scenes, 15, 1)[0]]
        assert a == b

    def test_too_many_train(self):
        scenes = gen_benchmark(3, 2, (16, 16), 0)
        with pytest.raises(ValueError):
            split_scenes(scenes, 3, 0)


class TestDisk:
    def test_pgm_roundtrip(self, tmp_path):
        img = np.round(np.random.default_rng(0).uniform(0, 1, (1, 16, 24)) * 255) / 255
        write_pgm(tmp_path / "a.pgm", img)
        assert (tmp_path / "a.pgm").read_bytes()[:13] == b"P5\n24 16\n255\n"
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)

    def test_pgm_comment_header(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 1\n255\n" + bytes([0, 255]))
        np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[[0.0, 1.0]]])

    def test_not_pgm(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(ValueError):
            read_pgm(tmp_path / "x.pgm")

    def test_scene_roundtrip(self, tmp_path):
        scenes = gen_benchmark(3, 4, (32, 48), 9)
        for s in scenes:
            write_scene(tmp_path, s)
        (tmp_path / "manifest.json").write_text(json.dumps({"scenes": [s.scene_id for s in scenes]}))
        back = read_dataset(tmp_path)
        for a, b in zip(scenes, back):
            assert a.params == b.params
            for x, y in zip(a.images, b.images):
                np.testing.assert_array_equal(x, y)
            for x, y in zip(a.heads, b.heads):
                np.testing.assert_array_equal(x, y)
            for x, y in zip(a.density_maps, b.density_maps):
                np.testing.assert_array_equal(x, y)
