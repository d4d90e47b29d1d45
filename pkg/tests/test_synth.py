import numpy as np
import pytest
from scipy import ndimage as ndi

from hoverpipe import synth
from hoverpipe.errors import PlacementFailed
from hoverpipe.losses import total_loss
from hoverpipe.synth import CorruptionParams, SceneParams, SplitMix64, corrupt, generate_scene, perfect_bundle


class TestSplitMix64:
    def test_reference_values(self):
        # published first outputs of SplitMix64 seeded with 0
        g = SplitMix64(0)
        assert [g.next_u64() for _ in range(3)] == [
            0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]

    def test_vector_matches_scalar(self):
        a, b = SplitMix64(12345), SplitMix64(12345)
        vec = a.u64_array(50)
        assert [int(v) for v in vec] == [b.next_u64() for _ in range(50)]
        assert a.next_u64() == b.next_u64()

    def test_ranges(self):
        g = SplitMix64(7)
        draws = [g.randint(3, 5) for _ in range(300)]
        assert set(draws) == {3, 4, 5}
        u = g.uniform((1000,))
        assert u.min() >= 0 and u.max() < 1
        n = g.normal((20000,))
        assert abs(n.mean()) < 0.05 and abs(n.std() - 1) < 0.05


class TestScene:
    def test_deterministic(self):
        a = generate_scene(SceneParams(seed=5))
        b = generate_scene(SceneParams(seed=5))
        np.testing.assert_array_equal(a.instances, b.instances)
        np.testing.assert_array_equal(a.layer_map, b.layer_map)
        assert a.nucleus_classes == b.nucleus_classes

    def test_empty(self):
        s = generate_scene(SceneParams(nucleus_count=0, extent=64))
        assert not s.instances.any()
        assert set(np.unique(s.layer_map)) == {0, 1, 2, 3, 4}

    def test_count_and_connectivity(self):
        s = generate_scene(SceneParams(seed=2, nucleus_count=20))
        assert s.instances.max() == 20
        for label in range(1, 21):
            _, n = ndi.label(s.instances == label)
            assert n == 1

    @pytest.mark.parametrize("gap", [1, 2, 3])
    def test_pairwise_gap_exhaustive(self, gap):
        s = generate_scene(SceneParams(seed=gap, nucleus_count=20, min_gap=gap))
        pts = {lab: np.argwhere(s.instances == lab) for lab in range(1, 21)}
        for i in range(1, 21):
            for j in range(i + 1, 21):
                d = pts[i][:, None, :] - pts[j][None, :, :]
                assert np.sqrt((d ** 2).sum(-1)).min() >= gap

    def test_classes_follow_bands(self):
        s = generate_scene(SceneParams(seed=9, nucleus_count=25))
        for label, cls in s.nucleus_classes.items():
            assert cls in ("other", "epithelial")

    def test_band_fractions(self):
        lay = synth.band_map(100, (0.1, 0.3, 0.15, 0.3, 0.15))
        counts = np.bincount(lay[:, 0], minlength=5)
        assert counts.tolist() == [10, 30, 15, 30, 15]
        # keratin sits directly below the background
        assert lay[10, 0] == 4 and lay[99, 0] == 1

    def test_placement_failure(self):
        with pytest.raises(PlacementFailed):
            generate_scene(SceneParams(extent=32, nucleus_count=200))

    def test_param_validation(self):
        with pytest.raises(ValueError):
            SceneParams(layer_band_fractions=(0.5, 0.5, 0.5, 0.0, 0.0))
        with pytest.raises(ValueError):
            CorruptionParams(gaussian_sigma=-1)


class TestBundles:
    def test_perfect_bundle(self):
        s = generate_scene(SceneParams(seed=4, extent=96, nucleus_count=8))
        b = perfect_bundle(s)
        assert b.np[1].sum() == (s.instances > 0).sum()
        assert total_loss(b, synth.target_bundle(s)).total <= 1e-5

    def test_zero_corruption_identity(self):
        b = perfect_bundle(generate_scene(SceneParams(seed=1, extent=64, nucleus_count=5)))
        c = corrupt(b, CorruptionParams(), 3)
        for name in ("np", "hover", "nc", "ls"):
            assert getattr(c, name).tobytes() == getattr(b, name).tobytes()

    @pytest.mark.parametrize("sigma,jitter", [(0.05, 0), (0.3, 0), (0.1, 2)])
    def test_corruption_renormalised(self, sigma, jitter):
        b = perfect_bundle(generate_scene(SceneParams(seed=1, extent=64, nucleus_count=5)))
        c = corrupt(b, CorruptionParams(sigma, sigma, jitter), 3)
        for name in ("np", "nc", "ls"):
            arr = getattr(c, name)
            assert np.abs(arr.sum(axis=0) - 1).max() <= 1e-5
            assert arr.min() > 0
        c.check_softmax()
        assert not np.array_equal(c.hover, b.hover)

    def test_corruption_seeded(self):
        b = perfect_bundle(generate_scene(SceneParams(seed=1, extent=64, nucleus_count=5)))
        p = CorruptionParams(0.1, 0.1, 1)
        assert corrupt(b, p, 8).ls.tobytes() == corrupt(b, p, 8).ls.tobytes()
        assert corrupt(b, p, 8).ls.tobytes() != corrupt(b, p, 9).ls.tobytes()


def test_heavy_corruption_lowers_pq():
    from hoverpipe import metrics
    from hoverpipe.postproc import run_full_postprocess

    def pq(params, seed):
        sc = generate_scene(SceneParams(seed=seed, nucleus_count=20))
        res = run_full_postprocess(corrupt(perfect_bundle(sc), params, seed))
        return metrics.panoptic_quality(metrics.match_instances(sc.instances, res.instances))[2]

    clean = [pq(CorruptionParams(), s) for s in range(3)]
    noisy = [pq(CorruptionParams.uniform(0.3), s) for s in range(3)]
    jittered = [pq(CorruptionParams(0.1, 0.1, 2), s) for s in range(3)]
    assert np.median(clean) == 1.0
    assert np.median(noisy) < 1.0
    assert np.median(jittered) < np.median(noisy)
