import numpy as np
import pytest

from mvmatch.features import ArrayFeatureProvider, OracleFeatureProvider
from mvmatch.grids import FeatureGrid, identity_warp
from mvmatch.grouping import ImageGroup
from mvmatch.matcher import (AnchorGrid, RefinerState,
                             global_match, init_matcher_params, mvfuse,
                             refine_level, run_group)
from mvmatch.oracle import gt_warp, make_planar_scene, simulate_matcher
from mvmatch.tracks import sample_tracks

from oracles import oracle_mvfuse, random_fuse_params as fuse_params


class TestGlobalMatch:
    def test_orthogonal_self_match_is_identity(self):
        d = 16
        scale = 4.0
        feats = scale * np.eye(d).reshape(4, 4, d)
        grid = FeatureGrid(feats)
        anchors = AnchorGrid.uniform(4, 4, (4, 4))
        tau = 0.002
        warp = global_match(grid, grid, anchors, temperature=tau)
        # analytic softmax peak for the constructed logit gap
        gap = scale ** 2 / (np.sqrt(d) * tau)
        peak = 1.0 / (1.0 + (16 - 1) * np.exp(-gap))
        np.testing.assert_allclose(warp.confidence, peak, atol=1e-9)
        np.testing.assert_allclose(warp.targets, identity_warp(4, 4).targets,
                                   atol=1e-6)

    def test_rolled_features_give_uniform_shift(self):
        rng = np.random.default_rng(0)
        d = 32
        src = rng.normal(size=(6, 8, d))
        src /= np.linalg.norm(src, axis=-1, keepdims=True)
        k = 3
        tgt = np.roll(src, k, axis=1)
        anchors = AnchorGrid.uniform(6, 8, (6, 8))
        warp = global_match(FeatureGrid(src), FeatureGrid(tgt), anchors,
                            temperature=0.002)
        expected_x = (np.arange(8) + k) % 8
        got = warp.targets[:, :, 0]
        # non-wrapped band: shift by exactly k token pitches
        assert np.all(np.abs(got[:, :8 - k] - expected_x[None, :8 - k]) <= 0.5)

    def test_uniform_features_give_anchor_centroid(self):
        grid = FeatureGrid(np.ones((3, 5, 4)))
        anchors = AnchorGrid.uniform(3, 5, (3, 5))
        warp = global_match(grid, grid, anchors, temperature=0.01)
        centroid = anchors.centers.mean(axis=0)
        np.testing.assert_allclose(warp.targets.reshape(-1, 2),
                                   np.tile(centroid, (15, 1)), atol=1e-9)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            global_match(FeatureGrid(np.zeros((2, 2, 3))),
                         FeatureGrid(np.zeros((2, 2, 4))),
                         AnchorGrid.uniform(2, 2, (2, 2)))

    def test_anchor_grid_tiles_uniformly(self):
        a = AnchorGrid.uniform(2, 2, (4, 4))
        np.testing.assert_allclose(a.centers,
                                   [[0.5, 0.5], [2.5, 0.5], [0.5, 2.5], [2.5, 2.5]])
        b = AnchorGrid.uniform(3, 3, (3, 3))
        np.testing.assert_allclose(b.centers[:3], [[0, 0], [1, 0], [2, 0]])


class TestMvFuse:
    def test_single_view_is_spatial_mixing_only(self):
        rng = np.random.default_rng(1)
        d = 4
        p = fuse_params(rng, d)
        grid = FeatureGrid(rng.normal(size=(3, 3, d)))
        out = mvfuse([grid], p, iterations=1)[0]
        oracle = oracle_mvfuse([grid], p, 1)
        np.testing.assert_allclose(out.data, oracle[0], atol=1e-9)
        # attention contributes nothing for a lone view: replicate by hand
        t_in = grid.data
        import mvmatch.kernels as kernels
        dw = kernels.depthwise_conv2d(t_in, p.dw, p.dwb)
        t = np.maximum(dw @ p.pw1 + p.pb1, 0.0)
        expected = t_in + t @ p.pw2 + p.pb2
        np.testing.assert_allclose(out.data, expected, atol=1e-9)

    def test_identical_views_attention_is_convex_noop(self):
        rng = np.random.default_rng(2)
        d = 5
        p = fuse_params(rng, d)
        grid = FeatureGrid(rng.normal(size=(2, 4, d)))
        out = mvfuse([grid, grid, grid], p, iterations=1)
        single = mvfuse([grid], p, iterations=1)[0]
        for g in out:
            np.testing.assert_allclose(g.data, single.data, atol=1e-9)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        d = 4
        p = fuse_params(rng, d)
        grids = [FeatureGrid(rng.normal(size=(2, 2, d))) for _ in range(3)]
        out = mvfuse(grids, p, iterations=2)
        oracle = oracle_mvfuse(grids, p, 2)
        for i, g in enumerate(out):
            np.testing.assert_allclose(g.data, oracle[i], atol=1e-6)

    def test_size_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        p = fuse_params(rng, 3)
        with pytest.raises(ValueError):
            mvfuse([FeatureGrid(np.zeros((2, 2, 3))),
                    FeatureGrid(np.zeros((3, 3, 3)))], p, 1)


@pytest.fixture(scope="module")
def planar_setup():
    scene = make_planar_scene(3, (64, 64), seed=31)
    provider = OracleFeatureProvider(scene, dim=32, seed=6)
    params = init_matcher_params(seed=11)
    return scene, provider, params


class TestRefineLevel:
    def test_zero_residual_is_pass_through(self, planar_setup):
        scene, provider, params = planar_setup
        from dataclasses import replace
        zero = replace(params, zero_residual=True)
        gt = gt_warp(scene, 0, 1, stride=2)
        state = RefinerState(2, {1: gt})
        out = refine_level(state, provider, zero)
        from mvmatch.grids import upsample_warp
        expected = upsample_warp(gt, 2)
        np.testing.assert_array_equal(out.warps[1].targets, expected.targets)
        np.testing.assert_array_equal(out.warps[1].confidence, expected.confidence)
        assert out.level == 1

    def test_gt_initialized_residual_is_small(self, planar_setup):
        scene, provider, params = planar_setup
        gt = gt_warp(scene, 0, 1, stride=2)
        state = RefinerState(2, {1: gt})
        out = refine_level(state, provider, params)
        from mvmatch.grids import upsample_warp
        up = upsample_warp(gt, 2)
        mask = gt_warp(scene, 0, 1, stride=1).confidence > 0
        delta = np.linalg.norm(out.warps[1].targets - up.targets, axis=-1)
        assert delta[mask].mean() <= 0.25

    def test_confidence_stays_in_unit_interval(self, planar_setup):
        scene, provider, params = planar_setup
        state = RefinerState(3, {1: gt_warp(scene, 0, 1, stride=4),
                                 2: gt_warp(scene, 0, 2, stride=4)})
        while state.level > 1:
            state = refine_level(state, provider, params)
            for w in state.warps.values():
                assert w.confidence.min() >= 0.0
                assert w.confidence.max() <= 1.0

    def test_finest_state_rejected(self, planar_setup):
        scene, provider, params = planar_setup
        state = RefinerState(1, {1: gt_warp(scene, 0, 1, stride=1)})
        with pytest.raises(ValueError):
            refine_level(state, provider, params)

    def test_hidden_state_shapes(self, planar_setup):
        scene, provider, params = planar_setup
        state = RefinerState(2, {1: gt_warp(scene, 0, 1, stride=2)})
        out = refine_level(state, provider, params)
        hidden = out.hidden[1]
        assert hidden.data.shape == (64, 64, params.hidden_dim)

    def test_provider_stride_mismatch_raises(self, planar_setup):
        scene, _, params = planar_setup
        bad = ArrayFeatureProvider({
            (v, s): FeatureGrid(np.zeros((4, 4, 32)), stride=s)
            for v in (0, 1) for s in (1, 2, 4, 8)})
        state = RefinerState(2, {1: gt_warp(scene, 0, 1, stride=2)})
        with pytest.raises(ValueError):
            refine_level(state, bad, params)


class TestDefaults:
    def test_shipped_defaults(self):
        params = init_matcher_params()
        assert params.strides == (8, 4, 2, 1)
        assert params.mvfuse_levels == (4, 1)
        assert params.mvfuse_iters == 2
        assert params.levels[4].mvfuse is not None
        assert params.levels[1].mvfuse is not None
        assert params.levels[3].mvfuse is None

    def test_config_defaults(self):
        from mvmatch.config import PipelineConfig
        cfg = PipelineConfig()
        assert cfg.track_tokens == 512
        assert cfg.eps_p == 3.0
        assert cfg.tau == 0.3
        assert cfg.nms_radius == 2
        assert cfg.targets_per_group == 4
        assert cfg.base_resolution == 672
        assert cfg.strides == (8, 4, 2, 1)


class TestRunGroup:
    def test_identical_images_near_identity(self):
        scene = make_planar_scene(2, (96, 96), seed=50, translation_frac=0,
                                  rotation_deg=0, scale_jitter=0, perspective=0)
        provider = OracleFeatureProvider(scene, dim=32, seed=7)
        params = init_matcher_params(seed=3)
        group = ImageGroup(0, (1,))
        samples = simulate_matcher(scene, group, 300, 0.0, 0.0, seed=1)
        tracks = sample_tracks(samples, 64, seed=2)
        warps = run_group(group, provider, tracks, params)
        epe = np.linalg.norm(warps[1].targets - identity_warp(96, 96).targets,
                             axis=-1)
        assert epe.mean() <= 0.5

    def test_multi_target_output_contract(self):
        scene = make_planar_scene(4, (64, 64), seed=41)
        provider = OracleFeatureProvider(scene, dim=32, seed=8)
        params = init_matcher_params(seed=5)
        group = ImageGroup(0, (1, 2, 3))
        samples = simulate_matcher(scene, group, 400, 0.5, 0.05, seed=3)
        tracks = sample_tracks(samples, 48, seed=1)
        warps = run_group(group, provider, tracks, params)
        assert sorted(warps) == [1, 2, 3]
        for t, w in warps.items():
            assert (w.source_view, w.target_view) == (0, t)
            assert w.targets.shape == (64, 64, 2)
            assert 0.0 <= w.confidence.min() and w.confidence.max() <= 1.0

    def test_deterministic(self):
        scene = make_planar_scene(3, (64, 64), seed=42)
        provider = OracleFeatureProvider(scene, dim=32, seed=8)
        params = init_matcher_params(seed=5)
        group = ImageGroup(0, (1, 2))
        samples = simulate_matcher(scene, group, 200, 0.5, 0.0, seed=3)
        tracks = sample_tracks(samples, 32, seed=1)
        a = run_group(group, provider, tracks, params)
        b = run_group(group, provider, tracks, params)
        for t in (1, 2):
            np.testing.assert_array_equal(a[t].targets, b[t].targets)
            np.testing.assert_array_equal(a[t].confidence, b[t].confidence)

    def test_alignment_modes_run(self):
        scene = make_planar_scene(3, (64, 64), seed=43)
        provider = OracleFeatureProvider(scene, dim=32, seed=8)
        group = ImageGroup(0, (1, 2))
        for mode in ("invert", "reverse"):
            params = init_matcher_params(seed=5, mvfuse_alignment=mode)
            warps = run_group(group, provider, [], params)
            for w in warps.values():
                assert np.all(np.isfinite(w.targets))

    def test_upsample_factor(self):
        scene = make_planar_scene(2, (32, 32), seed=44)
        provider = OracleFeatureProvider(scene, dim=32, seed=8)
        params = init_matcher_params(seed=5)
        warps = run_group(ImageGroup(0, (1,)), provider, [], params,
                          upsample_factor=2)
        assert warps[1].targets.shape == (64, 64, 2)

    def test_empty_group_rejected(self):
        scene = make_planar_scene(2, (32, 32), seed=45)
        provider = OracleFeatureProvider(scene, dim=32, seed=8)
        with pytest.raises(ValueError):
            run_group(ImageGroup(0, ()), provider, [], init_matcher_params())


class TestMonotonicity:
    def test_epe_non_increasing_at_anchors(self):
        # smaller-scale version of the acceptance criterion
        scene = make_planar_scene(3, (96, 96), seed=12)
        provider = OracleFeatureProvider(scene, dim=32, seed=5)
        params = init_matcher_params(seed=3)
        group = ImageGroup(0, (1, 2))
        grids = [provider.features(v, 8) for v in group.views]
        warps = {}
        for slot, tgt in enumerate(group.targets, start=1):
            anchors = AnchorGrid.uniform(grids[slot].height, grids[slot].width,
                                         (grids[slot].height, grids[slot].width))
            warps[tgt] = global_match(grids[0], grids[slot], anchors,
                                      params.global_temperature, 0, tgt)
        state = RefinerState(params.num_levels + 1, warps)
        states = []
        while state.level > 1:
            state = refine_level(state, provider, params)
            states.append(state)
        for tgt in group.targets:
            errs, mask = [], None
            for st in states:
                s = params.level_stride(st.level)
                gt = gt_warp(scene, 0, tgt, stride=s)
                step = 8 // s
                e = np.linalg.norm((st.warps[tgt].targets[::step, ::step]
                                    - gt.targets[::step, ::step]) * s, axis=-1)
                m = gt.confidence[::step, ::step] > 0
                errs.append(e)
                mask = m if mask is None else (mask & m)
            seq = np.stack(errs)
            frac = np.all(seq[1:] <= seq[:-1] + 1e-9, axis=0)[mask].mean()
            assert frac >= 0.9

    def test_pairwise_degradation_equality_with_zero_gain(self):
        # Table 5.B analog: disabling MVFuse never improves mean EPE; with the
        # zero-initialized conv head the fused hidden does not feed the warp,
        # so disabling fusion changes nothing (equality holds trials-wide)
        for seed in range(3):
            scene = make_planar_scene(3, (64, 64), seed=60 + seed)
            provider = OracleFeatureProvider(scene, dim=32, seed=5)
            group = ImageGroup(0, (1, 2))
            on = init_matcher_params(seed=3)
            off = init_matcher_params(seed=3, mvfuse_levels=())
            w_on = run_group(group, provider, [], on)
            w_off = run_group(group, provider, [], off)
            for tgt in (1, 2):
                gt = gt_warp(scene, 0, tgt)
                m = gt.confidence > 0
                e_on = np.linalg.norm(w_on[tgt].targets - gt.targets, axis=-1)[m].mean()
                e_off = np.linalg.norm(w_off[tgt].targets - gt.targets, axis=-1)[m].mean()
                assert e_off >= e_on - 1e-12
