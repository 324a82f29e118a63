import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcl.evidence import (EvidenceConfig, MaskSpec, apply_mask, block_edges,
                          cells_to_pixel_mask, class_evidence_map,
                          common_evidence_embedding, common_evidence_map,
                          delta_loss, delta_losses, estimate_evidence,
                          masked_cell_count, rescale_by_max,
                          restricted_log_posteriors, sample_masks,
                          spatial_softmax, unique_evidence_embedding,
                          unique_weight_map, weighted_image)
from fcl.numerics import RngStream, l2_normalize


def make_mask(grid, cells, h, w):
    cells = np.asarray(cells, dtype=int)
    return MaskSpec(grid_size=grid, cells=cells,
                    pixel_mask=cells_to_pixel_mask(grid, cells, h, w))


class TestMaskSampling:
    def test_single_cell_single_pixel(self):
        # 2x2 image on a 2-grid: each cell is exactly one pixel
        mask = make_mask(2, [3], 2, 2)
        assert mask.pixel_mask.sum() == 1
        assert mask.pixel_mask[1, 1]

    def test_masked_cell_count_clamped(self):
        assert masked_cell_count(2, 0.01) == 1
        assert masked_cell_count(2, 0.99) == 3
        assert masked_cell_count(4, 0.5) == 8

    def test_reference_resolution_blocks_exact(self):
        # 224 pixels over a 7-grid: every block exactly 32 wide
        edges = block_edges(224, 7)
        assert np.array_equal(np.diff(edges), np.full(7, 32))

    def test_balanced_partition_of_irregular_sizes(self):
        edges = block_edges(224, 13)
        widths = np.diff(edges)
        assert widths.sum() == 224
        assert widths.min() >= 224 // 13
        assert widths.max() <= 224 // 13 + 1

    def test_same_seed_identical_masks(self):
        cfg = EvidenceConfig(n_masks=20, grid_sizes=(3, 5), gamma=0.4)
        a = sample_masks(cfg, 16, 16, RngStream(4, 0))
        b = sample_masks(cfg, 16, 16, RngStream(4, 0))
        for ma, mb in zip(a, b):
            assert ma.grid_size == mb.grid_size
            assert np.array_equal(ma.cells, mb.cells)
            assert np.array_equal(ma.pixel_mask, mb.pixel_mask)

    def test_mask_counts_and_grid_choices(self):
        cfg = EvidenceConfig(n_masks=200, grid_sizes=(3, 5), gamma=0.5)
        masks = sample_masks(cfg, 20, 20, RngStream(1, 0))
        assert len(masks) == 200
        seen = {m.grid_size for m in masks}
        assert seen == {3, 5}
        for m in masks[:20]:
            assert len(m.cells) == masked_cell_count(m.grid_size, 0.5)
            assert len(set(m.cells.tolist())) == len(m.cells)

    @given(st.integers(4, 60), st.integers(4, 60), st.integers(2, 9))
    @settings(max_examples=100)
    def test_blocks_tile_the_image(self, h, w, g):
        full = np.zeros((h, w), dtype=int)
        for cell in range(g * g):
            full += cells_to_pixel_mask(g, np.array([cell]), h, w)
        assert np.array_equal(full, np.ones((h, w), dtype=int))


@pytest.fixture(scope="module")
def small_backend():
    from fcl.encoders import make_toy_visual_encoder

    visual = make_toy_visual_encoder((6, 6, 3), 12, RngStream(8, 0))
    gen = RngStream(8, 1).generator()
    taus = np.stack([l2_normalize(gen.normal(size=12)) for _ in range(3)])
    return visual, taus


class TestDeltaLoss:
    def test_empty_mask_zero_exactly(self, small_backend, gen):
        visual, taus = small_backend
        x = gen.uniform(0, 1, (6, 6, 3))
        empty = MaskSpec(grid_size=2, cells=np.array([], dtype=int),
                         pixel_mask=np.zeros((6, 6), dtype=bool))
        assert delta_loss(x, empty, 0, visual, taus, 20.0) == 0.0

    def test_single_candidate_always_zero(self, small_backend, gen):
        visual, taus = small_backend
        x = gen.uniform(0, 1, (6, 6, 3))
        mask = make_mask(2, [0, 1], 6, 6)
        assert delta_loss(x, mask, 0, visual, taus[:1], 20.0) == \
            pytest.approx(0.0, abs=1e-12)

    def test_masking_unique_evidence_raises_loss(self, toy_world):
        # planted world: occluding the true class's block must hurt it
        ep = toy_world.compose(1, 3, a_com=0.6, a_uniq=0.9, tilt=0.5)
        taus = toy_world.base_text_embeddings()
        ck = [1, 3]
        region = toy_world.unique_regions[1]
        pm = np.zeros((48, 48), dtype=bool)
        pm[region.rows, region.cols] = True
        mask = MaskSpec(grid_size=3, cells=np.array([4]), pixel_mask=pm)
        # independent oracle: direct forward evaluation of both images
        z_full = toy_world.visual.encode(ep.image)
        z_masked = toy_world.visual.encode(apply_mask(ep.image, mask))
        lp_full = restricted_log_posteriors(z_full, taus[ck], 20.0)[0]
        lp_masked = restricted_log_posteriors(z_masked, taus[ck], 20.0)[0]
        expected = lp_full[0] - lp_masked[0]
        assert expected > 0.5
        got = delta_loss(ep.image, mask, 0, toy_world.visual, taus[ck], 20.0)
        assert got == pytest.approx(expected, abs=1e-10)

    def test_batched_matches_singular(self, small_backend, gen):
        visual, taus = small_backend
        x = gen.uniform(0, 1, (6, 6, 3))
        masks = sample_masks(EvidenceConfig(n_masks=7, grid_sizes=(2, 3),
                                            gamma=0.5), 6, 6, RngStream(2, 0))
        batched = delta_losses(x, masks, visual, taus, 20.0)
        for n, m in enumerate(masks):
            for c in range(3):
                assert batched[n, c] == pytest.approx(
                    delta_loss(x, m, c, visual, taus, 20.0), abs=1e-12)


class TestClassEvidenceMap:
    def test_all_zero_deltas(self):
        masks = [make_mask(2, [0], 4, 4), make_mask(2, [3], 4, 4)]
        assert np.array_equal(class_evidence_map(np.zeros(2), masks, 4, 4),
                              np.zeros((4, 4)))

    def test_hand_aggregation_example(self):
        # 2x2 image: M1 = top row with delta 1.0, M2 = left col with delta 0.5
        m1 = MaskSpec(2, np.array([0, 1]),
                      np.array([[True, True], [False, False]]))
        m2 = MaskSpec(2, np.array([0, 2]),
                      np.array([[True, False], [True, False]]))
        emap = class_evidence_map(np.array([1.0, 0.5]), [m1, m2], 2, 2)
        assert np.allclose(emap, [[0.75, 0.5], [0.25, 0.0]], atol=1e-15)

    def test_single_mask_scales_exactly(self):
        mask = make_mask(2, [1, 2], 4, 4)
        emap = class_evidence_map(np.array([3.5]), [mask], 4, 4)
        assert np.array_equal(emap, 3.5 * mask.pixel_mask)

    def test_matches_double_loop_oracle(self):
        gen = RngStream(31, 0).generator()
        for _ in range(200):
            h, w = int(gen.integers(2, 9)), int(gen.integers(2, 9))
            n_m = int(gen.integers(1, 17))
            masks = sample_masks(
                EvidenceConfig(n_masks=n_m, grid_sizes=(2, 3),
                               gamma=float(gen.uniform(0.2, 0.8))),
                h, w, RngStream(31, int(gen.integers(1 << 30))))
            deltas = gen.normal(0, 1, n_m)
            got = class_evidence_map(deltas, masks, h, w)
            want = np.zeros((h, w))
            for u in range(h):
                for v in range(w):
                    for d, m in zip(deltas, masks):
                        if m.pixel_mask[u, v]:
                            want[u, v] += d
            want /= n_m
            assert np.max(np.abs(got - want)) <= 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            class_evidence_map(np.zeros(2), [make_mask(2, [0], 4, 4)], 4, 4)


class TestSpatialSoftmax:
    def test_constant_map_uniform(self):
        s = spatial_softmax(np.full((3, 5), 2.7))
        assert np.allclose(s, 1.0 / 15, atol=1e-12)

    def test_dominant_pixel_saturates(self):
        e = np.zeros((4, 4))
        e[2, 1] = 1000.0
        s = spatial_softmax(e)
        assert s[2, 1] > 1 - 1e-9

    def test_two_pixel_oracle(self):
        s = spatial_softmax(np.array([[np.log(3.0), 0.0]]))
        assert np.allclose(s, [[0.75, 0.25]], atol=1e-12)

    def test_normalization_property(self, gen):
        for _ in range(1000):
            h, w = int(gen.integers(2, 10)), int(gen.integers(2, 10))
            s = spatial_softmax(gen.normal(0, 3, (h, w)))
            assert abs(s.sum() - 1.0) < 1e-9
            assert s.min() > 0.0


class TestCommonEvidenceMap:
    def test_uniform_times_uniform(self):
        u = np.full((4, 4), 1 / 16)
        assert np.allclose(common_evidence_map(u, u), 1 / 16, atol=1e-12)

    def test_product_and_normalize_oracle(self):
        q = common_evidence_map(np.array([[0.75, 0.25]]),
                                np.array([[0.2, 0.8]]))
        assert np.allclose(q, [[3 / 7, 4 / 7]], atol=1e-12)

    def test_symmetry_exact(self, gen):
        s_i = spatial_softmax(gen.normal(0, 2, (5, 5)))
        s_j = spatial_softmax(gen.normal(0, 2, (5, 5)))
        assert np.array_equal(common_evidence_map(s_i, s_j),
                              common_evidence_map(s_j, s_i))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            common_evidence_map(np.ones((2, 2)) / 4, np.ones((3, 3)) / 9)

    def test_normalization_property(self, gen):
        for _ in range(1000):
            h, w = int(gen.integers(2, 9)), int(gen.integers(2, 9))
            s_i = spatial_softmax(gen.normal(0, 3, (h, w)))
            s_j = spatial_softmax(gen.normal(0, 3, (h, w)))
            q = common_evidence_map(s_i, s_j)
            assert abs(q.sum() - 1.0) < 1e-9
            assert q.min() > 0.0
            assert q.max() <= 1.0


class TestEvidenceEmbeddings:
    def test_uniform_common_map_is_identity_weighting(self, small_backend, gen):
        visual, _ = small_backend
        x = gen.uniform(0.2, 0.8, (6, 6, 3))
        q = np.full((6, 6), 1 / 36)
        assert np.allclose(common_evidence_embedding(visual, x, q),
                           visual.encode(x), atol=1e-12)

    def test_one_hot_map_keeps_one_pixel(self, small_backend, gen):
        visual, _ = small_backend
        x = gen.uniform(0.2, 0.8, (6, 6, 3))
        q = np.full((6, 6), 1e-300)
        q[3, 4] = 1.0 - 35e-300
        sparse = np.zeros((6, 6, 3))
        sparse[3, 4] = x[3, 4]
        assert np.allclose(common_evidence_embedding(visual, x, q),
                           visual.encode(sparse), atol=1e-9)

    def test_common_embedding_tracks_planted_component(self, toy_world):
        ep = toy_world.compose(0, 5, a_com=1.1, a_uniq=0.6, tilt=0.6)
        taus = toy_world.base_text_embeddings()
        ck = [5, 0]
        bundle = estimate_evidence(ep.image, toy_world.visual, taus[ck], 20.0,
                                   EvidenceConfig(n_masks=120,
                                                  grid_sizes=(3, 6),
                                                  gamma=0.4),
                                   RngStream(17, 0))
        z_com = common_evidence_embedding(toy_world.visual, ep.image,
                                          bundle.common_map(0, 1))
        shared = float(z_com @ ep.dir_com)
        assert shared > float(z_com @ toy_world.taus0_targets[0])
        assert shared > float(z_com @ toy_world.taus0_targets[5])

    def test_unique_weight_suppresses_shared_peak(self):
        s = spatial_softmax(np.array([[3.0, 0.0], [0.0, 0.0]]))
        w = unique_weight_map(s, s)
        # fully shared: the weight vanishes exactly at the map's peak
        assert w[0, 0] == pytest.approx(0.0, abs=1e-12)
        assert w[0, 1] > 0.0

    def test_unique_weight_degenerate_fallback(self):
        s = np.full((3, 3), 1e-12)
        s[1, 1] = 1.0
        q = np.full((3, 3), 1 / 9)   # uniform: rescales to one everywhere
        w = unique_weight_map(s, q)
        assert np.allclose(w, rescale_by_max(s), atol=1e-15)

    def test_unique_embedding_tracks_planted_component(self, toy_world):
        ep = toy_world.compose(0, 5, a_com=0.9, a_uniq=0.8, tilt=0.6)
        taus = toy_world.base_text_embeddings()
        ck = [0, 5]
        bundle = estimate_evidence(ep.image, toy_world.visual, taus[ck], 20.0,
                                   EvidenceConfig(n_masks=120,
                                                  grid_sizes=(3, 6),
                                                  gamma=0.4),
                                   RngStream(18, 0))
        z_uniq = unique_evidence_embedding(toy_world.visual, ep.image,
                                           bundle.spatial_maps[0],
                                           bundle.common_map(0, 1))
        own = float(z_uniq @ toy_world.taus0_targets[0])
        assert own > float(z_uniq @ ep.dir_com)

    def test_weighted_image_broadcasts(self, gen):
        x = gen.uniform(0, 1, (4, 4, 3))
        w = gen.uniform(0.1, 1.0, (4, 4))
        out = weighted_image(x, w)
        assert np.allclose(out[:, :, 1], x[:, :, 1] * w, atol=1e-15)

    def test_rescale_by_max_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            rescale_by_max(np.zeros((2, 2)))


class TestEstimateEvidence:
    def test_shapes_and_determinism(self, small_backend, gen):
        visual, taus = small_backend
        x = gen.uniform(0, 1, (6, 6, 3))
        cfg = EvidenceConfig(n_masks=16, grid_sizes=(2, 3), gamma=0.5)
        a = estimate_evidence(x, visual, taus, 20.0, cfg, RngStream(3, 0))
        b = estimate_evidence(x, visual, taus, 20.0, cfg, RngStream(3, 0))
        assert a.delta.shape == (16, 3)
        assert a.evidence_maps.shape == (3, 6, 6)
        assert a.spatial_maps.shape == (3, 6, 6)
        assert np.array_equal(a.delta, b.delta)
        assert np.array_equal(a.evidence_maps, b.evidence_maps)

    def test_config_validation(self):
        for kwargs in (dict(n_masks=0), dict(grid_sizes=(1,)),
                       dict(grid_sizes=()), dict(gamma=0.0), dict(gamma=1.0)):
            with pytest.raises(ValueError):
                EvidenceConfig(**kwargs)
