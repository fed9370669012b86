import math

import numpy as np
import pytest

from viewmem.embedding_index import Query
from viewmem.geometry import DepthRange, Mask
from viewmem.scene_memory import Keyframe, Pose
from viewmem.localization import (
    Cluster,
    FusionConfig,
    TargetNotFound,
    ViewPrediction,
    dbscan_labels,
    density_filter,
    fuse_cluster,
    group_instances,
    localize,
    segment_and_backproject,
)

from helpers import flat_depth, simple_intrinsics
from helpers import ScriptedSegProvider, blob, box_world
from oracles import dbscan_bruteforce, density_filter_bruteforce

RANGE = DepthRange(0.1, 20.0)


def plain_frame(frame_id=0, width=32, height=24, z=2.0):
    return Keyframe(
        id=frame_id,
        rgb_ref=None,
        depth=flat_depth(width, height, z),
        pose=Pose.identity(),
        intrinsics=simple_intrinsics(width, height),
    )


class TestSegmentAndBackproject:
    def test_full_mask_on_plane(self):
        frame = plain_frame(z=2.0)
        provider = ScriptedSegProvider()
        provider.add(0, "mug", np.ones((24, 32), dtype=bool))
        pred = segment_and_backproject(frame, "mug", provider, RANGE, 4.0)
        assert pred is not None
        assert len(pred.cloud) == 24 * 32
        assert pred.cloud[:, 2] == pytest.approx(np.full(24 * 32, 2.0))

    def test_far_view_discarded(self):
        frame = plain_frame(z=4.5)
        provider = ScriptedSegProvider()
        provider.add(0, "mug", np.ones((24, 32), dtype=bool))
        assert segment_and_backproject(frame, "mug", provider, RANGE, 4.0) is None

    def test_highest_confidence_mask_chosen(self):
        frame = plain_frame(z=2.0)
        low = np.zeros((24, 32), dtype=bool)
        low[:4, :4] = True
        high = np.zeros((24, 32), dtype=bool)
        high[10:20, 10:20] = True
        provider = ScriptedSegProvider()
        provider.add(0, "mug", low, confidence=0.4)
        provider.add(0, "mug", high, confidence=0.9)
        pred = segment_and_backproject(frame, "mug", provider, RANGE, 4.0)
        assert len(pred.cloud) == 100

    def test_no_masks_discarded(self):
        pred = segment_and_backproject(plain_frame(), "mug", ScriptedSegProvider(), RANGE, 4.0)
        assert pred is None

    def test_provider_failure_discards_view(self):
        provider = ScriptedSegProvider(fail_ids={"0"})
        assert segment_and_backproject(plain_frame(), "mug", provider, RANGE, 4.0) is None


def pred_of(frame_id, cloud):
    return ViewPrediction(frame_id=frame_id, mask=Mask(np.ones((2, 2), bool)), cloud=cloud)


class TestGroupInstances:
    def test_identical_clouds_one_cluster(self):
        cloud = blob([0, 0, 0])
        out = group_instances([pred_of(0, cloud), pred_of(1, cloud.copy())], FusionConfig())
        assert len(out) == 1
        assert [p.frame_id for p in out[0].members] == [0, 1]

    def test_far_clouds_two_clusters(self):
        a = blob([0, 0, 0], seed=1)
        b = blob([0.8, 0, 0], seed=2)  # 0.6+ m gap, zero overlap
        out = group_instances([pred_of(0, a), pred_of(1, b)], FusionConfig())
        assert len(out) == 2

    def test_greedy_first_cluster_wins(self):
        # A and B near (dist < 0.5), C overlaps A, B far from C
        a = blob([0, 0, 0], seed=3)
        b = blob([0.3, 0, 0], seed=4)
        c = np.vstack([a[:10], blob([0.05, 0, 0], n=15, seed=5)])
        out = group_instances([pred_of(0, a), pred_of(1, b), pred_of(2, c)], FusionConfig())
        assert len(out) == 1
        assert [p.frame_id for p in out[0].members] == [0, 1, 2]

    def test_partition_property(self):
        rng = np.random.default_rng(6)
        preds = [pred_of(i, blob(rng.uniform(0, 5, 3), seed=10 + i)) for i in range(12)]
        clusters = group_instances(preds, FusionConfig())
        seen = [p.frame_id for cl in clusters for p in cl.members]
        assert sorted(seen) == list(range(12))

    def test_empty_input(self):
        assert group_instances([], FusionConfig()) == []


class TestDensityFilter:
    @staticmethod
    def blob_and_outliers():
        grid = np.stack(
            np.meshgrid(np.arange(5) * 0.05, np.arange(5) * 0.05, np.arange(4) * 0.05),
            -1,
        ).reshape(-1, 3)
        blob95 = grid[:95]
        outliers = np.array([[5.0 + i, 5.0, 5.0 + i] for i in range(5)])
        return np.vstack([blob95, outliers]), blob95

    def test_blob_with_outliers(self):
        cloud, blob95 = self.blob_and_outliers()
        out = density_filter(cloud, FusionConfig())
        assert np.array_equal(np.sort(out, axis=0), np.sort(blob95, axis=0))

    def test_all_noise_preserved(self):
        rng = np.random.default_rng(7)
        cloud = rng.uniform(0, 100, (100, 3))
        assert np.array_equal(density_filter(cloud, FusionConfig()), cloud)

    def test_single_blob_identity(self):
        _, blob95 = self.blob_and_outliers()
        assert np.array_equal(density_filter(blob95, FusionConfig()), blob95)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(8)
        for trial in range(6):
            parts = [
                blob(rng.uniform(0, 2, 3), n=int(rng.integers(20, 120)), spread=0.04,
                     seed=int(rng.integers(1000)))
                for _ in range(3)
            ]
            cloud = np.vstack(parts + [rng.uniform(0, 3, (10, 3))])
            cfg = FusionConfig()
            got = density_filter(cloud, cfg)
            want = density_filter_bruteforce(cloud, cfg.voxel_size, cfg.dbscan_eps,
                                             cfg.dbscan_min_pts, cfg.largest_cluster_floor)
            assert np.array_equal(got, want)

    def test_dbscan_matches_bruteforce(self):
        rng = np.random.default_rng(9)
        pts = np.vstack([blob([0, 0, 0], 50, seed=11), blob([1, 1, 1], 30, seed=12),
                         rng.uniform(-3, 3, (15, 3))])
        got = dbscan_labels(pts, 0.1, 10)
        want = dbscan_bruteforce(pts, 0.1, 10)
        assert np.array_equal(got, want)

    def test_output_never_larger(self):
        cloud, _ = self.blob_and_outliers()
        assert len(density_filter(cloud, FusionConfig())) <= len(cloud)


class TestFuseCluster:
    def test_single_view_cluster(self):
        scene, memory, provider, obj = box_world(1)
        pred = segment_and_backproject(memory.frame(0), "box", provider, RANGE, 4.0)
        cfg = FusionConfig(min_confirming_views=1)
        cand = fuse_cluster(Cluster([pred], pred.cloud.copy()), memory, provider, cfg, "box")
        assert len(cand.fused_cloud) <= len(pred.cloud)
        assert cand.center == pytest.approx(
            (cand.fused_cloud.min(0) + cand.fused_cloud.max(0)) / 2
        )

    def test_multi_view_center_beats_single_views(self):
        scene, memory, provider, obj = box_world(3)
        preds = [
            segment_and_backproject(memory.frame(i), "box", provider, RANGE, 4.0)
            for i in range(3)
        ]
        assert all(p is not None for p in preds)
        cluster = Cluster(list(preds), np.vstack([p.cloud for p in preds]))
        cand = fuse_cluster(cluster, memory, provider, FusionConfig(), "box")
        true_center = obj.center
        fused_err = np.linalg.norm(cand.center - true_center)
        assert fused_err < 0.05
        for p in preds:
            single = (p.cloud.min(0) + p.cloud.max(0)) / 2
            assert fused_err < np.linalg.norm(single - true_center)
        assert len(cand.member_predictions) == 3

    def test_nearby_view_cap_limits_provider_calls(self):
        scene, memory, provider, obj = box_world(9)
        seed_pred = segment_and_backproject(memory.frame(0), "box", provider, RANGE, 4.0)
        provider.calls = 0
        cfg = FusionConfig(max_nearby_views=5, min_confirming_views=2)
        fuse_cluster(Cluster([seed_pred], seed_pred.cloud.copy()), memory, provider, cfg, "box")
        # 8 other cameras are eligible; the cap allows exactly 5 segmentations
        assert provider.calls == 5

    def test_expansion_confirms_nearby_views(self):
        scene, memory, provider, obj = box_world(4)
        seed_pred = segment_and_backproject(memory.frame(0), "box", provider, RANGE, 4.0)
        cfg = FusionConfig(max_nearby_views=5, min_confirming_views=2)
        cand = fuse_cluster(
            Cluster([seed_pred], seed_pred.cloud.copy()), memory, provider, cfg, "box"
        )
        assert len(cand.member_predictions) >= 2
        assert len(cand.fused_cloud) > 0


class TestLocalizeEndToEnd:
    def test_single_object_center_within_tau(self, localization_fixture):
        from viewmem.providers import MockSegmentationProvider

        fx = localization_fixture
        provider = MockSegmentationProvider(fx.mask_dir)
        q = fx.queries[0]
        query = Query(kind="text", payload=q.text, embedding=q.embedding)
        cands = localize(query, fx.memory, fx.index, provider, FusionConfig(), k=10,
                         mode="benchmark")
        assert cands
        best = min(
            math.hypot(c.center[0] - g[0], c.center[2] - g[2])
            for c in cands[:5]
            for g in q.goals
        )
        assert best < 1.5

    def test_two_identical_objects_nearest_first(self, tmp_root):
        from viewmem.providers import MockSegmentationProvider
        from viewmem.synthetic import write_localization_fixture

        fx = write_localization_fixture(11, tmp_root / "dup11", n_objects=2,
                                        duplicate_label=True)
        provider = MockSegmentationProvider(fx.mask_dir)
        q = fx.queries[0]
        assert len(q.goals) == 2
        agent = np.array([1.0, 0.8, 1.0])
        query = Query(kind="text", payload=q.text, embedding=q.embedding)
        cands = localize(query, fx.memory, fx.index, provider, FusionConfig(), k=10,
                         mode="nav", agent_pos=agent)
        assert len(cands) == 2
        dists = [c.distance_to_agent for c in cands]
        assert dists == sorted(dists)

    def test_modes_differ_only_by_grouping(self, localization_fixture):
        from viewmem.providers import MockSegmentationProvider

        fx = localization_fixture
        provider = MockSegmentationProvider(fx.mask_dir)
        q = fx.queries[0]
        query = Query(kind="text", payload=q.text, embedding=q.embedding)
        bench = localize(query, fx.memory, fx.index, provider, FusionConfig(), k=10,
                         mode="benchmark")
        nav = localize(query, fx.memory, fx.index, provider, FusionConfig(), k=10,
                       mode="nav", agent_pos=[0.0, 0.0, 0.0])
        bench_frames = {f for c in bench for f in c.member_frames}
        nav_frames = {f for c in nav for f in c.member_frames}
        assert bench_frames == nav_frames  # same surviving views, different grouping
        assert len(nav) <= len(bench)

    def test_unknown_target_raises(self, localization_fixture):
        from viewmem.providers import MockSegmentationProvider

        fx = localization_fixture
        provider = MockSegmentationProvider(fx.mask_dir)
        n = len(fx.embeddings)
        bogus = np.zeros(fx.embeddings.shape[1])
        bogus[0] = 1.0  # background direction: retrieves frames without masks
        query = Query(kind="text", payload="unicorn", embedding=bogus)
        with pytest.raises(TargetNotFound):
            localize(query, fx.memory, fx.index, provider, FusionConfig(), k=10,
                     mode="benchmark")

    def test_image_query_uses_label_prompt(self, localization_fixture):
        from viewmem.providers import MockSegmentationProvider

        fx = localization_fixture
        provider = MockSegmentationProvider(fx.mask_dir)
        q = fx.queries[0]
        query = Query(kind="image", payload="ref.png", embedding=q.embedding, label=q.text)
        cands = localize(query, fx.memory, fx.index, provider, FusionConfig(), k=10,
                         mode="benchmark")
        assert cands

    def test_nav_mode_requires_agent(self, localization_fixture):
        fx = localization_fixture
        q = fx.queries[0]
        query = Query(kind="text", payload=q.text, embedding=q.embedding)
        with pytest.raises(ValueError, match="agent"):
            localize(query, fx.memory, fx.index, None, FusionConfig(), k=10, mode="nav")


class TestInvariants:
    def test_candidate_center_inside_bbox(self, localization_fixture):
        from viewmem.providers import MockSegmentationProvider

        fx = localization_fixture
        provider = MockSegmentationProvider(fx.mask_dir)
        for q in fx.queries:
            query = Query(kind="text", payload=q.text, embedding=q.embedding)
            for cand in localize(query, fx.memory, fx.index, provider, FusionConfig(),
                                 k=10, mode="benchmark"):
                lo = cand.fused_cloud.min(axis=0)
                hi = cand.fused_cloud.max(axis=0)
                assert (cand.center >= lo - 1e-12).all()
                assert (cand.center <= hi + 1e-12).all()
