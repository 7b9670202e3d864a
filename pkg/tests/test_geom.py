import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cascadenl import geom
from cascadenl.exceptions import InvalidArgument
from cascadenl.geom import CentroidSet, PointCloud


def cloud_of(pos):
    pos = np.asarray(pos, float)
    return PointCloud(pos, pos.copy())


def test_point_cloud_validation():
    with pytest.raises(InvalidArgument):
        PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(InvalidArgument):
        PointCloud(np.array([[0, 0, np.nan]]), np.zeros((1, 3)))
    with pytest.raises(InvalidArgument):
        PointCloud(np.zeros((2, 3)), np.zeros((2, 3)), labels=[0, 3], num_classes=3)


class TestCanonicalOrder:
    def test_two_points(self):
        assert list(geom.canonical_order(cloud_of([(1, 0, 0), (0, 0, 0)]))) == [1, 0]

    def test_sorted_is_identity(self):
        pos = [(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0)]
        assert list(geom.canonical_order(cloud_of(pos))) == [0, 1, 2, 3]

    def test_matches_comparison_sort(self, rng):
        pos = rng.integers(0, 3, size=(50, 3)).astype(float)  # plenty of ties
        perm = geom.canonical_order(pos)
        assert list(perm) == oracles.canonical_order(pos.tolist())
        # reapplying to the sorted cloud is the identity
        assert list(geom.canonical_order(pos[perm])) == list(range(50))


class TestFPS:
    def test_endpoint_is_farthest(self):
        cs = geom.farthest_point_sample([(0, 0, 0), (1, 0, 0), (10, 0, 0)], 2)
        assert list(cs.indices) == [0, 2]
        np.testing.assert_array_equal(cs.positions, [[0, 0, 0], [10, 0, 0]])

    def test_m_equals_n(self, rng):
        pos = rng.normal(size=(9, 3))
        cs = geom.farthest_point_sample(pos, 9)
        assert cs.indices[0] == 0
        assert sorted(cs.indices) == list(range(9))

    def test_matches_bruteforce_greedy(self, rng):
        pos = rng.uniform(size=(64, 3))
        pos = pos[geom.canonical_order(pos)]
        cs = geom.farthest_point_sample(pos, 8)
        assert list(cs.indices) == oracles.fps(pos.tolist(), 8)

    def test_bad_m(self):
        with pytest.raises(InvalidArgument):
            geom.farthest_point_sample(np.zeros((3, 3)), 4)
        with pytest.raises(InvalidArgument):
            geom.farthest_point_sample(np.zeros((3, 3)), 0)

    def test_coverage_radius_non_increasing(self, rng):
        pos = rng.uniform(size=(80, 3))
        radii = []
        for m in range(1, 20):
            c = geom.farthest_point_sample(pos, m).positions
            d = ((pos[:, None, :] - c[None]) ** 2).sum(-1).min(1).max()
            radii.append(d)
        assert all(b <= a for a, b in zip(radii, radii[1:]))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 12))
    def test_permutation_invariant_after_canonical_order(self, seed, m):
        r = np.random.default_rng(seed)
        pos = r.uniform(size=(30, 3))
        shuffled = r.permutation(30)
        a = pos[geom.canonical_order(pos)]
        p2 = pos[shuffled]
        b = p2[geom.canonical_order(p2)]
        ia = geom.farthest_point_sample(a, m).indices
        ib = geom.farthest_point_sample(b, m).indices
        # map both back to rows of the original array
        orig_a = geom.canonical_order(pos)[ia]
        orig_b = shuffled[geom.canonical_order(p2)][ib]
        assert orig_a.tobytes() == orig_b.tobytes()


class TestKnn:
    def test_two_closest(self):
        pos = [(1, 0, 0), (0, 3, 0), (0, 0, 2)]
        table = geom.knn(pos, np.zeros((1, 3)), 2)
        assert table.tolist() == [[0, 2]]

    def test_k_equals_n(self, rng):
        pos = rng.normal(size=(7, 3))
        table = geom.knn(pos, pos[:3], 7)
        assert table.tolist() == [list(range(7))] * 3

    def test_self_included(self, rng):
        pos = rng.normal(size=(20, 3))
        table = geom.knn(pos, pos, 3)
        assert all(i in row for i, row in enumerate(table.tolist()))

    @pytest.mark.parametrize("method", ["exhaustive", "grid"])
    def test_matches_exhaustive_oracle(self, rng, method):
        pos = rng.uniform(size=(200, 3))
        q = pos[rng.choice(200, 16, replace=False)] + rng.normal(scale=0.01, size=(16, 3))
        table = geom.knn(pos, CentroidSet(np.arange(16), q), 12, method=method)
        assert table.tolist() == oracles.knn(pos.tolist(), q.tolist(), 12)

    def test_ties_prefer_smaller_index(self):
        # lattice points: many exactly equal distances
        pos = np.array([(x, y, 0) for x in range(4) for y in range(4)], float)
        table = geom.knn(pos, pos, 5)
        assert table.tolist() == oracles.knn(pos.tolist(), pos.tolist(), 5)
        assert geom.knn(pos, pos, 5, method="grid").tolist() == table.tolist()

    def test_rows_bounded_by_next_distance(self, rng):
        pos = rng.uniform(size=(60, 3))
        q = rng.uniform(size=(10, 3))
        k = 7
        table = geom.knn(pos, q, k)
        for qi, row in enumerate(table):
            d = ((pos - q[qi]) ** 2).sum(-1)
            kth_plus_one = np.sort(d)[k]
            assert (d[row] <= kth_plus_one).all()

    def test_bad_k(self):
        with pytest.raises(InvalidArgument):
            geom.knn(np.zeros((3, 3)), np.zeros((1, 3)), 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 10))
    def test_grid_equals_exhaustive(self, seed, n, k):
        r = np.random.default_rng(seed)
        pos = np.round(r.uniform(size=(n, 3)) * 4) / 4  # coarse lattice -> ties
        q = np.round(r.uniform(-0.2, 1.2, size=(5, 3)) * 4) / 4
        k = min(k, n)
        assert (geom.knn(pos, q, k, method="grid") == geom.knn(pos, q, k)).all()


class TestVoxelPartition:
    def test_single_cell(self, rng):
        pos = rng.uniform(0.1, 0.9, size=(30, 3))
        part = geom.voxel_partition(pos, 1.0, 32)
        assert part.n_sp == 1
        assert (part.assignment == 0).all()

    def test_two_clusters(self, rng):
        a = rng.uniform(0.1, 0.4, size=(10, 3))
        b = a + (3.0, 0, 0)
        part = geom.voxel_partition(np.vstack([a, b]), 1.0, 32)
        assert part.n_sp == 2
        assert len(set(part.assignment[:10])) == 1
        assert len(set(part.assignment[10:])) == 1
        assert part.assignment[0] != part.assignment[10]

    def test_cap_with_nearest_mean_reassignment(self, rng):
        # 40 occupied 1 m cells in a 5 x 8 x 1 slab, uneven populations
        cells = [(x, y, 0) for x in range(5) for y in range(8)]
        pos = np.vstack([c + rng.uniform(0.05, 0.95, size=(3 + (i % 7), 3))
                         for i, c in enumerate(cells)])
        part = geom.voxel_partition(pos, 1.0, 32)
        assert part.n_sp == 32
        vox = np.floor(pos).astype(int)
        keys, counts = np.unique(vox, axis=0, return_counts=True)
        order = sorted(range(len(keys)), key=lambda c: (-counts[c], tuple(keys[c])))
        kept = sorted(order[:32])
        kept_members = [[i for i in range(len(pos)) if (vox[i] == keys[c]).all()] for c in kept]
        expect = oracles.nearest_mean_assignment(pos, kept_members)
        kept_pts = {i for mem in kept_members for i in mem}
        for i in range(len(pos)):
            if i not in kept_pts:
                assert part.assignment[i] == expect[i]
        # total, dense, disjoint
        assert sorted(np.concatenate(part.members).tolist()) == list(range(len(pos)))
        assert set(part.assignment.tolist()) == set(range(32))
        again = geom.voxel_partition(pos, 1.0, 32)
        assert again.assignment.tobytes() == part.assignment.tobytes()

    def test_bad_cell_size(self):
        with pytest.raises(InvalidArgument):
            geom.voxel_partition(np.zeros((2, 3)), 0.0, 4)


class TestSuperpointSampling:
    def make(self, sizes):
        assignment = np.concatenate([np.full(s, k) for k, s in enumerate(sizes)])
        members = [np.flatnonzero(assignment == k) for k in range(len(sizes))]
        return geom.SuperpointPartition(assignment, members, 1.0, np.zeros((len(sizes), 3)))

    def test_exact_size_is_permutation(self):
        part = self.make([20])
        cs = CentroidSet(np.arange(20), np.zeros((20, 3)))
        rows = geom.sample_superpoint_centroids(part, cs, 20, 0)
        for row in rows:
            assert sorted(row) == list(range(20))

    def test_single_member_repeats(self):
        part = self.make([1, 5])
        cs = CentroidSet(np.array([0, 1, 2]), np.zeros((3, 3)))
        rows = geom.sample_superpoint_centroids(part, cs, 20, 0)
        assert rows[0].tolist() == [0] * 20

    def test_membership_and_no_duplicates(self):
        part = self.make([30, 25, 5])
        cs = CentroidSet(np.arange(60), np.zeros((60, 3)))
        rows = geom.sample_superpoint_centroids(part, cs, 20, 7)
        sp = part.assignment
        for i, row in enumerate(rows):
            assert (sp[row] == sp[i]).all()
            if sp[i] < 2:
                assert len(set(row.tolist())) == 20
        again = geom.sample_superpoint_centroids(part, cs, 20, 7)
        assert rows.tobytes() == again.tobytes()

    def test_degenerate_rows(self):
        rows = geom.sample_superpoint_peers(np.array([0, -1, 0]), 4, 0)
        assert (rows[1] == geom.DEGENERATE).all()
        assert (rows[0] >= 0).all()
