import numpy as np
import pytest

from stainssl.datapipe import (
    BalancedBatchSampler,
    BatchComposition,
    PolygonAnnotation,
    TileRecord,
    TileSample,
    TileSet,
    balanced_accuracy,
    extract_tiles,
    foreground_filter,
    per_class_metrics,
    point_in_polygon,
    points_in_polygon,
    validate_polygon,
)
from stainssl.errors import (
    AnnotationError,
    ConfigurationError,
    EvaluationError,
    InvalidInputError,
)


from geom_oracle import ray_cast_oracle


def square(x0, y0, x1, y1, label="a"):
    return PolygonAnnotation(label, [[x0, y0], [x1, y0], [x1, y1], [x0, y1]])


class TestPointInPolygon:
    def test_agrees_with_ray_casting_oracle(self):
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 10000:
            n_vertices = int(rng.integers(3, 9))
            angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_vertices))
            if np.min(np.diff(angles)) < 1e-3:
                continue  # avoid near-duplicate vertices
            radii = rng.uniform(2, 10, size=n_vertices)
            verts = np.column_stack(
                [10 + radii * np.cos(angles), 10 + radii * np.sin(angles)]
            )
            pts = rng.uniform(-2, 22, size=(10, 2))
            got = points_in_polygon(pts, verts)
            for (px, py), g in zip(pts, got):
                assert g == ray_cast_oracle(px, py, verts)
                checked += 1

    def test_on_edge_counts_inside(self):
        poly = square(0, 0, 10, 10).points
        assert point_in_polygon(0, 0, poly)  # vertex
        assert point_in_polygon(5, 0, poly)  # edge midpoint
        assert point_in_polygon(10, 10, poly)
        assert not point_in_polygon(10.0001, 10, poly)

    def test_concave_polygon(self):
        verts = np.array([[0, 0], [10, 0], [10, 10], [5, 5], [0, 10]], dtype=float)
        assert point_in_polygon(2, 2, verts)
        assert not point_in_polygon(5, 9, verts)  # inside the notch


class TestValidatePolygon:
    def test_triangle_ok(self):
        validate_polygon(PolygonAnnotation("a", [[0, 0], [4, 0], [2, 3]]), 0)

    def test_too_few_vertices(self):
        with pytest.raises(AnnotationError, match="polygon 3"):
            validate_polygon(PolygonAnnotation("a", [[0, 0], [1, 1]]), 3)

    def test_self_intersection_rejected(self):
        bowtie = PolygonAnnotation("a", [[0, 0], [10, 10], [12, 2], [0, 8]])
        with pytest.raises(AnnotationError, match="intersect"):
            validate_polygon(bowtie, 7)

    def test_symmetric_bowtie_rejected_as_degenerate(self):
        # the two lobes cancel to zero signed area, caught before the edge test
        bowtie = PolygonAnnotation("a", [[0, 0], [10, 10], [10, 0], [0, 10]])
        with pytest.raises(AnnotationError, match="polygon 2"):
            validate_polygon(bowtie, 2)

    def test_zero_area_rejected(self):
        with pytest.raises(AnnotationError):
            validate_polygon(PolygonAnnotation("a", [[0, 0], [5, 5], [10, 10]]), 0)


class TestExtractTiles:
    def test_single_position_full_cover(self):
        tiles = extract_tiles(400, 400, [square(0, 0, 400, 400)], 400, 200)
        labeled = [t for t in tiles if t.label is not None]
        assert len(labeled) == 1
        assert (labeled[0].x, labeled[0].y) == (0, 0)

    def test_grid_count_with_stride(self):
        tiles = extract_tiles(800, 400, [square(0, 0, 800, 400)], 400, 200)
        labeled = [t for t in tiles if t.label is not None]
        assert [(t.x, t.y) for t in labeled] == [(0, 0), (200, 0), (400, 0)]

    def test_small_polygon_yields_no_labeled_tiles(self):
        tiles = extract_tiles(400, 400, [square(0, 0, 300, 400)], 400, 200)
        assert all(t.label is None for t in tiles)
        # tile overlaps the polygon, so it is not an unlabeled candidate either
        assert tiles == []

    def test_unlabeled_tiles_avoid_polygons(self):
        polygons = [square(0, 0, 400, 400, "tumor")]
        tiles = extract_tiles(1200, 400, polygons, 400, 400)
        unlabeled = [(t.x, t.y) for t in tiles if t.label is None]
        assert unlabeled == [(800, 0)]  # (400,0) touches the polygon edge

    def test_no_polygons_gives_only_unlabeled(self):
        tiles = extract_tiles(800, 400, [], 400, 400)
        assert [(t.x, t.y) for t in tiles] == [(0, 0), (400, 0)]
        assert all(t.label is None for t in tiles)

    def test_separate_unlabeled_stride(self):
        tiles = extract_tiles(1600, 400, [], 400, 200, unlabeled_stride=400)
        assert [t.x for t in tiles] == [0, 400, 800, 1200]

    def test_class_mapping_stable(self):
        polys = [square(0, 0, 100, 100, "b"), square(200, 0, 300, 100, "a")]
        tiles = extract_tiles(300, 100, polys, 100, 100)
        by_pos = {(t.x, t.y): t.label for t in tiles if t.label is not None}
        assert by_pos[(0, 0)] == 1  # "b" sorts after "a"
        assert by_pos[(200, 0)] == 0

    def test_overlapping_polygons_ambiguous_tile_skipped(self):
        polys = [square(0, 0, 400, 400, "a"), square(0, 0, 400, 400, "b")]
        tiles = extract_tiles(400, 400, polys, 400, 400)
        assert tiles == []

    def test_row_major_order(self):
        tiles = extract_tiles(300, 300, [square(0, 0, 300, 300)], 100, 100)
        labeled = [(t.x, t.y) for t in tiles if t.label is not None]
        assert labeled == sorted(labeled, key=lambda p: (p[1], p[0]))

    def test_degenerate_polygon_raises_with_index(self):
        polys = [square(0, 0, 100, 100), PolygonAnnotation("x", [[0, 0], [1, 1]])]
        with pytest.raises(AnnotationError, match="polygon 1"):
            extract_tiles(400, 400, polys, 100, 100)


class TestForegroundFilter:
    def test_pure_white_rejected(self):
        assert not foreground_filter(np.full((32, 32, 3), 255.0))

    def test_fully_stained_kept(self):
        assert foreground_filter(np.full((32, 32, 3), 100.0))

    def test_boundary_fraction_kept(self):
        tile = np.full((10, 10, 3), 255.0)
        tile[:5, :5] = 80.0  # exactly 25% tissue
        assert foreground_filter(tile, min_tissue_fraction=0.25)
        tile[4, 4] = 255.0  # drop below the boundary
        assert not foreground_filter(tile, min_tissue_fraction=0.25)


class TestBalancedBatches:
    @staticmethod
    def sampler(pool_sizes=(40, 3, 17, 200), unlabeled=500, comp=None, seed=0):
        pools = {
            c: [f"c{c}_{i}" for i in range(n)] for c, n in enumerate(pool_sizes)
        }
        comp = comp or BatchComposition((8, 8, 8, 8), 32)
        return BalancedBatchSampler(
            pools, [f"u{i}" for i in range(unlabeled)], comp, seed
        )

    def test_every_batch_has_exact_composition(self):
        s = self.sampler()
        for b in range(200):
            labeled, unlabeled = s.batch(b)
            counts = {c: 0 for c in range(4)}
            for _, c in labeled:
                counts[c] += 1
            assert counts == {0: 8, 1: 8, 2: 8, 3: 8}
            assert len(unlabeled) == 32

    def test_uneven_composition_totals(self):
        comp = BatchComposition((11, 11, 11), 31)
        s = self.sampler(pool_sizes=(30, 30, 30), comp=comp)
        labeled, unlabeled = s.batch(5)
        assert len(labeled) + len(unlabeled) == 64
        assert comp.batch_size == 64

    def test_singleton_pool_repeats(self):
        s = self.sampler(pool_sizes=(1, 5, 5, 5))
        for b in range(10):
            labeled, _ = s.batch(b)
            class0 = [item for item, c in labeled if c == 0]
            assert class0 == ["c0_0"] * 8

    def test_epoch_reshuffle_covers_pool_without_repeats(self):
        s = self.sampler(pool_sizes=(16, 5, 5, 5))
        seen = [item for b in range(2) for item, c in s.batch(b)[0] if c == 0]
        assert sorted(seen) == sorted(f"c0_{i}" for i in range(16))
        seen2 = [item for b in (2, 3) for item, c in s.batch(b)[0] if c == 0]
        assert sorted(seen2) == sorted(f"c0_{i}" for i in range(16))
        assert seen != seen2  # second epoch reshuffled

    def test_reproducible_and_random_access(self):
        a = self.sampler(seed=9)
        b = self.sampler(seed=9)
        assert a.batch(17) == b.batch(17)
        # order of access must not matter
        c = self.sampler(seed=9)
        c.batch(3)
        assert c.batch(17) == a.batch(17)

    def test_empty_class_pool_rejected_with_name(self):
        with pytest.raises(ConfigurationError, match="necrosis"):
            BalancedBatchSampler(
                {0: ["x"], 1: []},
                ["u"],
                BatchComposition((1, 1), 1),
                0,
                class_names=["tumor", "necrosis"],
            )

    def test_zero_count_class_may_be_empty(self):
        s = BalancedBatchSampler(
            {0: ["x"], 1: []}, ["u"], BatchComposition((2, 0), 1), 0
        )
        labeled, unlabeled = s.batch(0)
        assert [c for _, c in labeled] == [0, 0]


class TestMetrics:
    def test_perfect_diagonal(self):
        assert balanced_accuracy(np.diag([5, 9, 2])) == 1.0

    def test_mean_of_recalls(self):
        conf = np.array([[4, 0], [2, 2]])
        conf3 = np.array([[2, 0, 0], [1, 1, 0], [0, 1, 3]])
        assert balanced_accuracy(conf) == pytest.approx((1.0 + 0.5) / 2)
        assert balanced_accuracy(conf3) == pytest.approx((1.0 + 0.5 + 0.75) / 3)

    def test_constant_predictor(self):
        conf = np.zeros((4, 4))
        conf[:, 0] = [3, 7, 5, 1]
        assert balanced_accuracy(conf) == 0.25

    def test_empty_row_rejected(self):
        conf = np.array([[3, 0], [0, 0]])
        with pytest.raises(EvaluationError):
            balanced_accuracy(conf)

    def test_per_class_metrics(self):
        conf = np.array([[8, 2], [4, 6]])
        m = per_class_metrics(conf)
        assert m["recall"] == [0.8, 0.6]
        assert m["precision"] == [pytest.approx(8 / 12), pytest.approx(6 / 8)]
        f0 = 2 * 0.8 * (8 / 12) / (0.8 + 8 / 12)
        assert m["fscore"][0] == pytest.approx(f0)
        assert m["balanced_accuracy"] == pytest.approx(0.7)


def test_tile_set_leakage_detection():
    rec = lambda sid: TileRecord(TileSample(sid, 0, 0, 4), np.zeros((4, 4, 3)))
    ts = TileSet(class_names=["a", "b"])
    ts.train_labeled.append(rec("s1"))
    ts.val.append(rec("s2"))
    ts.check_no_slide_leakage()
    ts.test.append(rec("s1"))
    with pytest.raises(ConfigurationError, match="s1"):
        ts.check_no_slide_leakage()


def test_batch_composition_validation():
    with pytest.raises(InvalidInputError):
        BatchComposition((-1, 2), 3)
    with pytest.raises(InvalidInputError):
        BatchComposition((0, 0), 0)
    assert BatchComposition((8, 8, 8, 8), 32).batch_size == 64
