import numpy as np
import pytest

from topogen import dataset as ds
from topogen import field_model as fm
from topogen import topo_extract as tx
from topogen.diffmath import PointKind, Stability


def linear_field(a_matrix, center):
    a = np.asarray(a_matrix, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)

    def field_fn(pts):
        return (np.asarray(pts) - c) @ a.T

    def jac_fn(pts):
        return np.broadcast_to(a, (len(pts), 2, 2)).copy()

    return field_fn, jac_fn


def grid_of(field_fn, res):
    values = field_fn(fm.grid_points(res, res)).reshape(res, res, 2)
    return fm.VectorFieldGrid(res, res, values)


class TestCandidateCells:
    def test_constant_field_no_candidates(self):
        values = np.ones((8, 8, 2))
        assert tx.candidate_cells(fm.VectorFieldGrid(8, 8, values)) == []

    def test_identity_field_cells_border_origin(self):
        field_fn, _ = linear_field(np.eye(2), (0.0, 0.0))
        grid = grid_of(field_fn, 8)
        cells = tx.candidate_cells(grid)
        # the origin sits at the corner shared by the four central cells
        assert set(cells) == {(3, 3)} or set(cells) == {(3, 3), (3, 4), (4, 3), (4, 4)}
        # sign structure of the identity field: u changes sign across x=0 only
        u = grid.values[:, :, 0]
        assert np.all(u[:, :4] < 0) and np.all(u[:, 4:] > 0)

    def test_zero_counts_as_both_signs(self):
        values = np.ones((4, 4, 2))
        values[1, 1] = (0.0, 0.0)
        cells = tx.candidate_cells(fm.VectorFieldGrid(4, 4, values))
        assert set(cells) == {(0, 0), (0, 1), (1, 0), (1, 1)}

    def test_superset_of_cells_containing_oracle_zeros(self):
        cfg = ds.SynthConfig(n_fields=6, resolution=64, seed=77)
        for rec in ds.synth_generate(cfg):
            grid = grid_of(rec.synth_params.field_fn, 128)
            cells = set(tx.candidate_cells(grid))
            xs, ys = grid.xs(), grid.ys()
            for cp in rec.ground_truth:
                if not (xs[0] <= cp.x < xs[-1] and ys[0] <= cp.y < ys[-1]):
                    continue
                c = int(np.searchsorted(xs, cp.x) - 1)
                r = int(np.searchsorted(ys, cp.y) - 1)
                assert (r, c) in cells


class TestRefineCell:
    def test_deterministic_given_seed(self):
        field_fn, _ = linear_field([[1.0, 0.2], [-0.3, 2.0]], (0.05, -0.1))
        grid = grid_of(field_fn, 16)
        cell = (7, 8)
        a = tx.refine_cell_field(field_fn, grid, cell, 64, np.random.default_rng(5))
        b = tx.refine_cell_field(field_fn, grid, cell, 64, np.random.default_rng(5))
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]

    def test_single_sample(self):
        field_fn, _ = linear_field(np.eye(2), (0.0, 0.0))
        grid = grid_of(field_fn, 16)
        point, norm = tx.refine_cell_field(field_fn, grid, (7, 7), 1,
                                           np.random.default_rng(0))
        xs = grid.xs()
        assert xs[7] <= point[0] <= xs[8]
        assert norm == pytest.approx(float(np.hypot(*field_fn(point.reshape(1, 2))[0])))

    def test_norm_decreases_with_more_samples(self):
        field_fn, _ = linear_field([[1.0, 0.0], [0.0, 1.0]], (0.02, 0.03))
        grid = grid_of(field_fn, 16)
        cell = (8, 8)  # contains the zero
        norms_16 = [tx.refine_cell_field(field_fn, grid, cell, 16,
                                         np.random.default_rng(s))[1] for s in range(20)]
        norms_1024 = [tx.refine_cell_field(field_fn, grid, cell, 1024,
                                           np.random.default_rng(s))[1] for s in range(20)]
        assert np.mean(norms_1024) < np.mean(norms_16)

    def test_out_of_bounds_cell_rejected(self):
        field_fn, _ = linear_field(np.eye(2), (0.0, 0.0))
        grid = grid_of(field_fn, 16)
        with pytest.raises(ValueError):
            tx.refine_cell_field(field_fn, grid, (15, 0), 4, np.random.default_rng(0))


class TestExtract:
    def test_linear_source_node(self):
        field_fn, jac_fn = linear_field(np.diag([1.0, 2.0]), (0.3, -0.2))
        cfg = tx.ExtractConfig(grid_res=64, samples_per_cell=64)
        points = tx.extract_field(field_fn, jac_fn, cfg)
        assert len(points) == 1
        cp = points[0]
        cell_diag = 2 * np.sqrt(2) / 64
        assert np.hypot(cp.x - 0.3, cp.y + 0.2) <= cell_diag
        assert cp.cls.kind is PointKind.SOURCE
        assert cp.cls.stability is Stability.STABLE  # eigenvalues (1, 2), delta = 1

    def test_linear_sink_node(self):
        field_fn, jac_fn = linear_field(np.diag([-1.0, -2.0]), (0.0, 0.0))
        cfg = tx.ExtractConfig(grid_res=64, samples_per_cell=64)
        points = tx.extract_field(field_fn, jac_fn, cfg)
        assert len(points) == 1
        assert points[0].cls.kind is PointKind.SINK
        assert points[0].cls.stability is Stability.STABLE  # delta = 9 - 8 = 1
        assert np.hypot(points[0].x, points[0].y) <= 2 * np.sqrt(2) / 64

    def test_rotation_focus_classification(self):
        field_fn, jac_fn = linear_field([[-0.5, -2.0], [2.0, -0.5]], (0.1, 0.1))
        points = tx.extract_field(field_fn, jac_fn, tx.ExtractConfig(grid_res=64,
                                                                     samples_per_cell=64))
        assert len(points) == 1
        assert points[0].cls.kind is PointKind.SINK
        assert points[0].cls.stability is Stability.UNSTABLE  # complex pair: focus

    def test_accepted_norms_below_threshold_and_unique_cells(self):
        cfg = ds.SynthConfig(n_fields=3, resolution=64, seed=5)
        ecfg = tx.ExtractConfig(grid_res=128, samples_per_cell=64)
        for rec in ds.synth_generate(cfg, with_ground_truth=False):
            p = rec.synth_params
            pts = fm.grid_points(128, 128)
            values = p.field_fn(pts)
            rms = float(np.sqrt(np.mean(values[:, 0] ** 2 + values[:, 1] ** 2)))
            found = tx.extract_field(p.field_fn, p.jac_fn, ecfg)
            for cp in found:
                assert cp.norm <= ecfg.norm_accept_tau * rms
            cells = [(int((cp.y + 1) * 64), int((cp.x + 1) * 64)) for cp in found]
            assert len(set(cells)) == len(cells)

    def test_location_error_shrinks_with_resolution(self):
        field_fn, jac_fn = linear_field([[1.5, 0.3], [-0.2, 1.0]], (0.17, -0.33))

        def mean_err(res):
            errs = []
            for seed in range(10):
                cfg = tx.ExtractConfig(grid_res=res, samples_per_cell=256, seed=seed)
                points = tx.extract_field(field_fn, jac_fn, cfg)
                assert len(points) == 1
                errs.append(float(np.hypot(points[0].x - 0.17, points[0].y + 0.33)))
            return float(np.mean(errs)), max(errs)

        e64, _ = mean_err(64)
        e256, worst256 = mean_err(256)
        # two resolution doublings at fixed per-cell density: expect ~4x, demand 2x
        assert e256 <= 0.5 * e64
        assert worst256 <= 2 * np.sqrt(2) / 256

    def test_oracle_precision_recall_small(self):
        # smaller sibling of the acceptance-gate oracle suite
        cfg = ds.SynthConfig(n_fields=10, resolution=64, seed=21)
        ecfg = tx.ExtractConfig(grid_res=256, samples_per_cell=256)
        cell_diag = 2 * np.sqrt(2) / 256
        margin = 1 - 3 * (2 / 256)
        tp = fp = fn = 0
        for rec in ds.synth_generate(cfg):
            p = rec.synth_params
            det = tx.extract_field(p.field_fn, p.jac_fn, ecfg)
            gt_all = [(c.x, c.y) for c in rec.ground_truth]
            gt_interior = [(x, y) for x, y in gt_all
                           if abs(x) <= margin and abs(y) <= margin]
            for cp in det:
                d = min((np.hypot(cp.x - x, cp.y - y) for x, y in gt_all), default=np.inf)
                if d <= cell_diag:
                    tp += 1
                else:
                    fp += 1
            for x, y in gt_interior:
                if not det or min(np.hypot(cp.x - x, cp.y - y) for cp in det) > cell_diag:
                    fn += 1
        assert tp / (tp + fn) >= 0.95
        assert tp / (tp + fp) >= 0.90

    def test_classification_agrees_with_oracle(self):
        cfg = ds.SynthConfig(n_fields=6, resolution=64, seed=33)
        ecfg = tx.ExtractConfig(grid_res=256, samples_per_cell=256)
        cell_diag = 2 * np.sqrt(2) / 256
        checked = 0
        for rec in ds.synth_generate(cfg):
            p = rec.synth_params
            det = tx.extract_field(p.field_fn, p.jac_fn, ecfg)
            for cp in det:
                matches = [g for g in rec.ground_truth
                           if np.hypot(cp.x - g.x, cp.y - g.y) <= cell_diag]
                if len(matches) == 1 and matches[0].cls.kind is not PointKind.DEGENERATE:
                    checked += 1
                    assert cp.cls.kind is matches[0].cls.kind
                    assert cp.cls.stability is matches[0].cls.stability
        assert checked >= 10

    def test_siren_wrapper(self):
        rng = np.random.default_rng(3)
        scfg = fm.SirenConfig(hidden_width=16, hidden_layers=2, latent_dim=4, omega0=6.0)
        w = fm.init_weights(scfg, rng)
        w.mod[:] = rng.normal(size=w.mod.shape) * 0.3
        z = rng.normal(size=4)
        points = tx.extract(w, z, tx.ExtractConfig(grid_res=64, samples_per_cell=32))
        for cp in points:
            u, v = fm.evaluate(w, z, (cp.x, cp.y))
            assert np.hypot(u, v) == pytest.approx(cp.norm, rel=1e-12)


class TestBilinearField:
    def test_reproduces_grid_at_centers(self):
        rng = np.random.default_rng(9)
        grid = fm.VectorFieldGrid(8, 8, rng.normal(size=(8, 8, 2)))
        field_fn, _ = tx.bilinear_field(grid)
        pts = fm.grid_points(8, 8)
        # the outermost centers sit on the clamped interpolation boundary
        assert field_fn(pts).reshape(8, 8, 2) == pytest.approx(grid.values, abs=1e-9)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        grid = fm.VectorFieldGrid(16, 16, rng.normal(size=(16, 16, 2)))
        field_fn, jac_fn = tx.bilinear_field(grid)
        pts = rng.uniform(-0.8, 0.8, size=(20, 2))
        jac = jac_fn(pts)
        h = 1e-7
        for k, p in enumerate(pts):
            for col, dp in enumerate((np.array([h, 0.0]), np.array([0.0, h]))):
                fd = (field_fn((p + dp).reshape(1, 2))[0] - field_fn((p - dp).reshape(1, 2))[0]) / (2 * h)
                assert jac[k, :, col] == pytest.approx(fd, abs=1e-5)

    def test_extraction_from_gridded_linear_field(self):
        field_fn, _ = linear_field(np.diag([1.0, 1.0]), (0.21, 0.11))
        grid = grid_of(field_fn, 64)
        bf, bj = tx.bilinear_field(grid)
        points = tx.extract_field(bf, bj, tx.ExtractConfig(grid_res=64, samples_per_cell=128))
        assert len(points) == 1
        assert np.hypot(points[0].x - 0.21, points[0].y - 0.11) <= 2 * np.sqrt(2) / 64
        assert points[0].cls.kind is PointKind.SOURCE


class TestReport:
    def test_report_round_trip(self):
        field_fn, jac_fn = linear_field(np.diag([1.0, 2.0]), (0.3, -0.2))
        points = tx.extract_field(field_fn, jac_fn,
                                  tx.ExtractConfig(grid_res=64, samples_per_cell=64))
        doc = tx.report_json(points)
        assert set(doc[0]) == {"x", "y", "norm", "trace", "det", "delta",
                               "lam1_re", "lam2_re", "kind", "stability"}
        back = [tx.CriticalPoint.from_dict(d) for d in doc]
        assert back[0].cls == points[0].cls
        assert back[0].x == points[0].x
