import numpy as np
import pytest
from conftest import exponential_data, snapshots
from hypothesis import given, settings
from hypothesis import strategies as st

from splitdmd.dmd import exact_dmd, reconstruct
from splitdmd.driver import Method, SplitDmdModel, owner_index, reconstruct_split, shift_splits, split_dmd
from splitdmd.errors import ConfigError, DomainError
from splitdmd.ks import KsConfig, SnapshotMatrix, simulate_ks
from splitdmd.nsplit import NsplitConfig, SplitSet
from splitdmd.optdmd import optdmd

OMEGA_A = np.array([-0.1 + 2j, -0.1 - 2j, 0.05 + 5j, 0.05 - 5j, -0.3])
OMEGA_B = np.array([-0.2, 0.1 + 1j, 0.1 - 1j, -0.05 + 3.5j, -0.05 - 3.5j])


def two_families(m=40, n_half=60, dt=0.05, seed=0):
    """Family A on [0, T/2] and family B on [T/2, T], agreeing at the shared column."""
    left, _, _ = exponential_data(OMEGA_A, m=m, n=n_half + 1, dt=dt, seed=seed)
    t_mid = n_half * dt
    rng = np.random.default_rng(seed + 1)
    modes = rng.standard_normal((m, 5)) + 1j * rng.standard_normal((m, 5))
    modes[:, 2], modes[:, 4] = modes[:, 1].conj(), modes[:, 3].conj()
    b = np.array([1.0, 0.7 + 0.2j, 0.7 - 0.2j, -0.4 + 0.5j, -0.4 - 0.5j])
    # the real mode absorbs the mismatch so both families pass through the shared snapshot
    rest = (modes[:, 1:] @ b[1:]).real
    modes[:, 0] = left.values[:, -1] - rest
    t_right = t_mid + np.arange(1, n_half + 1) * dt
    right = (modes @ (b[:, None] * np.exp(np.outer(OMEGA_B, t_right - t_mid)))).real
    values = np.hstack([left.values, right])
    t = np.arange(2 * n_half + 1) * dt
    return SnapshotMatrix(values, left.x_grid, t), t_mid


def assert_models_identical(a, b, reduced=True):
    names = ("modes", "cont_eigs", "amplitudes") + (("reduced_operator", "reduced_eigvecs") if reduced else ())
    for name in names:
        x, y = getattr(a, name), getattr(b, name)
        assert (x is None) == (y is None)
        if x is not None:
            assert np.array_equal(x, y), name
    assert a.dt == b.dt and a.t_start == b.t_start


class TestMethod:
    @pytest.mark.parametrize("value,expected", [("dmd", Method.STANDARD_DMD), ("od", Method.OPTIMIZED_DMD),
                                                ("optimized_dmd", Method.OPTIMIZED_DMD)])
    def test_parse(self, value, expected):
        assert Method.parse(value) is expected

    def test_unknown(self):
        with pytest.raises(ConfigError):
            Method.parse("svd")


@pytest.mark.invariant
class TestDegenerateSplit:
    def test_standard_dmd_identical(self):
        Z, _, _ = exponential_data(OMEGA_A)
        model, report = split_dmd(Z, 5, "dmd", SplitSet.whole(Z.t_grid[-1]))
        ref = exact_dmd(Z, 5)
        assert model.splits.n == 1
        assert_models_identical(model.pieces[0], ref)
        ref_recon = reconstruct(ref, Z.t_grid).real
        assert np.array_equal(reconstruct_split(model, Z.t_grid), ref_recon)
        assert report.rel_frobenius == pytest.approx(np.linalg.norm(Z.values - ref_recon) / np.linalg.norm(Z.values), abs=0)

    def test_optimized_dmd_identical(self):
        Z, _, _ = exponential_data(OMEGA_A, seed=3)
        noisy = snapshots(Z.values + 1e-3 * np.random.default_rng(1).standard_normal(Z.shape), Z.t_grid)
        model, report = split_dmd(noisy, 5, "od", SplitSet.whole(Z.t_grid[-1]))
        ref = optdmd(noisy, 5)
        assert_models_identical(model.pieces[0], ref.model)
        assert report.rel_frobenius == ref.report.rel_frobenius
        assert report.final_residual_2norm == ref.report.final_residual_2norm
        assert model.stopping_reasons == [ref.stopping_reason]


class TestSplitFits:
    def test_two_families_need_the_split(self):
        Z, t_mid = two_families()
        _, whole = split_dmd(Z, 5, "dmd", SplitSet.whole(Z.t_grid[-1]))
        model, split = split_dmd(Z, 5, "dmd", SplitSet((0.0, t_mid, Z.t_grid[-1])))
        assert whole.rel_frobenius > 0.1
        assert split.rel_frobenius < 1e-8
        assert np.max(np.abs(reconstruct_split(model, Z.t_grid) - Z.values)) < 1e-8 * np.max(np.abs(Z.values))

    def test_pieces_start_at_their_left_line(self):
        Z, t_mid = two_families()
        model, _ = split_dmd(Z, 5, "dmd", SplitSet((0.0, t_mid, Z.t_grid[-1])))
        assert [p.t_start for p in model.pieces] == [0.0, t_mid]

    def test_lines_snap_to_snapshots(self):
        Z, t_mid = two_families()
        model, report = split_dmd(Z, 5, "dmd", SplitSet((0.0, t_mid + 0.01, Z.t_grid[-1])))
        assert model.splits.interior == (pytest.approx(t_mid, abs=1e-12),)
        assert report.rel_frobenius < 1e-8

    def test_timings(self):
        Z, t_mid = two_families()
        model, report = split_dmd(Z, 5, "od", SplitSet((0.0, t_mid, Z.t_grid[-1])))
        assert len(model.piece_fit_times) == 2
        assert model.total_fit_time_seconds == pytest.approx(sum(model.piece_fit_times))
        assert report.wall_time_seconds == model.total_fit_time_seconds

    def test_segmentation_time_counted_for_auto_splits(self):
        Z, _ = two_families()
        model, report = split_dmd(Z, 5, "dmd", NsplitConfig(num_x_tests=3))
        assert model.segmentation_time_seconds > 0
        assert report.wall_time_seconds == pytest.approx(sum(model.piece_fit_times) + model.segmentation_time_seconds)
        model2, report2 = split_dmd(Z, 5, "dmd", NsplitConfig(num_x_tests=3), include_segmentation_time=False)
        assert report2.wall_time_seconds == pytest.approx(sum(model2.piece_fit_times))
        assert model2.splits == model.splits

    def test_piece_too_short_for_rank(self):
        Z, _ = two_families()
        with pytest.raises(ConfigError, match="subinterval 1"):
            split_dmd(Z, 5, "dmd", SplitSet((0.0, 0.5, 0.7, Z.t_grid[-1])))

    def test_collapsing_lines(self):
        Z, _ = two_families()
        with pytest.raises(ConfigError):
            split_dmd(Z, 2, "dmd", SplitSet((0.0, 1.001, 1.002, Z.t_grid[-1])))

    def test_horizon_mismatch(self):
        Z, _ = two_families()
        with pytest.raises(DomainError):
            split_dmd(Z, 2, "dmd", SplitSet((0.0, 1.0, 2 * Z.t_grid[-1])))

    def test_bad_split_argument(self):
        Z, _ = two_families()
        with pytest.raises(ConfigError):
            split_dmd(Z, 2, "dmd", [0.0, Z.t_grid[-1]])

    @pytest.mark.parametrize("method", ["dmd", "od"])
    def test_parallel_matches_sequential(self, method):
        Z, _, _ = exponential_data(OMEGA_A, n=200, seed=5)
        noisy = snapshots(Z.values + 1e-3 * np.random.default_rng(2).standard_normal(Z.shape), Z.t_grid)
        splits = SplitSet.even(Z.t_grid[-1], 4, Z.t_grid)
        seq, r1 = split_dmd(noisy, 5, method, splits)
        par, r2 = split_dmd(noisy, 5, method, splits, workers=4)
        for a, b in zip(seq.pieces, par.pieces):
            assert_models_identical(a, b)
        assert r1.rel_frobenius == r2.rel_frobenius

    def test_ks_bifurcation_split_beats_unsplit(self):
        Z = simulate_ks(KsConfig(length_L=12.6, imperfection=1e-8))
        _, whole = split_dmd(Z, 11, "od", SplitSet.whole(Z.t_grid[-1]))
        _, split = split_dmd(Z, 11, "od", SplitSet.even(Z.t_grid[-1], 4, Z.t_grid))
        assert split.rel_frobenius < whole.rel_frobenius


class TestReconstruct:
    def setup_method(self):
        Z, t_mid = two_families()
        self.Z, self.t_mid = Z, t_mid
        self.model, _ = split_dmd(Z, 5, "dmd", SplitSet((0.0, t_mid, Z.t_grid[-1])))

    def test_line_belongs_to_right_piece(self):
        out = reconstruct_split(self.model, [self.t_mid])
        right = reconstruct(self.model.pieces[1], np.array([self.t_mid])).real
        assert np.array_equal(out, right)

    def test_end_belongs_to_last_piece(self):
        T = self.Z.t_grid[-1]
        assert owner_index(self.model.splits, [0.0, self.t_mid - 1e-6, self.t_mid, T]).tolist() == [0, 0, 1, 1]

    def test_single_piece_matches_reconstruct(self):
        model, _ = split_dmd(self.Z, 5, "dmd", SplitSet.whole(self.Z.t_grid[-1]))
        t = np.linspace(0, self.Z.t_grid[-1], 37)
        assert np.array_equal(reconstruct_split(model, t), reconstruct(model.pieces[0], t).real)

    @pytest.mark.parametrize("t", [-0.1, 6.5])
    def test_no_extrapolation(self, t):
        with pytest.raises(DomainError):
            reconstruct_split(self.model, [t])

    def test_save_load(self, tmp_path):
        path = tmp_path / "split.npz"
        self.model.save(path)
        back = SplitDmdModel.load(path)
        assert back.splits == self.model.splits and back.method is self.model.method
        assert back.rank_r == 5
        for a, b in zip(back.pieces, self.model.pieces):
            assert_models_identical(a, b, reduced=False)
        assert np.array_equal(reconstruct_split(back, self.Z.t_grid), reconstruct_split(self.model, self.Z.t_grid))

    def test_piece_count_invariant(self):
        with pytest.raises(ConfigError):
            SplitDmdModel(self.model.splits, self.model.pieces[:1], Method.STANDARD_DMD, 5, 0.0)

    def test_piece_start_invariant(self):
        pieces = [self.model.pieces[1], self.model.pieces[1]]
        with pytest.raises(ConfigError):
            SplitDmdModel(self.model.splits, pieces, Method.STANDARD_DMD, 5, 0.0)


class TestShift:
    def test_zero_is_identity(self):
        s = SplitSet.from_interior(400.0, range(40, 400, 40))
        assert shift_splits(s, 0.0) == s

    def test_plus_three(self):
        s = SplitSet.from_interior(400.0, range(40, 400, 40))
        assert shift_splits(s, 3.0).interior == tuple(float(v) for v in range(43, 400, 40))
        assert shift_splits(s, -3.0).lines[-1] == 400.0

    @pytest.mark.parametrize("shift", [321.0, -41.0])
    def test_ordering_violation(self, shift):
        with pytest.raises(DomainError):
            shift_splits(SplitSet((0.0, 40.0, 80.0, 400.0)), shift)


@st.composite
def split_sets(draw, n_cols=121, dt=0.05):
    cols = draw(st.lists(st.integers(1, n_cols - 2), max_size=5, unique=True))
    return SplitSet.from_interior((n_cols - 1) * dt, [c * dt for c in sorted(cols)])


@pytest.mark.invariant
class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(split_sets())
    def test_every_column_has_exactly_one_owner(self, splits):
        t = np.arange(121) * 0.05
        owner = owner_index(splits, t)
        lines = np.array(splits.lines)
        for k in range(splits.n):
            lo, hi = lines[k], lines[k + 1]
            mine = (t >= lo - 1e-9) & ((t < hi - 1e-9) if k < splits.n - 1 else (t <= hi + 1e-9))
            assert np.array_equal(owner == k, mine)

    @settings(max_examples=30, deadline=None)
    @given(split_sets(), st.integers(0, 20))
    def test_error_decomposes_over_pieces(self, splits, seed):
        Z, _, _ = exponential_data(OMEGA_A, n=121, seed=seed)
        noisy = snapshots(Z.values + 0.05 * np.random.default_rng(seed).standard_normal(Z.shape), Z.t_grid)
        try:
            model, _ = split_dmd(noisy, 2, "dmd", splits)
        except ConfigError:
            return
        total = np.linalg.norm(noisy.values - reconstruct_split(model, noisy.t_grid)) ** 2
        owner = owner_index(model.splits, noisy.t_grid)
        parts = 0.0
        for k, piece in enumerate(model.pieces):
            sel = owner == k
            parts += np.linalg.norm(noisy.values[:, sel] - reconstruct(piece, noisy.t_grid[sel]).real) ** 2
        assert total == pytest.approx(parts, rel=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(split_sets(), st.sampled_from(["dmd", "od"]))
    def test_parallel_determinism(self, splits, method):
        Z, _, _ = exponential_data(OMEGA_A, n=121, seed=11)
        noisy = snapshots(Z.values + 1e-2 * np.random.default_rng(0).standard_normal(Z.shape), Z.t_grid)
        try:
            seq, _ = split_dmd(noisy, 3, method, splits)
        except ConfigError:
            return
        par, _ = split_dmd(noisy, 3, method, splits, workers=3)
        for a, b in zip(seq.pieces, par.pieces):
            assert_models_identical(a, b)
