"""Rank, quantization and reordering contracts: copula preservation,
margin preservation, the discrete coupling identity, tie handling."""

import numpy as np
import pytest
from scipy import special, stats

from enscopula.coupling import (
    HistoricalRecord,
    QuantizedEnsemble,
    RawEnsemble,
    compute_ranks,
    couple,
    derive_seed,
    ecc_reorder,
    empirical_copula_eval,
    quantize_q,
    quantize_r,
    quantize_t,
    schaake_shuffle,
    shuffle_margins,
    verify_discrete_sklar,
    verify_ecc_sklar,
)
from enscopula.distributions import (
    BernoulliGammaMixtureDist,
    EmpiricalDist,
    GammaDist,
    NormalDist,
    NormalMixtureDist,
)
from enscopula.errors import DegenerateSmoothingError, InputError, UnsupportedSchemeError
from enscopula.postprocess import MarginIndex

from _support import ForcedRng, UniformDist

STD_NORMAL_Q75 = 0.6744897501960816  # bisection oracle, see test_distributions


def margins(n):
    return [MarginIndex("temp", f"s{i:02d}", 24) for i in range(n)]


class TestComputeRanks:
    def test_plain_ranks(self):
        perm = compute_ranks([3.2, 1.1, 2.5], tie_seed=0)
        assert perm.sigma.tolist() == [3, 1, 2]

    def test_ties_randomized_but_valid(self):
        outs = set()
        for seed in (1, 2):
            perm = compute_ranks([5.0, 5.0, 5.0], tie_seed=seed)
            assert sorted(perm.sigma.tolist()) == [1, 2, 3]
            outs.add(tuple(perm.sigma.tolist()))
        # different seeds may or may not coincide; both must be permutations
        assert all(sorted(o) == [1, 2, 3] for o in outs)

    def test_sorted_input_identity(self):
        perm = compute_ranks([1.0, 2.0, 3.0, 4.0], tie_seed=9)
        assert perm.sigma.tolist() == [1, 2, 3, 4]

    def test_tie_free_ranks_ignore_seed(self):
        vals = np.random.default_rng(0).normal(size=20)
        a = compute_ranks(vals, tie_seed=1).sigma
        b = compute_ranks(vals, tie_seed=2).sigma
        assert np.array_equal(a, b)

    def test_tie_assignment_deterministic_given_seed(self):
        vals = [1.0, 1.0, 2.0, 2.0, 2.0]
        a = compute_ranks(vals, tie_seed=7).sigma
        b = compute_ranks(vals, tie_seed=7).sigma
        assert np.array_equal(a, b)

    def test_ties_reach_every_assignment(self):
        seen = set()
        for seed in range(40):
            seen.add(tuple(compute_ranks([1.0, 1.0], tie_seed=seed).sigma.tolist()))
        assert seen == {(1, 2), (2, 1)}

    def test_non_finite_rejected(self):
        with pytest.raises(InputError):
            compute_ranks([1.0, np.nan], tie_seed=0)


class TestQuantizeQ:
    def test_uniform_levels(self):
        vals = quantize_q(UniformDist(0, 1), 4)
        assert np.allclose(vals, [0.125, 0.375, 0.625, 0.875], atol=1e-12)

    def test_normal_two_members(self):
        vals = quantize_q(NormalDist(0, 1), 2)
        assert vals[0] == pytest.approx(-STD_NORMAL_Q75, abs=1e-9)
        assert vals[1] == pytest.approx(STD_NORMAL_Q75, abs=1e-9)

    def test_single_member_is_median(self):
        mix = NormalMixtureDist([(0.5, NormalDist(-1, 1)), (0.5, NormalDist(3, 2))])
        assert quantize_q(mix, 1)[0] == pytest.approx(float(mix.quantile(0.5)), abs=1e-9)

    def test_nondecreasing(self):
        mix = NormalMixtureDist([(0.7, NormalDist(0, 0.3)), (0.3, NormalDist(5, 2))])
        vals = quantize_q(mix, 50)
        assert np.all(np.diff(vals) >= 0.0)


class TestQuantizeR:
    def test_forced_uniform_gives_medians(self):
        dist = NormalDist(1.0, 2.0)
        vals = quantize_r(dist, 5, ForcedRng(0.5))
        assert np.allclose(vals, 1.0, atol=1e-12)

    def test_deterministic_given_seed(self):
        dist = NormalDist(0, 1)
        assert np.array_equal(quantize_r(dist, 20, 42), quantize_r(dist, 20, 42))

    def test_pooled_draws_match_target_law(self):
        dist = NormalDist(0, 1)
        pooled = np.concatenate([quantize_r(dist, 1000, seed) for seed in range(100)])
        ks = stats.kstest(pooled, special.ndtr).statistic
        assert ks < 0.01


class TestQuantizeT:
    def test_affine_case(self):
        # raw margin with mean 1 and variance 4 (divisor M)
        raw = np.array([-1.0, 3.0])
        vals = quantize_t(NormalDist(0, 1), raw)
        assert vals[1] == pytest.approx(1.0, abs=1e-12)
        assert vals[0] == pytest.approx(-1.0, abs=1e-12)

    def test_identity_when_target_equals_smoothing(self):
        rng = np.random.default_rng(3)
        raw = rng.normal(2.0, 1.5, size=30)
        target = NormalDist(float(raw.mean()), float(np.sqrt(raw.var())))
        vals = quantize_t(target, raw)
        assert np.allclose(vals, raw, atol=1e-9)

    def test_pearson_correlation_preserved(self):
        rng = np.random.default_rng(8)
        base = rng.normal(size=50)
        other = 0.8 * base + 0.6 * rng.normal(size=50)
        t1 = quantize_t(NormalDist(3.0, 0.5), base)
        t2 = quantize_t(NormalDist(-2.0, 2.5), other)
        before = np.corrcoef(base, other)[0, 1]
        after = np.corrcoef(t1, t2)[0, 1]
        assert after == pytest.approx(before, abs=1e-10)

    def test_zero_variance_rejected(self):
        with pytest.raises(DegenerateSmoothingError):
            quantize_t(NormalDist(0, 1), np.full(5, 2.0))

    def test_point_mass_target_unsupported(self):
        bg = BernoulliGammaMixtureDist(0.3, [(1.0, GammaDist(1.0, 0.5))])
        with pytest.raises(UnsupportedSchemeError):
            quantize_t(bg, np.array([0.5, 1.0, 2.0]))


def quantized_from(values, valid_time="d0", scheme="q"):
    values = np.asarray(values, dtype=float)
    return QuantizedEnsemble(values, scheme, margins(values.shape[1]), valid_time)


class TestEccReorder:
    def test_by_construction_example(self):
        raw_col = np.array([2.9, 1.2, 2.1])
        perm = compute_ranks(raw_col, tie_seed=0)
        quantized = quantized_from(np.array([[10.0], [20.0], [30.0]]))
        out = ecc_reorder(quantized, [perm])
        assert out.values[:, 0].tolist() == [30.0, 10.0, 20.0]

    def test_identity_permutation_gives_sorted(self):
        from enscopula.coupling import MarginPermutation

        quantized = quantized_from(np.array([[3.0], [1.0], [2.0]]))
        out = ecc_reorder(quantized, [MarginPermutation(np.array([1, 2, 3]))])
        assert out.values[:, 0].tolist() == [1.0, 2.0, 3.0]

    def test_spearman_rank_correlation_preserved(self):
        rng = np.random.default_rng(5)
        for trial in range(20):
            raw_vals = rng.normal(size=(50, 5))
            raw = RawEnsemble(raw_vals, margins(5), f"d{trial}")
            dists = [NormalDist(rng.normal(), rng.uniform(0.5, 2)) for _ in range(5)]
            _, out = couple(raw, dists, "q", master_seed=trial)
            rho_raw = stats.spearmanr(raw_vals).statistic
            rho_out = stats.spearmanr(out.values).statistic
            assert np.array_equal(rho_raw, rho_out)

    def test_margin_multisets_preserved(self):
        rng = np.random.default_rng(6)
        raw = RawEnsemble(rng.normal(size=(20, 3)), margins(3), "d0")
        dists = [NormalDist(0, 1), NormalDist(2, 3), NormalDist(-1, 0.5)]
        quantized, out = couple(raw, dists, "r", master_seed=11)
        assert np.array_equal(np.sort(out.values, axis=0), np.sort(quantized.values, axis=0))

    def test_size_mismatch_rejected(self):
        quantized = quantized_from(np.random.default_rng(0).normal(size=(5, 2)))
        perms = [compute_ranks(np.arange(5.0)), compute_ranks(np.arange(4.0))]
        with pytest.raises(InputError):
            ecc_reorder(quantized, perms)

    def test_idempotent_on_own_empirical_quantization(self):
        # quantizing the raw margins' own empirical law and reordering by the
        # raw ranks reproduces the raw ensemble exactly
        rng = np.random.default_rng(9)
        raw_vals = rng.normal(size=(15, 4))
        raw = RawEnsemble(raw_vals, margins(4), "d0")
        dists = [EmpiricalDist(raw_vals[:, l]) for l in range(4)]
        _, out = couple(raw, dists, "q", master_seed=0)
        assert np.array_equal(out.values, raw_vals)


class TestSchaakeShuffle:
    def test_record_equal_to_raw_matches_ecc(self):
        rng = np.random.default_rng(10)
        raw_vals = rng.normal(size=(12, 3))
        raw = RawEnsemble(raw_vals, margins(3), "d0")
        dists = [NormalDist(0, 1) for _ in range(3)]
        record = HistoricalRecord(raw_vals.copy(), margins(3))
        _, via_ecc = couple(raw, dists, "q", master_seed=4)
        _, via_schaake = couple(raw, dists, "schaake", master_seed=4, record=record)
        assert np.array_equal(via_ecc.values, via_schaake.values)

    def test_comonotone_record_gives_comonotone_output(self):
        base = np.arange(10.0)
        record = HistoricalRecord(np.column_stack([base, 2 * base + 1]), margins(2))
        quantized = quantized_from(np.random.default_rng(1).normal(size=(10, 2)))
        out = schaake_shuffle(quantized, record, tie_seed=0)
        assert stats.spearmanr(out.values[:, 0], out.values[:, 1]).statistic == pytest.approx(1.0)

    def test_inherits_record_spearman_exactly(self):
        rng = np.random.default_rng(12)
        for trial in range(20):
            record_vals = rng.normal(size=(20, 4))
            record = HistoricalRecord(record_vals, margins(4))
            quantized = quantized_from(rng.normal(size=(20, 4)), valid_time=f"d{trial}")
            out = schaake_shuffle(quantized, record, tie_seed=trial)
            rho_rec = stats.spearmanr(record_vals).statistic
            rho_out = stats.spearmanr(out.values).statistic
            assert np.array_equal(rho_rec, rho_out)

    def test_size_mismatch_rejected(self):
        record = HistoricalRecord(np.random.default_rng(0).normal(size=(8, 2)), margins(2))
        quantized = quantized_from(np.random.default_rng(1).normal(size=(10, 2)))
        with pytest.raises(InputError):
            schaake_shuffle(quantized, record, tie_seed=0)


class TestEmpiricalCopula:
    def test_comonotone_pair(self):
        data = np.array([[1.0, 10.0], [2.0, 20.0]])
        assert empirical_copula_eval(data, (1, 1)) == pytest.approx(0.5)

    def test_full_box_is_one(self):
        data = np.array([[1.0, 10.0], [2.0, 20.0]])
        assert empirical_copula_eval(data, (2, 2)) == 1.0

    def test_antithetic_pair(self):
        data = np.array([[1.0, 20.0], [2.0, 10.0]])
        assert empirical_copula_eval(data, (1, 1)) == 0.0

    def test_zero_index_gives_zero(self):
        data = np.random.default_rng(0).normal(size=(6, 3))
        assert empirical_copula_eval(data, (0, 6, 6)) == 0.0

    def test_index_out_of_range(self):
        data = np.random.default_rng(0).normal(size=(6, 2))
        with pytest.raises(InputError):
            empirical_copula_eval(data, (7, 1))

    def test_ties_rejected(self):
        data = np.array([[1.0, 1.0], [1.0, 2.0]])
        with pytest.raises(InputError):
            empirical_copula_eval(data, (1, 1))

    def test_monotone_in_each_index(self):
        data = np.random.default_rng(3).normal(size=(8, 2))
        grid = np.array(
            [[empirical_copula_eval(data, (i, j)) for j in range(9)] for i in range(9)]
        )
        assert np.all(np.diff(grid, axis=0) >= 0.0)
        assert np.all(np.diff(grid, axis=1) >= 0.0)

    def test_two_increasing_property_on_all_boxes(self):
        # every 2x...x2 box has nonnegative copula volume (L <= 3, M <= 10)
        rng = np.random.default_rng(14)
        for ell in (2, 3):
            data = rng.normal(size=(10, ell))
            vals = np.empty((11,) * ell)
            for idx in np.ndindex(*vals.shape):
                vals[idx] = empirical_copula_eval(data, idx)
            for corner in np.ndindex(*(10,) * ell):
                box = vals[tuple(slice(c, c + 2) for c in corner)]
                signs = np.array([-1, 1])  # lower corner carries (-1)^(axes at lower)
                volume = box.copy()
                for axis in range(ell):
                    shape = [1] * ell
                    shape[axis] = 2
                    volume = volume * signs.reshape(shape)
                assert volume.sum() >= -1e-12


class TestDiscreteSklar:
    def test_zero_violation_on_random_tie_free(self):
        rng = np.random.default_rng(15)
        raw = RawEnsemble(rng.normal(size=(10, 2)), margins(2), "d0")
        report = verify_discrete_sklar(raw)
        assert report.max_violation == 0.0
        assert report.n_grid_points == 100
        assert report.passed

    def test_product_structure_counts(self):
        # independence-style grid: ranks form a full factorial in 2 margins
        data = np.array([[1.0, 10.0], [2.0, 30.0], [3.0, 20.0], [4.0, 40.0]])
        report = verify_discrete_sklar(data)
        assert report.max_violation == 0.0
        assert empirical_copula_eval(data, (2, 2)) == pytest.approx(0.25)

    def test_ecc_output_satisfies_identity_with_raw_copula(self):
        rng = np.random.default_rng(16)
        raw_vals = rng.normal(size=(12, 3))
        raw = RawEnsemble(raw_vals, margins(3), "d0")
        dists = [NormalDist(1.0, 2.0), NormalDist(-1.0, 0.5), NormalDist(0.0, 1.0)]
        _, out = couple(raw, dists, "q", master_seed=2)
        report = verify_ecc_sklar(raw, out)
        assert report.max_violation == 0.0

    def test_brute_force_scale_enforced(self):
        rng = np.random.default_rng(17)
        with pytest.raises(InputError):
            verify_discrete_sklar(rng.normal(size=(25, 2)))
        with pytest.raises(InputError):
            verify_discrete_sklar(rng.normal(size=(10, 5)))


class TestBatchCoupling:
    def test_deterministic_given_master_seed(self):
        rng = np.random.default_rng(18)
        raw = RawEnsemble(rng.normal(size=(10, 3)), margins(3), "d0")
        dists = [NormalDist(0, 1) for _ in range(3)]
        out1 = couple(raw, dists, "r", master_seed=5)[1].values
        out2 = couple(raw, dists, "r", master_seed=5)[1].values
        assert np.array_equal(out1, out2)

    def test_derive_seed_is_stable(self):
        assert derive_seed(1, 2) == derive_seed(1, 2)
        assert derive_seed(1, 2) != derive_seed(1, 3)
        assert derive_seed(1, 2, 0) != derive_seed(1, 2, 1)

    def test_shuffle_margins_preserves_multisets(self):
        rng = np.random.default_rng(19)
        quantized = quantized_from(rng.normal(size=(30, 4)))
        shuffled = shuffle_margins(quantized, seed=3)
        assert np.array_equal(np.sort(shuffled, axis=0), np.sort(quantized.values, axis=0))
        assert not np.array_equal(shuffled, quantized.values)

    def test_schaake_requires_record(self):
        rng = np.random.default_rng(20)
        raw = RawEnsemble(rng.normal(size=(6, 2)), margins(2), "d0")
        with pytest.raises(InputError):
            couple(raw, [NormalDist(0, 1), NormalDist(0, 1)], "schaake", 0)

    def test_provenance_recorded(self):
        rng = np.random.default_rng(21)
        raw = RawEnsemble(rng.normal(size=(6, 2)), margins(2), "d0")
        quantized, out = couple(raw, [NormalDist(0, 1), NormalDist(0, 1)], "q", 13)
        assert out.provenance["scheme"] == "q"
        assert out.provenance["raw"] == raw.ident
        assert out.provenance["quantized"] == quantized.ident
        assert out.provenance["master_seed"] == 13


class TestPrecipitationTies:
    def test_zero_heavy_margin_reorders_cleanly(self):
        # many raw members exactly zero: tie ranks randomized yet reproducible
        raw_col = np.array([0.0, 0.0, 0.0, 0.4, 1.2, 0.0, 2.0, 0.0])
        raw = RawEnsemble(
            np.column_stack([raw_col, np.arange(8.0)]),
            [MarginIndex("precip", "s00", 24), MarginIndex("temp", "s01", 24)],
            "d0",
        )
        bg = BernoulliGammaMixtureDist(0.5, [(1.0, GammaDist(1.0, 0.5))])
        dists = [bg, NormalDist(0, 1)]
        q1, out1 = couple(raw, dists, "q", master_seed=7)
        q2, out2 = couple(raw, dists, "q", master_seed=7)
        assert np.array_equal(out1.values, out2.values)
        # tied zero members receive the lowest quantized values in some order
        zero_positions = np.flatnonzero(raw_col == 0.0)
        sorted_q = np.sort(q1.values[:, 0])
        assert set(out1.values[zero_positions, 0]) == set(sorted_q[: len(zero_positions)])
