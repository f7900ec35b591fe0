"""Compressor definitions, exact error identities, and the Markov sequence."""

import itertools

import numpy as np
import pytest

from cdadam.compress import (
    CompressedMessage,
    CompressorSpec,
    MarkovState,
    _sparse_message,
    compress,
    compression_error_sq,
    index_bits,
    markov_step,
    measured_pi,
)


def scaled_sign_error_identity(x):
    """Closed-form squared error (1 - ||x||_1^2 / (d ||x||_2^2)) ||x||_2^2."""
    d = len(x)
    return float(x @ x) - np.abs(x).sum() ** 2 / d


class TestScaledSign:
    def test_hand_example(self):
        x = np.array([2.0, -1.0, 1.0])
        decoded = compress(CompressorSpec("scaled_sign"), x).decode()
        np.testing.assert_allclose(decoded, [4 / 3, -4 / 3, 4 / 3], rtol=1e-15)
        assert compression_error_sq(CompressorSpec("scaled_sign"), x) == pytest.approx(2 / 3, rel=1e-12)

    def test_equal_magnitudes_lossless(self):
        x = np.array([0.7, -0.7, 0.7, 0.7])
        spec = CompressorSpec("scaled_sign")
        np.testing.assert_allclose(compress(spec, x).decode(), x, atol=1e-15)
        assert compression_error_sq(spec, x) <= 1e-28

    def test_error_identity_many_dims(self):
        spec = CompressorSpec("scaled_sign")
        rng = np.random.default_rng(42)
        for d in (3, 50, 300):
            for _ in range(200):
                x = rng.standard_normal(d)
                got = compression_error_sq(spec, x)
                want = scaled_sign_error_identity(x)
                assert got == pytest.approx(want, rel=1e-9)

    def test_zero_vector(self):
        spec = CompressorSpec("scaled_sign")
        np.testing.assert_array_equal(compress(spec, np.zeros(4)).decode(), np.zeros(4))
        assert measured_pi(spec, np.zeros(4)) == 0.0

    def test_sign_of_zero_is_positive(self):
        msg = compress(CompressorSpec("scaled_sign"), np.array([0.0, -1.0]))
        assert msg.signs[0] == 1


class TestTopK:
    def test_largest_magnitude_kept(self):
        decoded = compress(CompressorSpec("top_k", 1), np.array([3.0, -5.0, 2.0])).decode()
        np.testing.assert_array_equal(decoded, [0.0, -5.0, 0.0])

    def test_full_retention(self):
        x = np.array([1.0, -2.0, 3.0])
        assert compression_error_sq(CompressorSpec("top_k", 3), x) == 0.0

    def test_ties_break_to_lowest_index(self):
        decoded = compress(CompressorSpec("top_k", 1), np.array([2.0, -2.0, 2.0])).decode()
        np.testing.assert_array_equal(decoded, [2.0, 0.0, 0.0])

    def test_contraction_bound(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            d = int(rng.integers(2, 30))
            k = int(rng.integers(1, d + 1))
            x = rng.standard_normal(d)
            pi = measured_pi(CompressorSpec("top_k", k), x)
            assert pi <= 1.0 - k / d + 1e-12

    def test_dominates_every_rand_k_subset(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            d = int(rng.integers(2, 7))
            k = int(rng.integers(1, d))
            x = rng.standard_normal(d)
            spec = CompressorSpec("top_k", k)
            top_err = compression_error_sq(spec, x)
            for subset in itertools.combinations(range(d), k):
                msg = _sparse_message(CompressorSpec("rand_k", k), x, np.array(subset))
                diff = msg.decode() - x
                assert top_err <= float(diff @ diff) + 1e-12


class TestRandK:
    def test_exhaustive_subset_mean_matches_closed_form(self):
        """Mean error over all C(d,k) subsets equals (1 - k/d) ||x||^2."""
        rng = np.random.default_rng(11)
        for d in range(2, 7):
            for k in range(1, d + 1):
                for _ in range(20):
                    x = rng.standard_normal(d)
                    x /= np.linalg.norm(x)
                    errors = []
                    for subset in itertools.combinations(range(d), k):
                        msg = _sparse_message(CompressorSpec("rand_k", k), x, np.array(subset))
                        diff = msg.decode() - x
                        errors.append(float(diff @ diff))
                    assert np.mean(errors) == pytest.approx(1.0 - k / d, abs=1e-12)

    def test_hand_expectation_d2(self):
        # x=[1,2], k=1: errors are 4 and 1 over the two draws, mean 2.5
        x = np.array([1.0, 2.0])
        errs = set()
        for seed in range(20):
            rng = np.random.default_rng(seed)
            errs.add(round(compression_error_sq(CompressorSpec("rand_k", 1), x, rng), 12))
        assert errs == {1.0, 4.0}

    def test_requires_rng(self):
        with pytest.raises(ValueError, match="rng"):
            compress(CompressorSpec("rand_k", 1), np.zeros(3))

    def test_contraction_in_expectation(self):
        spec = CompressorSpec("rand_k", 2)
        rng = np.random.default_rng(9)
        x = rng.standard_normal(6)
        draws = [compression_error_sq(spec, x, np.random.default_rng(s)) for s in range(4000)]
        want = (1 - 2 / 6) * float(x @ x)
        assert np.mean(draws) == pytest.approx(want, rel=0.05)


class TestIdentity:
    def test_exact_roundtrip(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(17)
        msg = compress(CompressorSpec("identity"), x)
        np.testing.assert_array_equal(msg.decode(), x)
        assert msg.bit_size == 32 * 17
        assert measured_pi(CompressorSpec("identity"), x) == 0.0


class TestBitSizes:
    def test_formulas(self):
        assert CompressorSpec("scaled_sign").message_bits(100) == 132
        assert CompressorSpec("identity").message_bits(100) == 3200
        assert CompressorSpec("top_k", 5).message_bits(100) == 5 * (32 + 7)
        assert CompressorSpec("rand_k", 1).message_bits(1) == 32

    def test_index_bits(self):
        assert [index_bits(d) for d in (1, 2, 3, 4, 5, 64, 100)] == [0, 1, 2, 2, 3, 6, 7]

    def test_messages_carry_their_bit_size(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(33)
        for spec in (CompressorSpec("scaled_sign"), CompressorSpec("identity"),
                     CompressorSpec("top_k", 4), CompressorSpec("rand_k", 4)):
            msg = compress(spec, x, np.random.default_rng(0))
            assert msg.bit_size == spec.message_bits(33)

    def test_k_validation(self):
        with pytest.raises(ValueError):
            CompressorSpec("top_k")
        with pytest.raises(ValueError):
            CompressorSpec("rand_k", 0)
        with pytest.raises(ValueError):
            CompressorSpec("identity", 3)
        with pytest.raises(ValueError):
            CompressorSpec("top_k", 9).check_dim(4)


class TestByteCodec:
    """The trace serialization is lossless: decode survives a byte round-trip."""

    @pytest.mark.parametrize("kind,k", [("scaled_sign", None), ("top_k", 3),
                                        ("rand_k", 3), ("identity", None)])
    def test_roundtrip(self, kind, k):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(19)
        msg = compress(CompressorSpec(kind, k), x, np.random.default_rng(1))
        back = CompressedMessage.from_bytes(msg.to_bytes())
        assert back.kind == msg.kind and back.d == msg.d and back.bit_size == msg.bit_size
        np.testing.assert_array_equal(back.decode(), msg.decode())

    def test_bitmap_is_little_endian(self):
        msg = compress(CompressorSpec("scaled_sign"), np.array([1.0, -1.0, 1.0]))
        blob = msg.to_bytes()
        # tag, d, scale, then one bitmap byte: bits 0 and 2 set -> 0b101
        assert blob[0] == 0
        assert blob[-1] == 0b101


class TestMarkovSequence:
    def test_identity_tracks_input_exactly(self):
        state = MarkovState.zeros(2)
        markov_step(state, CompressorSpec("identity"), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(state.reference, [1.0, 2.0])

    def test_first_step_equals_plain_compression(self):
        state = MarkovState.zeros(3)
        markov_step(state, CompressorSpec("scaled_sign"), np.array([2.0, -1.0, 1.0]))
        np.testing.assert_allclose(state.reference, [4 / 3, -4 / 3, 4 / 3], rtol=1e-15)

    def test_receiver_reconstructs_identical_reference(self):
        rng = np.random.default_rng(21)
        sender = MarkovState.zeros(8)
        receiver = MarkovState.zeros(8)
        for _ in range(50):
            msg, _ = markov_step(sender, CompressorSpec("top_k", 2), rng.standard_normal(8))
            receiver.apply(msg)
            np.testing.assert_array_equal(receiver.reference, sender.reference)

    def test_constant_input_contracts_per_step(self):
        """For constant input the per-step error obeys the exact per-vector
        scaled-sign identity, and the worst-case factor 1 - 1/d overall."""
        rng = np.random.default_rng(5)
        w = rng.standard_normal(6)
        spec = CompressorSpec("scaled_sign")
        state = MarkovState.zeros(6)
        prev_err = float(w @ w)
        for _ in range(200):
            v = w - state.reference
            predicted = scaled_sign_error_identity(v)
            markov_step(state, spec, w)
            err = float((state.reference - w) @ (state.reference - w))
            # abs floor: folding a ~sqrt(err) increment into the O(||w||)
            # reference rounds at eps * ||w||, which dominates once err is tiny
            assert err == pytest.approx(predicted, rel=1e-9, abs=1e-14 * float(w @ w))
            assert err <= (1 - 1 / 6) * prev_err + 1e-15
            prev_err = err
        assert prev_err < 1e-12

    def test_constant_input_top_k_geometric(self):
        w = np.array([5.0, -3.0, 2.0, 1.0, 0.5])
        spec = CompressorSpec("top_k", 2)
        state = MarkovState.zeros(5)
        prev = float(w @ w)
        for _ in range(60):
            markov_step(state, spec, w)
            err = float((state.reference - w) @ (state.reference - w))
            assert err <= (1 - 2 / 5) * prev + 1e-15
            prev = err
        assert prev < 1e-20

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            markov_step(MarkovState.zeros(3), CompressorSpec("identity"), np.zeros(4))


class TestAnalyticalPi:
    def test_values(self):
        assert CompressorSpec("identity").analytical_pi(10) == 0.0
        assert CompressorSpec("top_k", 2).analytical_pi(10) == pytest.approx(0.8)
        assert CompressorSpec("rand_k", 5).analytical_pi(10) == pytest.approx(0.5)
        assert CompressorSpec("scaled_sign").analytical_pi(10) == pytest.approx(0.9)

    def test_measured_never_exceeds_analytical(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            d = int(rng.integers(2, 40))
            x = rng.standard_normal(d)
            for spec in (CompressorSpec("scaled_sign"), CompressorSpec("identity"),
                         CompressorSpec("top_k", max(1, d // 3))):
                assert measured_pi(spec, x) <= spec.analytical_pi(d) + 1e-12
