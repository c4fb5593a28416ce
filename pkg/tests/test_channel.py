import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedwire import channel as ch
from fedwire.channel import ChannelParams

import oracles


def unit_snr_params(bits=1000, bandwidth=1000.0):
    # PT * gain == k_B T B gives SNR exactly 1
    noise = ch.BOLTZMANN * 290.0 * bandwidth
    return ChannelParams(bandwidth_hz=bandwidth, transmit_power_w=noise, packet_bits=bits)


class TestParams:
    def test_defaults_are_experiment_values(self):
        p = ChannelParams()
        assert (p.bandwidth_hz, p.transmit_power_w, p.packet_bits) == (10e6, 0.72, 1000)
        assert p.deterministic_gain

    @pytest.mark.parametrize("field,value", [
        ("bandwidth_hz", 0.0), ("transmit_power_w", -1.0), ("packet_bits", 0), ("packet_bits", 1.5),
        ("per", 1.0), ("per", -0.1), ("path_loss_exponent", 1.9), ("shadowing_sigma_db", -1.0),
        ("fading_m", 0.0), ("distance_m", float("nan")), ("noise_temp_k", float("inf")),
    ])
    def test_rejects_invalid(self, field, value):
        with pytest.raises(ch.ChannelError):
            ChannelParams(**{field: value})

    def test_dict_round_trip(self):
        p = ChannelParams(per=0.2, fading=True, fading_m=2.0, distance_m=7.0)
        assert ChannelParams.from_dict(p.to_dict()) == p

    def test_unknown_key_rejected(self):
        with pytest.raises(ch.ChannelError, match="bogus"):
            ChannelParams.from_dict({"bogus": 1})


class TestGain:
    def test_all_randomness_off_unit_gain(self):
        rng = np.random.default_rng(0)
        assert ch.sample_gain(ChannelParams(), rng) == 1.0

    def test_square_law_at_twice_reference(self):
        p = ChannelParams(distance_m=2.0, reference_distance_m=1.0)
        assert ch.sample_gain(p, np.random.default_rng(0)) == 0.25

    def test_distance_below_reference_is_clamped(self):
        p = ChannelParams(distance_m=0.1, reference_distance_m=1.0)
        assert p.path_gain() == 1.0

    def test_disabled_factors_draw_nothing(self):
        rng = np.random.default_rng(5)
        state = rng.bit_generator.state
        ch.sample_gain(ChannelParams(distance_m=3.0), rng)
        assert rng.bit_generator.state == state

    def test_shadowed_mean(self):
        p = ChannelParams(path_loss_exponent=2.5, distance_m=3.0, reference_distance_m=1.0,
                          shadowing_sigma_db=2.0, fading=True, fading_m=1.0)
        g = ch.sample_gains(p, np.random.default_rng(42), 1_000_000)
        expected = (1 / 3) ** 2.5 * oracles.lognormal_mean_factor(2.0)
        assert expected == pytest.approx(oracles.SHADOWED_MEAN_GAIN, rel=1e-14)
        assert g.mean() == pytest.approx(expected, rel=0.01)

    def test_fading_has_unit_mean_and_gamma_variance(self):
        p = ChannelParams(fading=True, fading_m=4.0)
        g = ch.sample_gains(p, np.random.default_rng(1), 400_000)
        assert g.mean() == pytest.approx(1.0, abs=0.005)
        assert g.var() == pytest.approx(1 / 4.0, rel=0.02)

    def test_scalar_and_vector_draws_agree(self):
        p = ChannelParams(shadowing_sigma_db=3.0, fading=True, fading_m=2.0)
        a, b = np.random.default_rng(9), np.random.default_rng(9)
        # vector draws all shadowing first, so compare single-element batches
        for _ in range(20):
            assert ch.sample_gain(p, a) == ch.sample_gains(p, b, 1)[0]


class TestLatency:
    def test_unit_snr(self):
        p = unit_snr_params()
        assert ch.shannon_latency(p, 1.0) == pytest.approx(1.0, rel=1e-12)

    def test_snr_1023(self):
        noise = ch.BOLTZMANN * 290.0 * 1e7
        p = ChannelParams(bandwidth_hz=1e7, transmit_power_w=1023 * noise)
        assert ch.shannon_latency(p, 1.0) == pytest.approx(1e-5, rel=1e-12)

    def test_picocell_golden(self):
        p = ChannelParams(transmit_power_w=0.01, path_loss_exponent=2.5, distance_m=20.0,
                          reference_distance_m=3.5)
        assert p.path_gain() == pytest.approx(oracles.PICOCELL_GAIN, rel=1e-15)
        assert ch.shannon_latency(p, p.path_gain()) == pytest.approx(oracles.PICOCELL_LATENCY_S, rel=1e-9)

    def test_matches_oracle(self):
        p = ChannelParams(bandwidth_hz=2e6, transmit_power_w=0.1, packet_bits=4096)
        want = oracles.shannon_latency(4096, 2e6, 0.1, 1e-9)
        assert ch.shannon_latency(p, 1e-9) == pytest.approx(want, rel=1e-12)

    def test_degenerate_snr(self):
        with pytest.raises(ch.DegenerateSNRError):
            ch.shannon_latency(ChannelParams(), 1e-300)

    def test_vectorised_agrees(self):
        p = ChannelParams()
        gains = np.array([0.5, 1.0, 2.0])
        np.testing.assert_array_equal(ch.shannon_latencies(p, gains), [ch.shannon_latency(p, g) for g in gains])

    def test_power_for_latency_inverts(self):
        p = ChannelParams(distance_m=5.0)
        q = ch.with_latency(p, 0.6)
        assert ch.shannon_latency(q, q.path_gain()) == pytest.approx(0.6, rel=1e-12)


class TestRetransmissions:
    def test_per_zero(self):
        rng = np.random.default_rng(0)
        assert all(ch.sample_retransmissions(0.0, rng) == 1 for _ in range(100))

    def test_mean_at_half(self):
        s = ch.sample_retransmissions_many(0.5, np.random.default_rng(3), 1_000_000)
        assert s.min() >= 1
        assert s.mean() == pytest.approx(2.0, abs=0.01)

    def test_tail_at_small_per(self):
        s = ch.sample_retransmissions_many(1e-4, np.random.default_rng(4), 10_000_000)
        assert np.mean(s > 1) == pytest.approx(1e-4, abs=3e-5)

    def test_pmf_shape(self):
        s = ch.sample_retransmissions_many(0.3, np.random.default_rng(8), 500_000)
        for k in (1, 2, 3, 4):
            assert np.mean(s == k) == pytest.approx(0.3 ** (k - 1) * 0.7, abs=3e-3)

    def test_scalar_matches_vector(self):
        a, b = np.random.default_rng(2), np.random.default_rng(2)
        assert [ch.sample_retransmissions(0.4, a) for _ in range(50)] == ch.sample_retransmissions_many(0.4, b, 50).tolist()

    @given(st.floats(0.0, 0.99), st.floats(0.0, 0.99), st.integers(0, 2**32 - 1))
    def test_monotone_coupling_in_per(self, p1, p2, seed):
        lo, hi = sorted((p1, p2))
        if lo == 0.0:
            return  # per=0 consumes no draws, so the streams are not coupled
        a = ch.sample_retransmissions_many(lo, np.random.default_rng(seed), 64)
        b = ch.sample_retransmissions_many(hi, np.random.default_rng(seed), 64)
        assert np.all(a <= b)

    def test_rejects_per_one(self):
        with pytest.raises(ch.ChannelError):
            ch.sample_retransmissions(1.0, np.random.default_rng(0))


class TestLink:
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.9))
    def test_total_time_is_product(self, seed, per):
        p = ChannelParams(per=per, shadowing_sigma_db=4.0, fading=True)
        s = ch.sample_link(p, np.random.default_rng(seed))
        assert s.total_time_s == s.single_latency_s * s.retransmissions
        assert s.retransmissions >= 1 and s.gain > 0

    def test_reproducible(self):
        p = ChannelParams(per=0.3, shadowing_sigma_db=4.0, fading=True)
        a = [ch.sample_link(p, np.random.default_rng(11)) for _ in range(3)]
        assert a[0] == a[1] == a[2]


class TestPacketLoss:
    def deterministic(self, latency, per=0.0):
        return ch.with_latency(ChannelParams(per=per), latency)

    def test_fast_link_never_lost(self):
        assert ch.packet_loss_prob(self.deterministic(0.5), 1.0, 10, np.random.default_rng(0)) == 0.0

    def test_slow_link_always_lost(self):
        assert ch.packet_loss_prob(self.deterministic(2.0), 1.0, 10, np.random.default_rng(0)) == 1.0

    def test_loss_is_retransmission_probability(self):
        p = self.deterministic(0.6, per=0.5)
        assert ch.packet_loss_prob(p, 1.0, 100_000, np.random.default_rng(1)) == pytest.approx(0.5, abs=0.01)

    def test_rejects_zero_samples(self):
        with pytest.raises(ValueError):
            ch.packet_loss_prob(ChannelParams(), 1.0, 0, np.random.default_rng(0))

    @given(st.floats(1e-7, 1e-4), st.floats(1e-7, 1e-4), st.floats(0.0, 0.8))
    def test_monotone_in_window(self, e1, e2, per):
        lo, hi = sorted((e1, e2))
        p = ChannelParams(per=per, distance_m=10.0)
        a = ch.packet_loss_prob(p, lo, 2000, np.random.default_rng(7))
        b = ch.packet_loss_prob(p, hi, 2000, np.random.default_rng(7))
        assert b <= a

    @given(st.floats(1e-3, 1.0), st.floats(1e-3, 1.0), st.floats(0.0, 0.8))
    def test_monotone_in_power(self, w1, w2, per):
        lo, hi = sorted((w1, w2))
        base = dict(per=per, distance_m=100.0, path_loss_exponent=3.5)
        eps = 2.5e-6
        a = ch.packet_loss_prob(ChannelParams(transmit_power_w=lo, **base), eps, 2000, np.random.default_rng(3))
        b = ch.packet_loss_prob(ChannelParams(transmit_power_w=hi, **base), eps, 2000, np.random.default_rng(3))
        assert b <= a


class TestResponsePmf:
    def test_empty(self):
        np.testing.assert_array_equal(ch.response_pmf_heterogeneous([]).probs, [1.0])

    def test_fair_coins(self):
        np.testing.assert_array_equal(ch.response_pmf_heterogeneous([0.5, 0.5]).probs, [0.25, 0.5, 0.25])

    def test_three_clients_against_enumeration(self):
        got = ch.response_pmf_heterogeneous([0.9, 0.8, 0.5]).probs
        want = oracles.subset_pmf([0.9, 0.8, 0.5])
        assert np.max(np.abs(got - want)) <= 1e-15

    @given(st.lists(st.floats(0.0, 1.0), max_size=12))
    def test_enumeration_property(self, probs):
        got = ch.response_pmf_heterogeneous(probs).probs
        assert np.max(np.abs(got - oracles.subset_pmf(probs))) < 1e-14

    @pytest.mark.parametrize("bad", [[-0.1], [1.1], [float("nan")]])
    def test_out_of_range(self, bad):
        with pytest.raises(ch.ProbabilityRangeError):
            ch.response_pmf_heterogeneous(bad)

    def test_homogeneous_examples(self):
        np.testing.assert_array_equal(ch.response_pmf_homogeneous(1, 0.0).probs, [1.0, 0.0])
        np.testing.assert_allclose(ch.response_pmf_homogeneous(2, 0.5).probs, [0.25, 0.5, 0.25], atol=1e-16)

    def test_homogeneous_matches_dp(self):
        a = ch.response_pmf_homogeneous(10, 0.3).probs
        b = ch.response_pmf_heterogeneous([0.3] * 10).probs
        assert np.max(np.abs(a - b)) < 1e-12

    @given(st.integers(0, 50), st.floats(0.0, 1.0))
    def test_binomial_reduction_and_mean(self, n, r):
        hom = ch.response_pmf_homogeneous(n, r)
        het = ch.response_pmf_heterogeneous([r] * n)
        assert np.max(np.abs(hom.probs - het.probs)) <= 1e-12
        assert hom.mean() == pytest.approx(n * r, abs=1e-10)
        assert np.all(hom.probs >= 0) and abs(math.fsum(hom.probs) - 1) <= 1e-12

    def test_expected_responses(self):
        assert ch.expected_responses(100, 1.0) == 100
        assert ch.expected_responses(0, 0.7) == 0
        assert ch.expected_responses(10, 0.3) == pytest.approx(3.0)
        assert ch.response_pmf_homogeneous(10, 0.3).mean() == pytest.approx(3.0, abs=1e-12)

    def test_pmf_validation(self):
        with pytest.raises(ch.ProbabilityRangeError):
            ch.ResponsePmf(np.array([0.5, 0.6]))
