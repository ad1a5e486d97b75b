import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from eendss import dsp
from eendss.dsp import FrameSequence, Subsample
from eendss.tensor import Tensor


class TestStftPower:
    def test_zero_signal(self):
        power = dsp.stft_power(np.zeros(2048))
        assert_array_equal(power.values, 0.0)

    @pytest.mark.parametrize("k", [5, 32, 100, 200])
    def test_bin_centre_tone(self, k):
        n = np.arange(4096)
        x = np.sin(2 * np.pi * k * n / 512)
        power = dsp.stft_power(x).values
        # periodic Hann puts 2/3 of a bin-centred tone in the centre bin and 1/6 in each neighbour
        direct = np.abs(np.fft.rfft(x[:512] * np.hanning(513)[:-1])) ** 2
        assert_allclose(power[0], direct, rtol=1e-10, atol=1e-10)
        assert np.all(power[:, k - 1:k + 2].sum(axis=1) / power.sum(axis=1) >= 0.9)
        assert np.all(power.argmax(axis=1) == k)
        assert_allclose(power[:, k] / power.sum(axis=1), 2 / 3, rtol=1e-3)

    def test_single_frame(self):
        assert dsp.stft_power(np.ones(512)).num_frames == 1
        assert dsp.num_frames(512, 512, 64) == 1

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        assert np.all(dsp.stft_power(rng.standard_normal(3000)).values >= 0)

    def test_too_short(self):
        with pytest.raises(ValueError, match="shorter than one frame"):
            dsp.stft_power(np.zeros(100))

    def test_frame_count_formula(self):
        for length in (512, 600, 8000, 16000):
            assert dsp.stft_power(np.zeros(length)).num_frames == (length - 512) // 64 + 1


class TestFrameCounts:
    def test_separation_frames(self):
        assert dsp.separation_frames(16) == 1
        assert dsp.separation_frames(8000) == 999

    def test_diarization_frames(self):
        assert dsp.diarization_frames(16000) == 1999 // 8

    @pytest.mark.parametrize("length", [520, 1000, 8000, 16000, 16063])
    def test_diarization_hop_bound(self, length):
        t_d = dsp.diarization_frames(length)
        assert t_d * 64 <= length < (t_d + 1) * 64 + 64


class TestLogMel:
    def test_zero_power_floor(self):
        power = FrameSequence(np.zeros((3, 257)), 64)
        assert_allclose(dsp.log_mel(power, 40).values, np.log(dsp.LOG_FLOOR))

    def test_filterbank_rows(self):
        fb = dsp.mel_filterbank(80, 512, 8000)
        assert fb.shape == (80, 257)
        assert np.all(fb.sum(axis=1) > 0)
        support = fb > 0
        assert all(np.any(support[i] & support[i + 1]) for i in range(40, 79))

    def test_white_noise_flat(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(512 + 99 * 64)
        mel = np.exp(dsp.log_mel(dsp.stft_power(x), 23).values).mean(axis=0)
        weights = dsp.mel_filterbank(23, 512, 8000).sum(axis=1)
        # normalised by filter area so a flat spectrum gives flat band energies
        per_bin = mel / weights
        assert per_bin.max() / per_bin.min() < 10

    def test_monotone_in_scale(self):
        rng = np.random.default_rng(2)
        power = dsp.stft_power(rng.standard_normal(2000))
        base = dsp.log_mel(power, 40).values
        louder = dsp.log_mel(FrameSequence(power.values * 3.0, 64), 40).values
        assert np.all(louder > base)

    def test_too_many_bands(self):
        with pytest.raises(ValueError):
            dsp.mel_filterbank(300, 512, 8000)


class TestLmfAlignment:
    def test_frame_count_and_hop(self):
        x = np.random.default_rng(0).standard_normal(16000)
        t_d = dsp.diarization_frames(x.size)
        seq = dsp.lmf_features(x, t_d, n_mels=40)
        assert seq.num_frames == t_d
        assert seq.frame_hop_samples == 64
        # encoder stride 8 times subsampling 8 equals the LMF hop
        assert 8 * 8 == seq.frame_hop_samples


class TestSubsample:
    def _frames(self, n):
        return FrameSequence(np.random.default_rng(n).standard_normal((n, 6)), 8)

    def test_sixty_four(self):
        sub = Subsample(6, 5, 8, np.random.default_rng(0))
        out = sub.frames(self._frames(64))
        assert out.num_frames == 8 and out.frame_hop_samples == 64 and out.dim == 5

    def test_floor(self):
        sub = Subsample(6, 5, 8, np.random.default_rng(0))
        assert sub.frames(self._frames(65)).num_frames == 8

    def test_too_short(self):
        sub = Subsample(6, 5, 8, np.random.default_rng(0))
        with pytest.raises(ValueError):
            sub.frames(self._frames(7))

    def test_groups_are_independent(self):
        sub = Subsample(3, 4, 8, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((1, 3, 16)).astype(np.float32)
        base = sub(Tensor(x)).data
        x[0, :, 12] += 1.0
        moved = sub(Tensor(x)).data
        assert_array_equal(base[0, 0], moved[0, 0])
        assert not np.array_equal(base[0, 1], moved[0, 1])


class TestFrameSequence:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            FrameSequence(np.array([[np.inf]]), 64)

    def test_rejects_bad_hop(self):
        with pytest.raises(ValueError):
            FrameSequence(np.zeros((1, 1)), 0)
