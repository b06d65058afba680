"""Waveform to mel-spectrogram image conversion.

Pipeline: Hann-windowed STFT -> power spectrum -> triangular mel filterbank
-> dB relative to the clip's loudest cell -> colormap -> 224x224 RGB image.
"""

import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .audio import CANONICAL_RATE, resample
from .colormap import TABLE
from .errors import ClipTooShort, DegenerateBand, MalformedHeader, NegativeFrequency, NonFiniteInput

IMAGE_SIZE = 224
IMAGE_CHANNELS = 3

TENSOR_MAGIC = b"MELT"
TENSOR_VERSION = 1


@dataclass(frozen=True)
class MelParams:
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 128
    f_min_hz: float = 0.0
    f_max_hz: float = 8000.0
    window: str = "hann"
    db_floor: float = -80.0

    def __post_init__(self):
        if self.n_fft <= 0 or self.hop <= 0:
            raise ValueError("n_fft and hop must be positive")
        if self.hop > self.n_fft:
            raise ValueError("hop must not exceed n_fft")
        if self.n_mels < 4:
            raise ValueError("n_mels must be at least 4")
        if not 0.0 <= self.f_min_hz < self.f_max_hz:
            raise ValueError("need 0 <= f_min_hz < f_max_hz")
        if self.window != "hann":
            raise ValueError("only the Hann window is supported")
        if not self.db_floor < 0.0:
            raise ValueError("db_floor must be negative")

    def check_rate(self, sample_rate_hz):
        if self.f_max_hz > sample_rate_hz / 2:
            raise ValueError(f"f_max_hz {self.f_max_hz} above Nyquist of {sample_rate_hz} Hz")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def hz_to_mel(f):
    """HTK mel scale, ``2595 * log10(1 + f / 700)``."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise NegativeFrequency(f"negative frequency {f[f < 0].min() if f.ndim else float(f)}")
    m = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(m) if m.ndim == 0 else m


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(f) if f.ndim == 0 else f


def fft_frequencies(n_fft, sample_rate_hz):
    return np.arange(n_fft // 2 + 1) * (sample_rate_hz / n_fft)


def mel_center_frequencies(params):
    """Hz positions of the ``n_mels + 2`` filter edge/peak points."""
    mels = np.linspace(hz_to_mel(params.f_min_hz), hz_to_mel(params.f_max_hz), params.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(params, sample_rate_hz=CANONICAL_RATE):
    """Triangular filters, one per row, each peak-normalized to 1.0."""
    params.check_rate(sample_rate_hz)
    n_bins = params.n_fft // 2 + 1
    if n_bins < params.n_mels:
        raise DegenerateBand(f"{n_bins} FFT bins cannot support {params.n_mels} mel filters")
    freqs = fft_frequencies(params.n_fft, sample_rate_hz)
    pts = mel_center_frequencies(params)
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    peaks = fb.max(axis=1)
    if np.any(peaks <= 0.0):
        bad = int(np.argmin(peaks))
        raise DegenerateBand(f"mel filter {bad} covers no FFT bin")
    return fb / peaks[:, None]


def hann_window(n):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(x, n_fft, hop):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < n_fft:
        raise ClipTooShort(f"{x.shape[0]} samples < n_fft={n_fft}")
    n_frames = 1 + (x.shape[0] - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft(x, n_fft, hop):
    """One-sided STFT of Hann-windowed frames, shape ``[n_frames, n_fft//2+1]``."""
    frames = frame_signal(x, n_fft, hop) * hann_window(n_fft)[None, :]
    return np.fft.rfft(frames, axis=1)


def power_spectrogram(x, params):
    return np.abs(stft(x, params.n_fft, params.hop)) ** 2


def mel_power(clip, params):
    """Mel-projected power, ``[n_mels, n_frames]``."""
    fb = mel_filterbank(params, clip.sample_rate_hz)
    return fb @ power_spectrogram(clip.samples, params).T


def power_to_db(p, db_floor):
    """dB relative to the maximum cell, clamped to ``[db_floor, 0]``."""
    p_max = float(p.max()) if p.size else 0.0
    if p_max <= 0.0:
        return np.full(p.shape, float(db_floor))
    ratio = np.maximum(p / p_max, 10.0 ** (db_floor / 10.0))
    return np.clip(10.0 * np.log10(ratio), db_floor, 0.0)


def mel_spectrogram(clip, params=MelParams()):
    return power_to_db(mel_power(clip, params), params.db_floor)


def colormap_indices(mel_db, db_floor):
    norm = (np.asarray(mel_db, dtype=np.float64) - db_floor) / (0.0 - db_floor)
    return np.rint(np.clip(norm, 0.0, 1.0) * 255.0).astype(np.intp)


def render_image(mel_db, params=MelParams()):
    """Colour and resize a dB matrix into a ``224x224x3`` float32 image.

    Low mel bands end up at the bottom row, as in a conventional plot.
    """
    mel_db = np.asarray(mel_db, dtype=np.float64)
    if mel_db.ndim != 2 or mel_db.size == 0:
        raise ValueError("mel_db must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(mel_db)):
        raise NonFiniteInput("mel_db contains NaN or inf")
    if mel_db.min() < params.db_floor - 1e-9 or mel_db.max() > 1e-9:
        raise ValueError("mel_db outside [db_floor, 0]")
    rgb = TABLE[colormap_indices(mel_db[::-1], params.db_floor)].astype(np.float64) / 255.0
    img = kernels.bilinear_resize(rgb, IMAGE_SIZE, IMAGE_SIZE)
    return img.astype(np.float32)


def featurize(clip, params=MelParams(), sample_rate_hz=CANONICAL_RATE):
    """Full clip -> image path, resampling to the canonical rate first."""
    if clip.sample_rate_hz != sample_rate_hz:
        clip = resample(clip, sample_rate_hz)
    return render_image(mel_spectrogram(clip, params), params)


def check_image(img):
    img = np.asarray(img)
    if img.shape != (IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS):
        raise ValueError(f"image shape {img.shape} is not {(IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS)}")
    if not (np.all(np.isfinite(img)) and img.min() >= 0.0 and img.max() <= 1.0):
        raise ValueError("image pixels must lie in [0, 1]")
    return img


def tensor_bytes(img):
    img = np.asarray(img, dtype="<f4")
    if img.ndim != 3:
        raise ValueError("expected an H x W x C array")
    header = TENSOR_MAGIC + struct.pack("<IIII", TENSOR_VERSION, *img.shape)
    return header + img.tobytes()


def tensor_from_bytes(data):
    if data[:4] != TENSOR_MAGIC:
        raise MalformedHeader("not a MELT tensor file")
    version, h, w, c = struct.unpack_from("<IIII", data, 4)
    if version != TENSOR_VERSION:
        raise MalformedHeader(f"MELT version {version} unsupported")
    n = h * w * c
    body = data[20:]
    if len(body) != 4 * n:
        raise MalformedHeader(f"MELT payload has {len(body)} bytes, expected {4 * n}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)


def write_tensor(img, path):
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(img))


def read_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def write_png(img, path):
    from PIL import Image

    q = np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG")


def frame_count(n_samples, params):
    return 1 + (n_samples - params.n_fft) // params.hop if n_samples >= params.n_fft else 0

