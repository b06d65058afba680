"""WAV decoding, resampling and dataset manifests."""

import csv
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    DuplicatePath,
    EmptyAudio,
    MalformedHeader,
    MissingColumn,
    UnknownEmotionLabel,
    UnsupportedEncoding,
)

EMOTIONS = ("neutral", "happy", "sad", "angry")
EMOTION_INDEX = {name: i for i, name in enumerate(EMOTIONS)}
CANONICAL_RATE = 16000

MANIFEST_COLUMNS = ("path", "emotion", "speaker", "dataset")

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int
    source_path: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip samples must be mono (1-D)")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.samples.size and (np.abs(self.samples).max() > 1.0 or not np.all(np.isfinite(self.samples))):
            raise ValueError("samples must be finite and lie in [-1, 1]")

    @property
    def duration_s(self):
        return self.samples.shape[0] / self.sample_rate_hz


def _parse_chunks(data):
    if len(data) < 12 or data[:4] != b"RIFF":
        raise MalformedHeader("missing RIFF magic")
    if data[8:12] != b"WAVE":
        raise MalformedHeader("missing WAVE form type")
    riff_size = struct.unpack_from("<I", data, 4)[0]
    if riff_size + 8 > len(data) + 1:
        raise MalformedHeader(f"RIFF size {riff_size} exceeds file length {len(data)}")
    chunks = {}
    pos = 12
    end = min(len(data), riff_size + 8)
    while pos + 8 <= end:
        cid = data[pos:pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        body = pos + 8
        if body + size > len(data):
            raise MalformedHeader(f"chunk {cid!r} size {size} runs past end of file")
        chunks.setdefault(cid, data[body:body + size])
        pos = body + size + (size & 1)
    return chunks


def decode_wav_bytes(data, source_path=""):
    """Decode an in-memory RIFF/WAVE file into a mono :class:`AudioClip`."""
    chunks = _parse_chunks(data)
    fmt = chunks.get(b"fmt ")
    if fmt is None or len(fmt) < 16:
        raise MalformedHeader("missing or short fmt chunk")
    if b"data" not in chunks:
        raise MalformedHeader("missing data chunk")
    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == _FORMAT_EXTENSIBLE:
        if len(fmt) < 26:
            raise MalformedHeader("short WAVE_FORMAT_EXTENSIBLE fmt chunk")
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if tag == _FORMAT_PCM and bits in (16, 24):
        pass
    elif tag == _FORMAT_FLOAT and bits == 32:
        pass
    else:
        raise UnsupportedEncoding(f"format tag 0x{tag:04x} with {bits} bits per sample")
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{channels} channels")
    if rate == 0:
        raise MalformedHeader("sample rate is zero")
    width = bits // 8
    if block_align != width * channels:
        raise MalformedHeader(f"block align {block_align} inconsistent with {channels}x{bits} bits")

    raw = chunks[b"data"]
    n_frames = len(raw) // block_align
    if n_frames == 0:
        raise EmptyAudio(source_path or "<bytes>")
    raw = raw[:n_frames * block_align]
    if tag == _FORMAT_FLOAT:
        x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        x = np.clip(np.nan_to_num(x, nan=0.0), -1.0, 1.0)
    elif bits == 16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    else:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    x = x.reshape(n_frames, channels).mean(axis=1)
    return AudioClip(x, int(rate), source_path)


def decode_wav(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_wav_bytes(data, str(path))


def encode_wav_bytes(samples, sample_rate_hz, bits=16):
    """Encode samples (``[n]`` or ``[n, channels]``) as a RIFF/WAVE file.

    ``bits`` is 16 or 24 for integer PCM, or 32 for IEEE float.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if bits == 32:
        tag = _FORMAT_FLOAT
        payload = np.clip(x, -1.0, 1.0).astype("<f4").tobytes()
    elif bits in (16, 24):
        tag = _FORMAT_PCM
        scale = float(1 << (bits - 1))
        q = np.clip(np.round(x * scale), -scale, scale - 1).astype(np.int64)
        if bits == 16:
            payload = q.astype("<i2").tobytes()
        else:
            q = q.reshape(-1) & 0xFFFFFF
            payload = np.stack([q & 0xFF, (q >> 8) & 0xFF, (q >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    else:
        raise UnsupportedEncoding(f"cannot encode {bits}-bit audio")
    width = bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate_hz, sample_rate_hz * width * channels,
                      width * channels, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, samples, sample_rate_hz, bits=16):
    with open(path, "wb") as fh:
        fh.write(encode_wav_bytes(samples, sample_rate_hz, bits))


def resample(clip, target_rate_hz, n_zeros=16):
    """Band-limited resampling with a Blackman-windowed sinc kernel.

    The low-pass cutoff sits at the lower of the two Nyquist frequencies.
    Kernel weights are renormalized per output sample, which keeps DC exact
    at the clip edges. Results are clipped to [-1, 1]; for inputs whose
    band-limited reconstruction stays in range the operation is linear.
    """
    if target_rate_hz <= 0:
        raise ValueError("target_rate_hz must be positive")
    src = clip.sample_rate_hz
    if target_rate_hz == src:
        return AudioClip(clip.samples.copy(), src, clip.source_path)
    n_in = clip.samples.shape[0]
    n_out = max(1, int(round(n_in * target_rate_hz / src)))
    y = kernels.sinc_resample(clip.samples, src, target_rate_hz, n_out, n_zeros)
    return AudioClip(np.clip(y, -1.0, 1.0), int(target_rate_hz), clip.source_path)


def load_clip(path, target_rate_hz=CANONICAL_RATE):
    """Decode, downmix and bring a file to the canonical rate."""
    return resample(decode_wav(path), target_rate_hz)


@dataclass(frozen=True)
class ManifestEntry:
    clip_path: str
    emotion: str
    speaker_id: str
    dataset_tag: str

    @property
    def label(self):
        return EMOTION_INDEX[self.emotion]


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for e in self.entries:
            if e.emotion not in EMOTION_INDEX:
                raise UnknownEmotionLabel(e.emotion)
            if e.clip_path in seen:
                raise DuplicatePath(e.clip_path)
            seen.add(e.clip_path)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labels(self):
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def class_counts(self):
        counts = {name: 0 for name in EMOTIONS}
        for e in self.entries:
            counts[e.emotion] += 1
        return counts

    def tag_counts(self):
        counts = {}
        for e in self.entries:
            counts[e.dataset_tag] = counts.get(e.dataset_tag, 0) + 1
        return counts


def load_manifest(path):
    """Read a ``path,emotion,speaker,dataset`` CSV.

    Relative clip paths are resolved against the manifest's directory.
    """
    root = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in MANIFEST_COLUMNS:
            if col not in header:
                raise MissingColumn(f"{path}: missing column {col!r}")
        entries = []
        for row in reader:
            emotion = row["emotion"].strip().lower()
            if emotion not in EMOTION_INDEX:
                raise UnknownEmotionLabel(f"{path}: {row['emotion']!r}")
            clip = row["path"].strip()
            if not os.path.isabs(clip):
                clip = os.path.normpath(os.path.join(root, clip))
            entries.append(ManifestEntry(clip, emotion, row["speaker"].strip(), row["dataset"].strip()))
    return DatasetManifest(entries)


def write_manifest(manifest, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in manifest:
            w.writerow([e.clip_path, e.emotion, e.speaker_id, e.dataset_tag])


def synth_tone(freq_hz, duration_s, sample_rate_hz=CANONICAL_RATE, amplitude=0.5, phase=0.0):
    t = np.arange(int(math.ceil(duration_s * sample_rate_hz))) / sample_rate_hz
    return amplitude * np.sin(2.0 * np.pi * freq_hz * t + phase)
