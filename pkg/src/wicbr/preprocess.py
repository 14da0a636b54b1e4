"""Recording -> network-input preprocessing.

Two parallel products per recording:
  * phase: antenna ratio (cancels the common random phase offset), angle,
    unwrap along time;
  * Doppler: per-subcarrier temporal mean removal, Hann-window STFT, power
    averaged over subcarriers, 121 bins spanning +/-60 Hz.
Both are rendered to 3x224x224 float images in [0, 1].
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .csi import CsiRecording

IMAGE_HW = 224
DOPPLER_HALF_BINS = 60  # bins -60..60 -> 121 total


class DegenerateRecordingError(Exception):
    """A recording cannot be ratio-repaired (a full subcarrier row is dead)."""


def csi_ratio(rec: CsiRecording, ant_a: int = 0, ant_b: int = 1, eps: float = 1e-9) -> np.ndarray:
    """Complex ratio H[:, ant_a, :] / H[:, ant_b, :], shape (S, T).

    The multiplicative unit-modulus offset is common to both antennas, so it
    cancels exactly. Entries where |denominator| < eps are replaced by the
    nearest (in time) valid ratio on the same subcarrier; a subcarrier with no
    valid entry at all raises DegenerateRecordingError.
    """
    n_ant = rec.samples.shape[1]
    if ant_a == ant_b:
        raise ValueError("ratio needs two distinct antennas")
    if not (0 <= ant_a < n_ant and 0 <= ant_b < n_ant):
        raise ValueError(f"antenna index out of range 0..{n_ant - 1}")
    num = rec.samples[:, ant_a, :]
    den = rec.samples[:, ant_b, :]
    bad = np.abs(den) < eps
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / np.where(bad, 1.0, den)
    if not bad.any():
        return ratio
    t_idx = np.arange(ratio.shape[1])
    for s in np.nonzero(bad.any(axis=1))[0]:
        valid = t_idx[~bad[s]]
        if valid.size == 0:
            raise DegenerateRecordingError(f"subcarrier {s}: antenna {ant_b} below {eps} for the whole recording")
        holes = t_idx[bad[s]]
        # nearest valid neighbor in time; ties resolve to the earlier sample
        pos = np.searchsorted(valid, holes)
        left = valid[np.clip(pos - 1, 0, valid.size - 1)]
        right = valid[np.clip(pos, 0, valid.size - 1)]
        nearest = np.where(np.abs(holes - left) <= np.abs(right - holes), left, right)
        ratio[s, holes] = ratio[s, nearest]
    return ratio


@dataclass(frozen=True)
class PhaseMatrix:
    """Unwrapped (or raw) ratio phase, shape (subcarriers, time); radians."""

    values: np.ndarray
    fs: float
    unwrapped: bool

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"phase matrix must be 2-D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("phase matrix contains non-finite values")


def phase_extract(ratio: np.ndarray, unwrap: bool = True, fs: float = 1000.0) -> PhaseMatrix:
    """Angle of the complex ratio, optionally unwrapped along the time axis."""
    if ratio.ndim != 2:
        raise ValueError(f"ratio must be 2-D (S, T), got {ratio.shape}")
    phase = np.angle(ratio)
    if unwrap:
        phase = np.unwrap(phase, axis=1)
    return PhaseMatrix(values=phase, fs=float(fs), unwrapped=unwrap)


@dataclass(frozen=True)
class StftConfig:
    """Short-time Fourier setup for the Doppler spectrogram.

    Defaults give 1 Hz bins at fs=1000 (fft_len=1000) and a Hann mainlobe
    narrow enough that a pure tone keeps >=80% of its energy within +/-2 bins
    (window 512; 256 is too short for that at this fs).
    """

    win: int = 512
    hop: int = 10
    fft_len: int = 1000
    antenna: int = 0
    subtract_mean: bool = True

    def __post_init__(self):
        if self.win < 2 or self.hop < 1 or self.fft_len < self.win:
            raise ValueError(f"bad stft config: win={self.win} hop={self.hop} fft_len={self.fft_len}")
        if self.fft_len < 2 * DOPPLER_HALF_BINS + 1:
            raise ValueError(f"fft_len must cover {2 * DOPPLER_HALF_BINS + 1} bins")


@dataclass(frozen=True)
class Spectrogram:
    """Doppler power, shape (121, frames); bin k maps to (k-60)*fs/fft_len Hz."""

    power: np.ndarray
    bin_hz: np.ndarray
    frame_times: np.ndarray

    def __post_init__(self):
        if self.power.ndim != 2 or self.power.shape[0] != 2 * DOPPLER_HALF_BINS + 1:
            raise ValueError(f"power must be ({2 * DOPPLER_HALF_BINS + 1}, frames), got {self.power.shape}")
        if np.any(self.power < 0):
            raise ValueError("power must be non-negative")
        if self.bin_hz.shape != (self.power.shape[0],) or np.any(np.diff(self.bin_hz) <= 0):
            raise ValueError("bin frequencies must be strictly increasing")


def dfs_spectrogram(rec: CsiRecording, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Doppler spectrogram of one antenna, power averaged over subcarriers.

    Per-subcarrier temporal mean removal suppresses the static (zero-Doppler)
    component before the STFT. Negative frequencies come from the upper half
    of the FFT. Warns when more than 20% of total spectral energy falls
    outside the +/-60-bin band.
    """
    if not (0 <= cfg.antenna < rec.samples.shape[1]):
        raise ValueError(f"antenna {cfg.antenna} out of range")
    x = rec.samples[:, cfg.antenna, :]
    n_t = x.shape[1]
    if cfg.win > n_t:
        raise ValueError(f"window {cfg.win} longer than recording ({n_t} samples)")
    if cfg.subtract_mean:
        x = x - x.mean(axis=1, keepdims=True)

    starts = np.arange(0, n_t - cfg.win + 1, cfg.hop)
    window = np.hanning(cfg.win)
    frames = x[:, starts[:, None] + np.arange(cfg.win)[None, :]]  # (S, F, win)
    spec = np.fft.fft(frames * window[None, None, :], n=cfg.fft_len, axis=-1)
    power_full = (spec.real**2 + spec.imag**2).mean(axis=0)  # (F, fft_len)

    offsets = np.arange(-DOPPLER_HALF_BINS, DOPPLER_HALF_BINS + 1)
    power = power_full[:, offsets % cfg.fft_len].T  # (121, F)

    total = float(power_full.sum())
    in_band = float(power.sum())
    if total > 0 and (total - in_band) / total > 0.2:
        warnings.warn(
            f"{(total - in_band) / total:.0%} of spectral energy outside the +/-{DOPPLER_HALF_BINS} bin band",
            stacklevel=2,
        )

    bin_hz = offsets * (rec.fs / cfg.fft_len)
    frame_times = (starts + cfg.win / 2) / rec.fs
    return Spectrogram(power=np.ascontiguousarray(power), bin_hz=bin_hz.astype(np.float64), frame_times=frame_times)


# ---------------------------------------------------------------------------
# image rendering


def _bilinear_resample(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resample of a 2-D array."""
    h, w = src.shape
    if h == 1 and w == 1:
        return np.full((out_h, out_w), src[0, 0], dtype=np.float64)
    ys = np.linspace(0.0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def render_matrix(matrix: np.ndarray, out_hw: int = IMAGE_HW) -> np.ndarray:
    """Resample a 2-D matrix to out_hw^2, min-max normalize, replicate to 3 channels.

    Resampling happens before normalization so the output always spans the
    full [0, 1] range (bilinear downsampling can clip extrema). A constant
    matrix renders as all 0.5.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite values")
    if out_hw < 1:
        raise ValueError("output size must be positive")
    resampled = _bilinear_resample(m, out_hw, out_hw)
    lo = float(resampled.min())
    hi = float(resampled.max())
    span = hi - lo
    if span <= 1e-12 * max(1.0, abs(hi), abs(lo)):
        plane = np.full((out_hw, out_hw), 0.5)
    else:
        plane = (resampled - lo) / span
    return np.broadcast_to(plane, (3, out_hw, out_hw)).copy()


def render_image(matrix, out_hw: int = IMAGE_HW) -> np.ndarray:
    """Render a phase matrix, spectrogram, or raw 2-D array to a 3xHWxHW image."""
    if isinstance(matrix, PhaseMatrix):
        matrix = matrix.values
    elif isinstance(matrix, Spectrogram):
        matrix = matrix.power
    return render_matrix(matrix, out_hw)


def log_power(spec: Spectrogram, floor_rel: float = 1e-8) -> np.ndarray:
    """Log-compressed spectrogram power; floor is relative to the peak.

    Without compression the bins next to DC dominate the min-max range and
    the rendered image loses the class structure.
    """
    p = spec.power
    peak = float(p.max())
    if peak <= 0:
        return np.zeros_like(p)
    return np.log10(p + floor_rel * peak)


def sample_images(
    rec: CsiRecording,
    stft: StftConfig = StftConfig(),
    unwrap: bool = True,
    out_hw: int = IMAGE_HW,
    ant_a: int = 0,
    ant_b: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Full preprocessing of one recording: (phase image, Doppler image)."""
    ratio = csi_ratio(rec, ant_a=ant_a, ant_b=ant_b)
    phase = phase_extract(ratio, unwrap=unwrap, fs=rec.fs)
    spec = dfs_spectrogram(rec, stft)
    return render_image(phase, out_hw), render_matrix(log_power(spec), out_hw)


# ---------------------------------------------------------------------------
# file formats


def write_image(path, img: np.ndarray) -> None:
    """Raw image dump: float32 little-endian, C order, shape (3, H, W), no header."""
    if img.ndim != 3 or img.shape[0] != 3 or img.shape[1] != img.shape[2]:
        raise ValueError(f"expected (3, H, H) image, got {img.shape}")
    Path(path).write_bytes(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_image(path, out_hw: int = IMAGE_HW) -> np.ndarray:
    data = Path(path).read_bytes()
    expected = 3 * out_hw * out_hw * 4
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for a 3x{out_hw}x{out_hw} image, got {len(data)}")
    return np.frombuffer(data, dtype="<f4").reshape(3, out_hw, out_hw).astype(np.float64)


def write_png(path, img: np.ndarray) -> None:
    """8-bit preview of a [0, 1] image (channels-last for the encoder)."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


_DFS_MAGIC = b"DFS1"


def write_dfs(path, power_stack: np.ndarray, fs: float) -> None:
    """Spectrogram container: magic "DFS1", u32 receivers/bins/frames, f64 fs,
    float32 power in receiver-major C order."""
    p = np.asarray(power_stack, dtype=np.float64)
    if p.ndim == 2:
        p = p[None]
    if p.ndim != 3 or p.shape[1] != 2 * DOPPLER_HALF_BINS + 1:
        raise ValueError(f"expected (receivers, {2 * DOPPLER_HALF_BINS + 1}, frames), got {power_stack.shape}")
    with open(path, "wb") as f:
        f.write(_DFS_MAGIC)
        f.write(struct.pack("<IIId", p.shape[0], p.shape[1], p.shape[2], float(fs)))
        f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def read_dfs(path) -> tuple[np.ndarray, float]:
    data = Path(path).read_bytes()
    header = len(_DFS_MAGIC) + struct.calcsize("<IIId")
    if len(data) < header or data[: len(_DFS_MAGIC)] != _DFS_MAGIC:
        raise ValueError(f"{path}: not a DFS1 file")
    n_rx, n_bins, n_frames, fs = struct.unpack_from("<IIId", data, len(_DFS_MAGIC))
    if n_bins != 2 * DOPPLER_HALF_BINS + 1:
        raise ValueError(f"{path}: expected {2 * DOPPLER_HALF_BINS + 1} bins, got {n_bins}")
    count = n_rx * n_bins * n_frames
    if len(data) != header + 4 * count:
        raise ValueError(f"{path}: payload size mismatch")
    power = np.frombuffer(data, dtype="<f4", offset=header).reshape(n_rx, n_bins, n_frames)
    return power.astype(np.float64), fs
