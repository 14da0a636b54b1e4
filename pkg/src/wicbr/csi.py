"""Synthetic WiFi channel-state recordings.

Channel model per subcarrier s and antenna a:

    H[s,a,t] = e^{-j theta_a(t)} * ( sum_m  att_m * e^{-j 2 pi d_m(t,a) / lambda_s} ) + noise

where the sum runs over static paths (fixed length) plus one dynamic path
whose length follows the gesture: d(t) = d0 - integral of the approach
velocity, so positive velocity shortens the path and lands the Doppler peak
at +v/lambda. theta_a(t) is a seeded random-walk phase offset shared by all
antennas up to a fixed per-antenna constant; it models the sampling clock
drift that the antenna ratio later cancels. Antennas sit lambda/2 apart, so
every path additionally picks up a fixed per-antenna geometric length term.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT = 299792458.0
DEFAULT_F_CENTER_HZ = 5.825e9
DEFAULT_FS_HZ = 1000.0
DEFAULT_BANDWIDTH_HZ = 40e6
DOPPLER_BUDGET_HZ = 60.0

# deterministic per-path arrival geometry: direction cosine of path m toward
# the antenna axis; golden-angle spacing keeps the values distinct
_GOLDEN = 0.6180339887498949
_DYNAMIC_COSINE = float(np.cos(2 * np.pi * _GOLDEN * 0.5))
# fixed per-antenna component of the offset walk (cancels in the ratio)
_ANTENNA_OFFSET_RAD = 0.7


def _static_cosine(path_index: int) -> float:
    return float(np.cos(2 * np.pi * _GOLDEN * (path_index + 1)))


class RecordingFormatError(Exception):
    """Raised when an on-disk recording fails structural validation."""


@dataclass(frozen=True)
class PathSpec:
    """One static propagation path: complex attenuation and length in meters."""

    attenuation: complex
    length_m: float

    def __post_init__(self):
        if not np.isfinite(self.length_m) or self.length_m < 0:
            raise ValueError(f"path length must be finite and non-negative, got {self.length_m}")
        if not np.isfinite(complex(self.attenuation).real) or not np.isfinite(complex(self.attenuation).imag):
            raise ValueError("path attenuation must be finite")


@dataclass(frozen=True)
class DynamicPathSpec:
    """The moving-reflector path: complex attenuation and rest length d0."""

    attenuation: complex
    d0_m: float

    def __post_init__(self):
        if not np.isfinite(self.d0_m) or self.d0_m < 0:
            raise ValueError(f"d0 must be finite and non-negative, got {self.d0_m}")
        if not np.isfinite(complex(self.attenuation).real) or not np.isfinite(complex(self.attenuation).imag):
            raise ValueError("dynamic attenuation must be finite")


@dataclass(frozen=True)
class SceneConfig:
    """Propagation environment for one recording.

    offset_seed drives the random phase-offset walk and the additive noise;
    everything else about the scene is deterministic.
    """

    static_paths: tuple[PathSpec, ...]
    dynamic_path: DynamicPathSpec
    noise_std: float = 0.0
    offset_seed: int = 0
    offset_step_std: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "static_paths", tuple(self.static_paths))
        if len(self.static_paths) < 1:
            raise ValueError("scene needs at least one static path")
        if self.noise_std < 0 or not np.isfinite(self.noise_std):
            raise ValueError(f"noise_std must be finite and non-negative, got {self.noise_std}")
        if self.offset_step_std < 0 or not np.isfinite(self.offset_step_std):
            raise ValueError(f"offset_step_std must be finite and non-negative, got {self.offset_step_std}")


@dataclass(frozen=True)
class DomainTag:
    """Capture-condition labels for one recording."""

    location: int
    orientation: int
    environment: int

    def __post_init__(self):
        for name in ("location", "orientation", "environment"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")

    def astuple(self) -> tuple[int, int, int]:
        return (int(self.location), int(self.orientation), int(self.environment))


GESTURE_FAMILIES = ("hold", "sinusoid", "ramp", "double_pulse", "zigzag", "triangle")


def _triangle_wave(u: np.ndarray) -> np.ndarray:
    frac = u - np.floor(u)
    return 1.0 - 4.0 * np.abs(frac - 0.5)


@dataclass(frozen=True)
class GestureProfile:
    """Class identity plus a named time->approach-velocity curve."""

    class_id: int
    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")
        if self.family not in GESTURE_FAMILIES:
            raise ValueError(f"unknown gesture family {self.family!r}")
        for k, v in self.params.items():
            if not np.isfinite(v):
                raise ValueError(f"gesture param {k} must be finite")

    def velocity(self, t: np.ndarray) -> np.ndarray:
        """Approach velocity in m/s at each time; positive = toward receiver."""
        t = np.asarray(t, dtype=np.float64)
        p = self.params
        if self.family == "hold":
            return np.zeros_like(t)
        if self.family == "sinusoid":
            return p["amp"] * np.sin(2 * np.pi * p["freq_hz"] * t + p.get("phase_rad", 0.0))
        if self.family == "ramp":
            return p["v0"] + p["rate"] * t
        if self.family == "double_pulse":
            w = p["width_s"]
            out = np.zeros_like(t)
            for c in (p["center1_s"], p["center2_s"]):
                u = (t - c) / w
                mask = np.abs(u) <= 1.0
                out[mask] += p["amp"] * np.cos(np.pi * u[mask] / 2) ** 2
            return out
        if self.family == "zigzag":
            return p["amp"] * _triangle_wave(p["freq_hz"] * t + p.get("phase_rad", 0.0) / (2 * np.pi))
        if self.family == "triangle":
            return p["amp"] * np.abs(_triangle_wave(p["freq_hz"] * t))
        raise AssertionError(self.family)


@dataclass(frozen=True)
class CsiRecording:
    """Complex CSI samples, shape (subcarriers, antennas, time)."""

    samples: np.ndarray
    fs: float
    f_center: float
    wavelength: float

    def __post_init__(self):
        s = self.samples
        if s.ndim != 3:
            raise ValueError(f"samples must be 3-D (S, A, T), got shape {s.shape}")
        if s.shape[0] < 1 or s.shape[1] < 2 or s.shape[2] < 1:
            raise ValueError(f"need >=1 subcarrier, >=2 antennas, >=1 sample, got {s.shape}")
        if not np.iscomplexobj(s):
            raise ValueError("samples must be complex")
        if self.fs <= 0 or not np.isfinite(self.fs):
            raise ValueError(f"fs must be positive, got {self.fs}")
        if self.f_center <= 0 or not np.isfinite(self.f_center):
            raise ValueError(f"f_center must be positive, got {self.f_center}")
        expected = SPEED_OF_LIGHT / self.f_center
        if abs(self.wavelength - expected) > 1e-9 * expected:
            raise ValueError(f"wavelength {self.wavelength} inconsistent with f_center {self.f_center}")
        if not np.all(np.isfinite(s.view(np.float64))):
            raise ValueError("samples contain non-finite values")

    @property
    def n_subcarriers(self) -> int:
        return self.samples.shape[0]

    @property
    def n_antennas(self) -> int:
        return self.samples.shape[1]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[2]

    def subcarrier_frequencies(self, bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ) -> np.ndarray:
        """Carrier frequency per subcarrier, spread uniformly over the band."""
        s = self.n_subcarriers
        offsets = np.arange(s) - (s - 1) / 2
        spacing = bandwidth_hz / max(s - 1, 1)
        return self.f_center + offsets * spacing


def subcarrier_wavelengths(rec: CsiRecording) -> np.ndarray:
    return SPEED_OF_LIGHT / rec.subcarrier_frequencies()


def synth_recording(
    scene: SceneConfig,
    gesture: GestureProfile,
    duration_s: float = 2.0,
    fs: float = DEFAULT_FS_HZ,
    n_subcarriers: int = 30,
    n_antennas: int = 3,
    f_center: float = DEFAULT_F_CENTER_HZ,
) -> CsiRecording:
    """Simulate one recording of the scene while the gesture is performed."""
    if duration_s <= 0 or fs <= 0:
        raise ValueError("duration and fs must be positive")
    if n_subcarriers < 1 or n_antennas < 2:
        raise ValueError("need >=1 subcarrier and >=2 antennas")
    n_t = int(round(duration_s * fs))
    if n_t < 1:
        raise ValueError("duration too short for one sample")

    t = np.arange(n_t) / fs
    v = gesture.velocity(t)
    if not np.all(np.isfinite(v)):
        raise ValueError("gesture velocity is non-finite")

    wavelength = SPEED_OF_LIGHT / f_center
    offsets = np.arange(n_subcarriers) - (n_subcarriers - 1) / 2
    spacing = DEFAULT_BANDWIDTH_HZ / max(n_subcarriers - 1, 1)
    f_sub = f_center + offsets * spacing
    lam = SPEED_OF_LIGHT / f_sub  # (S,)

    peak_doppler = np.max(np.abs(v)) / lam.min()
    if peak_doppler > DOPPLER_BUDGET_HZ:
        raise ValueError(
            f"gesture peaks at {peak_doppler:.1f} Hz Doppler, beyond the +/-{DOPPLER_BUDGET_HZ:.0f} Hz budget"
        )

    # dynamic path length: starts at d0, shortens while approaching
    dt = 1.0 / fs
    d_dyn = scene.dynamic_path.d0_m - np.concatenate([[0.0], np.cumsum(v[:-1])]) * dt  # (T,)

    spacing_m = wavelength / 2
    ant = np.arange(n_antennas)
    inv_lam = 1.0 / lam

    # static sum, shape (S, A); geometry term is per path and per antenna
    static = np.zeros((n_subcarriers, n_antennas), dtype=np.complex128)
    for p_idx, path in enumerate(scene.static_paths):
        d_pa = path.length_m + ant[None, :] * spacing_m * _static_cosine(p_idx)  # (1, A)
        static += complex(path.attenuation) * np.exp(-2j * np.pi * d_pa * inv_lam[:, None])

    # dynamic term factorizes into (S, T) motion phase and (S, A) antenna phase
    dyn_motion = np.exp(-2j * np.pi * inv_lam[:, None] * d_dyn[None, :])  # (S, T)
    dyn_ant = np.exp(-2j * np.pi * inv_lam[:, None] * (ant[None, :] * spacing_m * _DYNAMIC_COSINE))  # (S, A)
    dyn = complex(scene.dynamic_path.attenuation) * dyn_ant[:, :, None] * dyn_motion[:, None, :]

    h = static[:, :, None] + dyn  # (S, A, T)

    ss = np.random.SeedSequence(scene.offset_seed)
    walk_rng, noise_rng = [np.random.default_rng(child) for child in ss.spawn(2)]
    theta = np.cumsum(walk_rng.normal(0.0, scene.offset_step_std, size=n_t))
    theta_a = theta[None, :] + ant[:, None] * _ANTENNA_OFFSET_RAD  # (A, T)
    h = h * np.exp(-1j * theta_a)[None, :, :]

    if scene.noise_std > 0:
        sigma = scene.noise_std / np.sqrt(2.0)
        noise = noise_rng.normal(0.0, sigma, size=(n_subcarriers, n_antennas, n_t, 2))
        h = h + noise[..., 0] + 1j * noise[..., 1]

    return CsiRecording(samples=h, fs=float(fs), f_center=float(f_center), wavelength=wavelength)


# ---------------------------------------------------------------------------
# dataset construction


@dataclass(frozen=True)
class RawSample:
    """One recorded gesture instance before preprocessing."""

    sample_id: str
    class_id: int
    tag: DomainTag
    recording: CsiRecording
    gesture: GestureProfile
    scene: SceneConfig


def default_gestures() -> tuple[GestureProfile, ...]:
    """Six velocity profiles with distinct Doppler signatures."""
    return (
        GestureProfile(0, "sinusoid", {"amp": 0.8, "freq_hz": 0.8, "phase_rad": 0.0}),
        GestureProfile(1, "sinusoid", {"amp": 1.9, "freq_hz": 2.4, "phase_rad": 0.0}),
        GestureProfile(2, "ramp", {"v0": 0.3, "rate": 0.95}),
        GestureProfile(3, "double_pulse", {"amp": 1.5, "center1_s": 0.55, "center2_s": 1.45, "width_s": 0.28}),
        GestureProfile(4, "zigzag", {"amp": 1.2, "freq_hz": 1.25, "phase_rad": 0.0}),
        GestureProfile(5, "triangle", {"amp": 2.4, "freq_hz": 1.0}),
    )


def default_domains() -> tuple[tuple[SceneConfig, DomainTag], ...]:
    """Three rooms with different static multipath and reflector placement."""
    return (
        (
            SceneConfig(
                static_paths=(PathSpec(1.15 + 0.35j, 6.2), PathSpec(0.45 - 0.25j, 9.7)),
                dynamic_path=DynamicPathSpec(0.72 + 0.12j, 4.1),
                noise_std=0.05,
            ),
            DomainTag(0, 0, 0),
        ),
        (
            SceneConfig(
                static_paths=(PathSpec(0.85 - 0.5j, 5.3), PathSpec(0.65 + 0.55j, 11.2), PathSpec(0.3 + 0.2j, 14.6)),
                dynamic_path=DynamicPathSpec(0.55 - 0.3j, 5.6),
                noise_std=0.05,
            ),
            DomainTag(1, 1, 1),
        ),
        (
            SceneConfig(
                static_paths=(PathSpec(1.55 + 0.15j, 7.4),),
                dynamic_path=DynamicPathSpec(0.82 + 0.28j, 3.3),
                noise_std=0.05,
            ),
            DomainTag(2, 2, 2),
        ),
    )


def _jitter_gesture(gesture: GestureProfile, rng: np.random.Generator) -> GestureProfile:
    """Per-repetition variation of a gesture; family-specific, bounded."""
    p = dict(gesture.params)
    fam = gesture.family
    if fam == "hold":
        return gesture
    if fam in ("sinusoid", "zigzag"):
        p["amp"] = p["amp"] * rng.uniform(0.9, 1.1)
        p["freq_hz"] = p["freq_hz"] * rng.uniform(0.95, 1.05)
        p["phase_rad"] = p.get("phase_rad", 0.0) + rng.uniform(0.0, 2 * np.pi)
    elif fam == "ramp":
        p["v0"] = p["v0"] * rng.uniform(0.9, 1.1)
        p["rate"] = p["rate"] * rng.uniform(0.9, 1.1)
    elif fam == "double_pulse":
        p["amp"] = p["amp"] * rng.uniform(0.9, 1.1)
        p["center1_s"] = p["center1_s"] + rng.uniform(-0.05, 0.05)
        p["center2_s"] = p["center2_s"] + rng.uniform(-0.05, 0.05)
        p["width_s"] = p["width_s"] * rng.uniform(0.9, 1.1)
    elif fam == "triangle":
        p["amp"] = p["amp"] * rng.uniform(0.9, 1.1)
        p["freq_hz"] = p["freq_hz"] * rng.uniform(0.95, 1.05)
    return replace(gesture, params=p)


@dataclass(frozen=True)
class PlannedSample:
    """Everything needed to synthesize one recording; all randomness is
    already resolved into the jittered gesture and the scene's offset seed,
    so realization is pure and may run in any order."""

    sample_id: str
    class_id: int
    tag: DomainTag
    scene: SceneConfig
    gesture: GestureProfile
    duration_s: float
    fs: float
    n_subcarriers: int
    n_antennas: int
    f_center: float


def plan_dataset(
    gestures=None,
    domains=None,
    reps: int = 15,
    seed: int = 42,
    duration_s: float = 2.0,
    fs: float = DEFAULT_FS_HZ,
    n_subcarriers: int = 30,
    n_antennas: int = 3,
    f_center: float = DEFAULT_F_CENTER_HZ,
) -> list[PlannedSample]:
    """Draw every random choice for a dataset up front.

    Gesture jitter is seeded per (class, rep) only, so the same repetition of
    a class performs the identical motion in every domain; the offset walk
    and noise are reseeded per recording.
    """
    gestures = tuple(gestures) if gestures is not None else default_gestures()
    domains = tuple(domains) if domains is not None else default_domains()
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if len({g.class_id for g in gestures}) != len(gestures):
        raise ValueError("duplicate class_id in gesture roster")

    plan = []
    for gesture in gestures:
        for rep in range(reps):
            jitter_rng = np.random.default_rng(np.random.SeedSequence([seed, 17, gesture.class_id, rep]))
            moved = _jitter_gesture(gesture, jitter_rng)
            for dom_idx, (scene, tag) in enumerate(domains):
                offset_seed = int(
                    np.random.SeedSequence([seed, 23, gesture.class_id, dom_idx, rep]).generate_state(1)[0]
                )
                plan.append(
                    PlannedSample(
                        sample_id=f"c{gesture.class_id}_d{dom_idx}_r{rep:03d}",
                        class_id=gesture.class_id,
                        tag=tag,
                        scene=replace(scene, offset_seed=offset_seed),
                        gesture=moved,
                        duration_s=duration_s,
                        fs=fs,
                        n_subcarriers=n_subcarriers,
                        n_antennas=n_antennas,
                        f_center=f_center,
                    )
                )
    return plan


def realize_sample(planned: PlannedSample) -> RawSample:
    """Synthesize one planned recording."""
    rec = synth_recording(
        planned.scene,
        planned.gesture,
        duration_s=planned.duration_s,
        fs=planned.fs,
        n_subcarriers=planned.n_subcarriers,
        n_antennas=planned.n_antennas,
        f_center=planned.f_center,
    )
    return RawSample(
        sample_id=planned.sample_id,
        class_id=planned.class_id,
        tag=planned.tag,
        recording=rec,
        gesture=planned.gesture,
        scene=planned.scene,
    )


def make_dataset(
    gestures=None,
    domains=None,
    reps: int = 15,
    seed: int = 42,
    duration_s: float = 2.0,
    fs: float = DEFAULT_FS_HZ,
    n_subcarriers: int = 30,
    n_antennas: int = 3,
    f_center: float = DEFAULT_F_CENTER_HZ,
) -> list[RawSample]:
    """Synthesize reps recordings of every gesture in every domain."""
    plan = plan_dataset(
        gestures=gestures,
        domains=domains,
        reps=reps,
        seed=seed,
        duration_s=duration_s,
        fs=fs,
        n_subcarriers=n_subcarriers,
        n_antennas=n_antennas,
        f_center=f_center,
    )
    return [realize_sample(p) for p in plan]


# ---------------------------------------------------------------------------
# recording file format: magic "CSIR1", u32 S/A/T, f64 fs/f_center,
# float32 interleaved re/im in (S, A, T) C order, little-endian throughout

_MAGIC = b"CSIR1"


def write_recording(path, rec: CsiRecording) -> None:
    s, a, t = rec.samples.shape
    inter = np.empty((s, a, t, 2), dtype="<f4")
    inter[..., 0] = rec.samples.real
    inter[..., 1] = rec.samples.imag
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIIdd", s, a, t, rec.fs, rec.f_center))
        f.write(inter.tobytes())


def read_recording(path) -> CsiRecording:
    data = Path(path).read_bytes()
    header = len(_MAGIC) + struct.calcsize("<IIIdd")
    if len(data) < header or data[: len(_MAGIC)] != _MAGIC:
        raise RecordingFormatError(f"{path}: not a CSIR1 file")
    s, a, t, fs, f_center = struct.unpack_from("<IIIdd", data, len(_MAGIC))
    count = s * a * t * 2
    if len(data) != header + 4 * count:
        raise RecordingFormatError(f"{path}: payload does not match header counts {s}x{a}x{t}")
    inter = np.frombuffer(data, dtype="<f4", offset=header).reshape(s, a, t, 2)
    samples = inter[..., 0].astype(np.float64) + 1j * inter[..., 1].astype(np.float64)
    try:
        return CsiRecording(samples=samples, fs=fs, f_center=f_center, wavelength=SPEED_OF_LIGHT / f_center)
    except ValueError as e:
        raise RecordingFormatError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# JSON sidecar describing how a recording was produced


def _complex_pair(c: complex) -> list[float]:
    c = complex(c)
    return [c.real, c.imag]


def scene_to_dict(scene: SceneConfig) -> dict:
    return {
        "static_paths": [
            {"attenuation": _complex_pair(p.attenuation), "length_m": p.length_m} for p in scene.static_paths
        ],
        "dynamic_path": {
            "attenuation": _complex_pair(scene.dynamic_path.attenuation),
            "d0_m": scene.dynamic_path.d0_m,
        },
        "noise_std": scene.noise_std,
        "offset_seed": scene.offset_seed,
        "offset_step_std": scene.offset_step_std,
    }


def scene_from_dict(d: dict) -> SceneConfig:
    return SceneConfig(
        static_paths=tuple(
            PathSpec(complex(p["attenuation"][0], p["attenuation"][1]), float(p["length_m"]))
            for p in d["static_paths"]
        ),
        dynamic_path=DynamicPathSpec(
            complex(d["dynamic_path"]["attenuation"][0], d["dynamic_path"]["attenuation"][1]),
            float(d["dynamic_path"]["d0_m"]),
        ),
        noise_std=float(d.get("noise_std", 0.0)),
        offset_seed=int(d.get("offset_seed", 0)),
        offset_step_std=float(d.get("offset_step_std", 0.1)),
    )


def gesture_to_dict(g: GestureProfile) -> dict:
    return {"class_id": g.class_id, "family": g.family, "params": {k: float(v) for k, v in g.params.items()}}


def gesture_from_dict(d: dict) -> GestureProfile:
    return GestureProfile(int(d["class_id"]), str(d["family"]), {k: float(v) for k, v in d["params"].items()})


def tag_to_dict(tag: DomainTag) -> dict:
    return {"location": tag.location, "orientation": tag.orientation, "environment": tag.environment}


def tag_from_dict(d: dict) -> DomainTag:
    return DomainTag(int(d["location"]), int(d["orientation"]), int(d["environment"]))


def write_sidecar(path, sample: RawSample) -> None:
    doc = {
        "sample_id": sample.sample_id,
        "class_id": sample.class_id,
        "tag": tag_to_dict(sample.tag),
        "scene": scene_to_dict(sample.scene),
        "gesture": gesture_to_dict(sample.gesture),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_sidecar(path) -> dict:
    doc = json.loads(Path(path).read_text())
    for key in ("sample_id", "class_id", "tag"):
        if key not in doc:
            raise RecordingFormatError(f"{path}: sidecar missing {key!r}")
    return doc
