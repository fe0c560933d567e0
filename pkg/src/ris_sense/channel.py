"""Synthetic frequency-sweep channel model.

A vector-network-analyzer-style campaign is simulated over a small indoor
geometry: a transmitter and receiver 0.431 m apart, a reflecting panel
mounted 1.5 m off the line midway between them providing a detour path, and
optional metal-plate blockage of the direct path. The receiver sits on a
turntable sampled every few degrees; a raised-cosine antenna pattern weights
each arriving path by its azimuth relative to the current pointing.

The sweep model is a sum of discrete propagation paths,

    h(f) = sum_k  a_k * G_rx(angle - theta_k) * exp(-j 2 pi f tau_k) * e_k,

with a_k the path amplitude (spherical spreading 1/d, plus blockage or panel
gain), tau_k the geometric delay, theta_k the arrival azimuth at the
receiver, and e_k a unit phasor (1 for the deterministic paths, random for
clutter). Clutter paths have uniform random delays capped at five decay
constants and amplitudes shrunken by exp(-tau/decay).

The frequency grid is endpoint-exclusive, f_k = f_start + k * span / n, so
the inverse DFT's delay bins are exactly 1/span wide.

Everything here is deterministic given (environment, scenario, angle, seed);
per-cell substreams come from mix_seed(seed, scenario_index, angle_index).
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    InvalidModeError,
    InvalidRangeError,
    ShapeError,
    TruncatedPayloadError,
)
from .tensor import PortableRng, mix_seed

SPEED_OF_LIGHT = 299_792_458.0  # m/s

# receive antenna: gently directional, full-circle raised cosine. The floor
# keeps every arrival visible at every turntable angle; a path can swing at
# most 20*log10(1/0.7) ~ 3.1 dB as the table rotates, so the blockage levels
# (8.75 and 11.25 dB apart) stay separated by pointing alone.
PATTERN_FLOOR = 0.7

# panel detour geometry: mounted on the perpendicular bisector of the Tx-Rx
# segment, this far off the line
RIS_STANDOFF_M = 1.5

SWEEP_MAGIC = b"CIR1"


@dataclass(frozen=True)
class EnvironmentProfile:
    """Clutter statistics for one measurement room."""

    name: str
    clutter_path_count: int
    clutter_gain_db: tuple[float, float]  # uniform draw range for path gain
    reverberation_decay_ns: float

    def __post_init__(self):
        if self.clutter_path_count < 0:
            raise InvalidRangeError("clutter_path_count must be >= 0")
        lo, hi = self.clutter_gain_db
        if lo > hi:
            raise InvalidRangeError("clutter_gain_db range must be (lo, hi) with lo <= hi")
        if self.name == "chamber" and self.clutter_path_count != 0:
            raise InvalidRangeError("the anechoic chamber profile is clutter-free")


# calibrated so the classifier's difficulty ordering is chamber < meeting < hflab
CHAMBER = EnvironmentProfile("chamber", 0, (-60.0, -60.0), 1.0)
MEETING = EnvironmentProfile("meeting", 6, (-40.0, -30.0), 10.0)
HFLAB = EnvironmentProfile("hflab", 24, (-36.0, -22.0), 40.0)

ENVIRONMENTS: dict[str, EnvironmentProfile] = {
    e.name: e for e in (CHAMBER, MEETING, HFLAB)
}


@dataclass(frozen=True)
class Scenario:
    """Blockage condition of the direct path."""

    kind: str  # LOS | NLOS_100 | NLOS_75
    plate_side_m: float
    plate_thickness_mm: float = 5.0

    def __post_init__(self):
        if self.kind not in ("LOS", "NLOS_100", "NLOS_75"):
            raise InvalidModeError(f"unknown scenario kind {self.kind!r}")
        if (self.plate_side_m == 0.0) != (self.kind == "LOS"):
            raise InvalidRangeError("plate_side_m must be 0 exactly for LOS scenarios")


LOS = Scenario("LOS", 0.0)
NLOS_100 = Scenario("NLOS_100", 1.00)
NLOS_75 = Scenario("NLOS_75", 0.75)

# scenario order doubles as the class label: 0=LOS, 1=NLOS_100, 2=NLOS_75
SCENARIO_ORDER: tuple[Scenario, ...] = (LOS, NLOS_100, NLOS_75)


def scenario_index(scn: Scenario) -> int:
    return next(i for i, s in enumerate(SCENARIO_ORDER) if s.kind == scn.kind)


@dataclass(frozen=True)
class SweepConfig:
    f_start_hz: float = 4.8e9
    f_stop_hz: float = 5.2e9
    n_points: int = 401
    tx_rx_distance_m: float = 0.431
    angle_step_deg: float = 5.0
    # sets the panel path ~10 dB under the fully blocked direct path, so the
    # direct-to-panel level ratio orders the three blockage classes with
    # ~2.5 dB of guard band left after the worst-case pointing swing
    ris_gain_db: float = -13.0

    def __post_init__(self):
        if self.f_start_hz >= self.f_stop_hz:
            raise InvalidRangeError("f_start must be below f_stop")
        if self.n_points < 16:
            raise InvalidRangeError("a sweep needs at least 16 frequency points")
        if self.tx_rx_distance_m <= 0:
            raise InvalidRangeError("tx_rx_distance_m must be positive")
        ratio = 360.0 / self.angle_step_deg
        if abs(ratio - round(ratio)) > 1e-9:
            raise InvalidRangeError("angle_step_deg must divide 360")

    @property
    def span_hz(self) -> float:
        return self.f_stop_hz - self.f_start_hz

    @property
    def n_angles(self) -> int:
        return round(360.0 / self.angle_step_deg)

    def frequencies(self) -> np.ndarray:
        """Endpoint-exclusive grid: f_k = f_start + k * span / n_points."""
        k = np.arange(self.n_points)
        return self.f_start_hz + k * (self.span_hz / self.n_points)


@dataclass
class ChannelSweep:
    frequencies: np.ndarray
    h: np.ndarray
    environment: str
    scenario: str
    angle_deg: float
    seed: int

    def __post_init__(self):
        if self.frequencies.shape != self.h.shape:
            raise ShapeError("frequencies and h must have equal length")


def antenna_gain(delta_deg: np.ndarray | float) -> np.ndarray | float:
    """Raised-cosine receive pattern: unity at boresight, falling smoothly to
    the floor at 180 degrees off axis."""
    d = np.abs((np.asarray(delta_deg, dtype=np.float64) + 180.0) % 360.0 - 180.0)
    lobe = 0.5 * (1.0 + np.cos(np.pi * d / 180.0))
    g = PATTERN_FLOOR + (1.0 - PATTERN_FLOOR) * lobe
    return float(g) if np.isscalar(delta_deg) else g


def blockage_loss_db(scn: Scenario) -> float:
    """Plate insertion loss for the direct path: 20 dB scaled by plate area.

    Monotone in plate size (1.00 m -> 20 dB, 0.75 m -> 11.25 dB); the detour
    path never crosses the plate and takes no loss.
    """
    return 20.0 * scn.plate_side_m**2


def _geometry(cfg: SweepConfig) -> tuple[float, float, float, float]:
    """Returns (tau_direct, theta_direct, tau_ris, theta_ris).

    Tx at the origin, Rx at (d, 0), panel at (d/2, RIS_STANDOFF_M). Arrival
    azimuths are measured at the receiver in world coordinates.
    """
    d = cfg.tx_rx_distance_m
    tau_direct = d / SPEED_OF_LIGHT
    theta_direct = 180.0  # the transmitter sits in the -x direction
    leg = math.hypot(d / 2.0, RIS_STANDOFF_M)
    tau_ris = 2.0 * leg / SPEED_OF_LIGHT
    theta_ris = math.degrees(math.atan2(RIS_STANDOFF_M, -d / 2.0))
    return tau_direct, theta_direct, tau_ris, theta_ris


def synthesize_sweep(
    env: EnvironmentProfile,
    scn: Scenario,
    angle_deg: float,
    cfg: SweepConfig,
    rng: PortableRng,
) -> ChannelSweep:
    """Complex frequency response for one (environment, scenario, angle) cell.

    Clutter draws consume the rng in a fixed order (delays, gains, azimuths,
    phases); the deterministic paths consume nothing, so a clutter-free
    profile never touches the rng.
    """
    if not 0.0 <= angle_deg < 360.0:
        raise InvalidRangeError(f"angle_deg must lie in [0, 360), got {angle_deg}")
    f = cfg.frequencies()
    tau_d, theta_d, tau_r, theta_r = _geometry(cfg)

    taus = [tau_d, tau_r]
    amps = [
        (1.0 / cfg.tx_rx_distance_m) * 10.0 ** (-blockage_loss_db(scn) / 20.0),
        (1.0 / (tau_r * SPEED_OF_LIGHT)) * 10.0 ** (cfg.ris_gain_db / 20.0),
    ]
    thetas = [theta_d, theta_r]
    phasors = [1.0 + 0.0j, 1.0 + 0.0j]

    k = env.clutter_path_count
    if k > 0:
        decay_s = env.reverberation_decay_ns * 1e-9
        delays = rng.uniform((k,), 0.0, 5.0 * decay_s)
        lo, hi = env.clutter_gain_db
        gains_db = rng.uniform((k,), lo, hi) if hi > lo else np.full(k, lo)
        azimuths = rng.uniform((k,), 0.0, 360.0)
        phases = rng.uniform((k,), 0.0, 2.0 * np.pi)
        # clutter rides on top of the direct delay and fades with excess delay
        taus.extend(tau_d + delays)
        amps.extend(10.0 ** (gains_db / 20.0) * np.exp(-delays / decay_s)
                    / cfg.tx_rx_distance_m)
        thetas.extend(azimuths)
        phasors.extend(np.exp(1j * phases))

    taus_arr = np.asarray(taus)
    weights = (
        np.asarray(amps)
        * antenna_gain(angle_deg - np.asarray(thetas))
        * np.asarray(phasors)
    )
    h = (weights[:, None] * np.exp(-2j * np.pi * taus_arr[:, None] * f[None, :])).sum(axis=0)
    return ChannelSweep(
        frequencies=f,
        h=h,
        environment=env.name,
        scenario=scn.kind,
        angle_deg=float(angle_deg),
        seed=rng.seed,
    )


def direct_path_amplitude(scn: Scenario, angle_deg: float, cfg: SweepConfig) -> float:
    """|h| contribution of the direct path alone (constant over frequency)."""
    tau_d, theta_d, _, _ = _geometry(cfg)
    del tau_d
    return (
        (1.0 / cfg.tx_rx_distance_m)
        * 10.0 ** (-blockage_loss_db(scn) / 20.0)
        * float(antenna_gain(angle_deg - theta_d))
    )


def sweep_to_cir(sweep: ChannelSweep, window: str = "hann") -> np.ndarray:
    """Windowed inverse DFT of the sweep; delay bins are 1/span seconds wide.

    The rect window conserves energy exactly (sum |h|^2 / N == sum |cir|^2);
    hann trades that for 31 dB lower leakage sidelobes.
    """
    n = sweep.h.size
    if n < 16:
        raise InvalidRangeError("sweep too short to transform")
    if window == "rect":
        w = np.ones(n)
    elif window == "hann":
        w = np.hanning(n)
    else:
        raise InvalidModeError(f"window must be 'hann' or 'rect', got {window!r}")
    return np.fft.ifft(sweep.h * w)


def cir_peak_bin(cir: np.ndarray) -> int:
    return int(np.argmax(np.abs(cir)))


def expected_peak_bin(tau_s: float, cfg: SweepConfig) -> int:
    """Delay bin a pure path at tau lands on: round(tau * span)."""
    return round(tau_s * cfg.span_hz) % cfg.n_points


def run_campaign(
    env: EnvironmentProfile, cfg: SweepConfig, seed: int
) -> list[ChannelSweep]:
    """All scenarios x all turntable angles, scenario-major then angle-minor.

    Cell (s, a) draws from an independent substream seeded with
    mix_seed(seed, s, a), so cells can be regenerated out of order and still
    match the full campaign bit for bit.
    """
    sweeps: list[ChannelSweep] = []
    for s_idx, scn in enumerate(SCENARIO_ORDER):
        for a_idx in range(cfg.n_angles):
            angle = a_idx * cfg.angle_step_deg
            rng = PortableRng(mix_seed(seed, s_idx, a_idx))
            sweeps.append(synthesize_sweep(env, scn, angle, cfg, rng))
    return sweeps


# ---------------------------------------------------------------------------
# sweep files: magic "CIR1" | u32 header len | JSON meta | (re, im) f64 LE


def save_sweep(sweep: ChannelSweep, path: str) -> None:
    meta = {
        "environment": sweep.environment,
        "scenario": sweep.scenario,
        "angle_deg": sweep.angle_deg,
        "seed": sweep.seed,
        "n_points": int(sweep.h.size),
        "f_start_hz": float(sweep.frequencies[0]),
        "f_step_hz": float(sweep.frequencies[1] - sweep.frequencies[0]),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    interleaved = np.empty(2 * sweep.h.size, dtype="<f8")
    interleaved[0::2] = sweep.h.real
    interleaved[1::2] = sweep.h.imag
    with open(path, "wb") as fh:
        fh.write(SWEEP_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(interleaved.tobytes())


def load_sweep(path: str) -> ChannelSweep:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != SWEEP_MAGIC:
        raise BadMagicError(f"not a sweep file: expected magic {SWEEP_MAGIC!r}")
    if len(raw) < 8:
        raise TruncatedPayloadError("sweep file ends inside the fixed header")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise TruncatedPayloadError("sweep file ends inside the JSON header")
    meta = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    body = raw[8 + header_len :]
    n = meta["n_points"]
    if len(body) != 2 * n * 8:
        raise TruncatedPayloadError(
            f"sweep payload holds {len(body)} bytes, header promises {2 * n * 8}"
        )
    interleaved = np.frombuffer(body, dtype="<f8")
    h = interleaved[0::2] + 1j * interleaved[1::2]
    freqs = meta["f_start_hz"] + np.arange(n) * meta["f_step_hz"]
    return ChannelSweep(
        frequencies=freqs,
        h=h,
        environment=meta["environment"],
        scenario=meta["scenario"],
        angle_deg=meta["angle_deg"],
        seed=meta["seed"],
    )


def sweep_to_csv(sweep: ChannelSweep, path: str) -> None:
    """Plain-text inspection dump: freq_hz, re, im per row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["freq_hz", "re", "im"])
        for f, v in zip(sweep.frequencies, sweep.h):
            writer.writerow([repr(float(f)), repr(float(v.real)), repr(float(v.imag))])
