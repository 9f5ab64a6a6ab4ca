"""Localized statistical channel model: angular grid, beam pattern matrix, RSRP forward map.

The expected beam-level RSRP of a user is linear in its channel angular power
spectrum (CAPS)::

    y_mw = A @ x,    y_dbm = 10 * log10(max(y_mw, floor_mw))

where ``A`` (M beams x N angles) depends only on base-station antenna
parameters.  Angles are radians throughout; the CLI converts from degrees.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, TruncatedFileError, UnrecognizedFormatError, FormatError

DEFAULT_FLOOR_MW = 1e-12

BEAM_MAGIC = b"CSGA1"
_BEAM_HEADER = struct.Struct("<5sQQ")


@dataclass(frozen=True)
class AngularGrid:
    """Discrete departure-angle space, flattened elevation-major.

    Flat index ``n`` (0-based) maps to ``(v, h)`` with ``n = v * n_h + h``.
    """

    elevations: np.ndarray
    azimuths: np.ndarray

    def __post_init__(self):
        el = np.asarray(self.elevations, dtype=np.float64).ravel()
        az = np.asarray(self.azimuths, dtype=np.float64).ravel()
        if el.size < 1 or az.size < 1:
            raise ConfigError("angular grid needs at least one elevation and one azimuth")
        if not (np.all(np.isfinite(el)) and np.all(np.isfinite(az))):
            raise ConfigError("angular grid contains non-finite angles")
        object.__setattr__(self, "elevations", el)
        object.__setattr__(self, "azimuths", az)

    @classmethod
    def uniform(cls, n_v, n_h, elevation_range=(np.pi / 4, 3 * np.pi / 4),
                azimuth_range=(-np.pi / 3, np.pi / 3)):
        return cls(np.linspace(*elevation_range, n_v), np.linspace(*azimuth_range, n_h))

    @property
    def n_v(self) -> int:
        return self.elevations.size

    @property
    def n_h(self) -> int:
        return self.azimuths.size

    @property
    def N(self) -> int:
        return self.n_v * self.n_h

    def flat_index(self, v, h):
        if not (0 <= v < self.n_v and 0 <= h < self.n_h):
            raise IndexError(f"angle index ({v}, {h}) outside {self.n_v}x{self.n_h} grid")
        return v * self.n_h + h

    def unflatten(self, n):
        if not 0 <= n < self.N:
            raise IndexError(f"flat index {n} outside [0, {self.N})")
        return divmod(n, self.n_h)

    def angles(self):
        """(theta, phi) arrays of length N in flat order."""
        theta = np.repeat(self.elevations, self.n_h)
        phi = np.tile(self.azimuths, self.n_v)
        return theta, phi


@dataclass
class AntennaConfig:
    """Base-station side parameters of a uniform rectangular array.

    ``precoder`` is N_T x M with element ``(y, z)`` at row ``y * n_z + z``.
    """

    power: float
    precoder: np.ndarray
    n_y: int
    n_z: int
    d_y: float
    d_z: float
    wavelength: float
    gain: np.ndarray | None = None

    def __post_init__(self):
        self.precoder = np.atleast_2d(np.asarray(self.precoder, dtype=np.complex128))
        if not self.power > 0:
            raise ConfigError(f"transmit power must be positive, got {self.power}")
        if self.n_y < 1 or self.n_z < 1:
            raise ConfigError("panel dimensions must be >= 1")
        if self.wavelength == 0 or not np.isfinite(self.wavelength):
            raise ConfigError(f"invalid wavelength {self.wavelength}")
        if self.precoder.shape[1] < 1:
            raise ConfigError("precoder needs at least one beam")
        if self.gain is not None:
            self.gain = np.asarray(self.gain, dtype=np.float64).ravel()
            if np.any(self.gain < 0):
                raise ConfigError("antenna gain entries must be >= 0")

    @property
    def n_t(self) -> int:
        return self.n_y * self.n_z

    @property
    def M(self) -> int:
        return self.precoder.shape[1]


def dft_precoder(n_y, n_z):
    """Orthonormal 2-D DFT beam set: N_T beams for an n_y x n_z panel."""
    fy = np.fft.fft(np.eye(n_y)) / np.sqrt(n_y)
    fz = np.fft.fft(np.eye(n_z)) / np.sqrt(n_z)
    return np.kron(fy, fz)


def steering_vector(config: AntennaConfig, angle):
    """Array response for departure angle ``(theta, phi)``; entry order matches the precoder rows."""
    if config.wavelength == 0:
        raise ConfigError("wavelength must be nonzero")
    theta, phi = angle
    y = np.arange(config.n_y)[:, None]
    z = np.arange(config.n_z)[None, :]
    phase = (2 * np.pi / config.wavelength) * (
        config.d_y * y * np.sin(theta) * np.sin(phi) + config.d_z * z * np.cos(theta))
    return np.exp(-1j * phase).ravel()


@dataclass
class BeamPatternMatrix:
    """Nonnegative M x N per-beam power gains; ``source`` is 'computed' or 'loaded'."""

    A: np.ndarray
    source: str = "computed"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        if self.A.ndim != 2 or min(self.A.shape) < 1:
            raise ShapeError(f"beam pattern matrix must be a nonempty 2-D array, got shape {self.A.shape}")

    @property
    def M(self) -> int:
        return self.A.shape[0]

    @property
    def N(self) -> int:
        return self.A.shape[1]

    def scaled(self, factor):
        return BeamPatternMatrix(self.A * factor, self.source, dict(self.meta))


def build_beam_pattern(config: AntennaConfig, grid: AngularGrid) -> BeamPatternMatrix:
    """Default expectation-level gain ``P * g_n**2 * |b_m^H s_n|**2``.

    The phase-error factor of the full model is omitted; externally computed
    matrices can be loaded with :func:`load_beam_pattern` instead.
    """
    if config.precoder.shape[0] != config.n_t:
        raise ShapeError(f"precoder has {config.precoder.shape[0]} rows, panel has {config.n_t} elements")
    gain = np.ones(grid.N) if config.gain is None else config.gain
    if gain.size != grid.N:
        raise ShapeError(f"gain table has {gain.size} entries, grid has {grid.N} angles")
    theta, phi = grid.angles()
    # columns are independent, so the stacked form is identical to a per-column loop
    S = np.stack([steering_vector(config, (t, p)) for t, p in zip(theta, phi)], axis=1)
    response = config.precoder.conj().T @ S
    A = config.power * gain[None, :] ** 2 * np.abs(response) ** 2
    return BeamPatternMatrix(A, "computed", {"n_y": config.n_y, "n_z": config.n_z,
                                             "n_v": grid.n_v, "n_h": grid.n_h})


def default_beam_pattern(n_y=8, n_z=4, n_v=16, n_h=16, power=1.0, spacing=0.5):
    """Desk-scale beam matrix: DFT beams on an n_y x n_z half-wavelength panel."""
    cfg = AntennaConfig(power=power, precoder=dft_precoder(n_y, n_z), n_y=n_y, n_z=n_z,
                        d_y=spacing, d_z=spacing, wavelength=1.0)
    return build_beam_pattern(cfg, AngularGrid.uniform(n_v, n_h))


def mw_to_dbm(y_mw, floor_mw=DEFAULT_FLOOR_MW):
    return 10.0 * np.log10(np.maximum(y_mw, floor_mw))


def dbm_to_mw(y_dbm):
    return 10.0 ** (np.asarray(y_dbm) / 10.0)


def _matrix(A):
    return A.A if isinstance(A, BeamPatternMatrix) else np.asarray(A, dtype=np.float64)


def forward_rsrp(A, x, floor_mw=DEFAULT_FLOOR_MW):
    """Map CAPS to (y_mw, y_dbm).

    ``x`` is a length-N vector or an I x N batch (one CAPS per row).
    """
    A = _matrix(A)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != A.shape[1]:
        raise ShapeError(f"CAPS dimension {x.shape[-1]} != beam matrix columns {A.shape[1]}")
    y_mw = x @ A.T
    return y_mw, mw_to_dbm(y_mw, floor_mw)


def save_beam_pattern(beam, path):
    A = np.ascontiguousarray(_matrix(beam), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_BEAM_HEADER.pack(BEAM_MAGIC, A.shape[0], A.shape[1]))
        fh.write(A.tobytes())


def load_beam_pattern(path) -> BeamPatternMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _BEAM_HEADER.size or raw[:5] != BEAM_MAGIC:
        raise UnrecognizedFormatError(f"{path}: unrecognized format (expected {BEAM_MAGIC!r} header)")
    _, m, n = _BEAM_HEADER.unpack_from(raw)
    payload = raw[_BEAM_HEADER.size:]
    if len(payload) < 8 * m * n:
        raise TruncatedFileError(f"{path}: expected {m * n} floats, found {len(payload) // 8}")
    A = np.frombuffer(payload, dtype="<f8", count=m * n).reshape(m, n).astype(np.float64)
    if not np.all(np.isfinite(A)):
        raise FormatError(f"{path}: beam matrix contains non-finite entries")
    if np.any(A < 0):
        raise FormatError(f"{path}: beam matrix contains negative entries")
    return BeamPatternMatrix(A, "loaded")
