"""Nested-array geometry, steering vectors, virtual-array dictionary and snapshot simulation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import khatri_rao

DEG = np.pi / 180.0


def nested_positions(m1: int, m2: int) -> list[int]:
    """Sensor positions of a two-level nested array, in units of the base spacing.

    The inner uniform line has ``m1`` sensors at unit spacing starting from the
    reference sensor at 0; the outer line has ``m2`` sensors at spacing
    ``m1 + 1``, placed so that its first element sits at ``m1``.

    Examples
    --------
    >>> nested_positions(3, 3)
    [0, 1, 2, 3, 7, 11]
    """
    if m1 < 1 or m2 < 1:
        raise ValueError(f"both sub-array sizes must be >= 1, got m1={m1}, m2={m2}")
    inner = list(range(m1))
    outer = [m * (m1 + 1) - 1 for m in range(1, m2 + 1)]
    return inner + outer


@dataclass(frozen=True)
class ArrayGeometry:
    """Sensor layout given as integer multiples of the base spacing ``d``.

    ``d`` is expressed in wavelengths (default half-wavelength) and
    ``wavelength`` is the normalized carrier wavelength.  ``m1``/``m2`` are
    set when the layout is a two-level nested array and are validated against
    the canonical nested positions.
    """

    positions: tuple[int, ...]
    d: float = 0.5
    wavelength: float = 1.0
    m1: int | None = None
    m2: int | None = None

    def __post_init__(self):
        pos = tuple(int(p) for p in self.positions)
        object.__setattr__(self, "positions", pos)
        if len(pos) == 0:
            raise ValueError("geometry needs at least one sensor")
        if pos[0] != 0:
            raise ValueError("the reference sensor must sit at position 0")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValueError("sensor positions must be strictly increasing")
        if self.d <= 0 or self.wavelength <= 0:
            raise ValueError("d and wavelength must be positive")
        if (self.m1 is None) != (self.m2 is None):
            raise ValueError("m1 and m2 must be provided together")
        if self.m1 is not None and pos != tuple(nested_positions(self.m1, self.m2)):
            raise ValueError("positions do not match the two-level nested layout")

    @classmethod
    def nested(cls, m1: int, m2: int, d: float = 0.5, wavelength: float = 1.0) -> "ArrayGeometry":
        """Two-level nested array with ``m1`` inner and ``m2`` outer sensors."""
        return cls(tuple(nested_positions(m1, m2)), d=d, wavelength=wavelength, m1=m1, m2=m2)

    @classmethod
    def from_positions(cls, positions: Sequence[int], d: float = 0.5,
                       wavelength: float = 1.0) -> "ArrayGeometry":
        """Arbitrary integer-position line array (no nested structure implied)."""
        return cls(tuple(positions), d=d, wavelength=wavelength)

    @property
    def num_sensors(self) -> int:
        return len(self.positions)

    def position_array(self) -> np.ndarray:
        return np.asarray(self.positions, dtype=float)

    def to_dict(self) -> dict:
        out = {"positions": list(self.positions), "d": self.d, "wavelength": self.wavelength}
        if self.m1 is not None:
            out.update(m1=self.m1, m2=self.m2)
        return out


@dataclass(frozen=True)
class Scenario:
    """Ground truth of a synthetic run: source angles, powers, noise level, snapshots.

    Powers and ``noise_var`` are linear variances; ``doas_deg`` must be
    pairwise distinct angles in [-90, 90].
    """

    doas_deg: tuple[float, ...]
    powers: tuple[float, ...]
    noise_var: float
    snapshots: int
    seed: int = 0

    def __post_init__(self):
        doas = tuple(float(v) for v in self.doas_deg)
        powers = tuple(float(v) for v in self.powers)
        object.__setattr__(self, "doas_deg", doas)
        object.__setattr__(self, "powers", powers)
        if len(doas) != len(powers):
            raise ValueError("doas_deg and powers must have the same length")
        if doas:
            _check_angles(np.asarray(doas))
        if len(set(doas)) != len(doas):
            raise ValueError("DOAs must be pairwise distinct")
        if any(p <= 0 for p in powers):
            raise ValueError("source powers must be positive")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be positive")
        if self.snapshots < 1:
            raise ValueError("snapshots must be >= 1")

    @property
    def num_sources(self) -> int:
        return len(self.doas_deg)

    def to_dict(self) -> dict:
        return {
            "doas_deg": list(self.doas_deg),
            "powers": list(self.powers),
            "noise_var": self.noise_var,
            "snapshots": self.snapshots,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SnapshotMatrix:
    """Complex array outputs, one column per snapshot (shape M x T)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.complex128)
        if arr.ndim != 2:
            raise ValueError("snapshot data must be a 2-D (sensors x snapshots) array")
        object.__setattr__(self, "data", arr)

    @property
    def num_sensors(self) -> int:
        return self.data.shape[0]

    @property
    def num_snapshots(self) -> int:
        return self.data.shape[1]


def _check_angles(theta_deg) -> np.ndarray:
    th = np.asarray(theta_deg, dtype=float)
    if not np.all(np.isfinite(th)) or np.any(th < -90.0) or np.any(th > 90.0):
        raise ValueError("angles must lie in [-90, 90] degrees")
    return th


def steering_matrix(geometry: ArrayGeometry, theta_deg) -> np.ndarray:
    """Array responses a(theta) stacked as columns, a_m = exp(j 2 pi (pos_m d / lambda) sin theta)."""
    th = np.atleast_1d(_check_angles(theta_deg))
    spatial = 2.0 * np.pi * geometry.position_array() * geometry.d / geometry.wavelength
    return np.exp(1j * spatial[:, None] * np.sin(th * DEG)[None, :])


def steering_vector(geometry: ArrayGeometry, theta_deg: float) -> np.ndarray:
    """Unit-modulus response of the array to a plane wave from ``theta_deg``."""
    return steering_matrix(geometry, theta_deg)[:, 0]


def steering_derivative_matrix(geometry: ArrayGeometry, theta_deg) -> np.ndarray:
    """Columnwise d a(theta) / d theta, theta in degrees (chain rule includes pi/180)."""
    th = np.atleast_1d(_check_angles(theta_deg))
    spatial = 2.0 * np.pi * geometry.position_array() * geometry.d / geometry.wavelength
    a = np.exp(1j * spatial[:, None] * np.sin(th * DEG)[None, :])
    return 1j * spatial[:, None] * np.cos(th * DEG)[None, :] * DEG * a


def steering_derivative(geometry: ArrayGeometry, theta_deg: float) -> np.ndarray:
    """Elementwise derivative of ``steering_vector`` with respect to the angle in degrees."""
    return steering_derivative_matrix(geometry, theta_deg)[:, 0]


def virtual_dictionary(geometry: ArrayGeometry, grid_deg) -> np.ndarray:
    """Virtual-array dictionary: column n is conj(a(phi_n)) kron a(phi_n), shape (M^2, N).

    Column n equals the column-major vectorization of a(phi_n) a(phi_n)^H, so
    the dictionary maps per-direction powers to vectorized covariance
    contributions.
    """
    th = np.atleast_1d(_check_angles(grid_deg))
    if th.size == 0:
        raise ValueError("grid must contain at least one angle")
    A = steering_matrix(geometry, th)
    return khatri_rao(A.conj(), A)


def dictionary_column_derivative(geometry: ArrayGeometry, phi_deg: float) -> np.ndarray:
    """Derivative of one dictionary column with respect to its angle in degrees."""
    a = steering_vector(geometry, phi_deg)
    da = steering_derivative(geometry, phi_deg)
    return np.kron(da.conj(), a) + np.kron(a.conj(), da)


def dictionary_derivative_matrix(geometry: ArrayGeometry, grid_deg) -> np.ndarray:
    """Columnwise dictionary derivatives for a whole grid (product rule on the kron)."""
    th = np.atleast_1d(_check_angles(grid_deg))
    A = steering_matrix(geometry, th)
    dA = steering_derivative_matrix(geometry, th)
    return khatri_rao(dA.conj(), A) + khatri_rao(A.conj(), dA)


def simulate_snapshots(geometry: ArrayGeometry, scenario: Scenario) -> SnapshotMatrix:
    """Draw y(t) = A(theta) s(t) + n(t) with circular complex Gaussian sources and noise.

    Each complex sample is built from two independent real normals of variance
    sigma^2 / 2 per component.  Deterministic given ``scenario.seed``.
    """
    rng = np.random.default_rng(scenario.seed)
    m = geometry.num_sensors
    t = scenario.snapshots
    k = scenario.num_sources
    y = np.zeros((m, t), dtype=np.complex128)
    if k:
        a = steering_matrix(geometry, scenario.doas_deg)
        amp = np.sqrt(np.asarray(scenario.powers) / 2.0)[:, None]
        s = amp * (rng.standard_normal((k, t)) + 1j * rng.standard_normal((k, t)))
        y = a @ s
    noise_amp = np.sqrt(scenario.noise_var / 2.0)
    y = y + noise_amp * (rng.standard_normal((m, t)) + 1j * rng.standard_normal((m, t)))
    return SnapshotMatrix(y)


def exact_covariance(geometry: ArrayGeometry, doas_deg, powers, noise_var: float) -> np.ndarray:
    """Population covariance A diag(powers) A^H + noise_var I (noise_var may be 0)."""
    m = geometry.num_sensors
    r = noise_var * np.eye(m, dtype=np.complex128)
    doas = np.atleast_1d(np.asarray(doas_deg, dtype=float))
    if doas.size:
        a = steering_matrix(geometry, doas)
        r = r + (a * np.asarray(powers, dtype=float)) @ a.conj().T
    return r


def save_snapshots(snapshots: SnapshotMatrix, path) -> None:
    """Write snapshots as CSV: one 'M,T' header line, then one row per snapshot
    with interleaved re/im sensor values."""
    m, t = snapshots.num_sensors, snapshots.num_snapshots
    inter = np.empty((t, 2 * m))
    inter[:, 0::2] = snapshots.data.T.real
    inter[:, 1::2] = snapshots.data.T.imag
    with open(path, "w") as fh:
        fh.write(f"{m},{t}\n")
        np.savetxt(fh, inter, fmt="%.17g", delimiter=",")


def load_snapshots(path) -> SnapshotMatrix:
    """Read a snapshot file written by :func:`save_snapshots`."""
    with open(path) as fh:
        header = fh.readline().strip()
        try:
            m, t = (int(v) for v in header.split(","))
        except ValueError as exc:
            raise ValueError(f"malformed snapshot header {header!r} in {path}") from exc
        inter = np.loadtxt(fh, delimiter=",", ndmin=2)
    if inter.shape != (t, 2 * m):
        raise ValueError(f"snapshot payload shape {inter.shape} does not match header ({m},{t})")
    data = (inter[:, 0::2] + 1j * inter[:, 1::2]).T
    return SnapshotMatrix(data)
