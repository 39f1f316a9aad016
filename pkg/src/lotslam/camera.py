"""Omnidirectional fisheye model, undistortion, IPM, and the projection LUT.

The camera maps image pixels to ground points in the vehicle frame through
two stages: a radial undistortion driven by the distortion polynomial
d(rho) = a0 + a2 rho^2 + a3 rho^3 + a4 rho^4, followed by an inverse
perspective homography onto the ground plane. Each pixel also gets a
confidence in [0, 1] from the local ground footprint of the pixel. All of
it is evaluated once into a lookup table at camera initialization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

DEFAULT_CALIBRATION_RESOURCE = "default_calibration.json"
CALIBRATION_VERSION = 1


@dataclass(frozen=True)
class FisheyeModel:
    """Distortion polynomial coefficients plus sensor geometry."""

    a0: float
    a2: float
    a3: float
    a4: float
    stretch: np.ndarray  # 2x2
    center: np.ndarray  # (u0, v0) pixels
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "stretch", np.asarray(self.stretch, dtype=float).reshape(2, 2))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(2))
        if self.a0 <= 0:
            raise ValueError("a0 must be positive")
        if abs(np.linalg.det(self.stretch)) < 1e-12:
            raise ValueError("stretch matrix is singular")
        u0, v0 = self.center
        if not (0 <= u0 < self.width and 0 <= v0 < self.height):
            raise ValueError("optical center outside image bounds")

    def distortion(self, rho):
        """Evaluate d(rho); accepts scalars or arrays."""
        return self.a0 + self.a2 * rho**2 + self.a3 * rho**3 + self.a4 * rho**4


@dataclass(frozen=True)
class IpmHomography:
    """3x3 homography mapping ground homogeneous coords to undistorted pixels."""

    H: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.H, dtype=float).reshape(3, 3)
        if abs(h[2, 2]) < 1e-15:
            raise ValueError("H[2][2] is zero; cannot normalize")
        h = h / h[2, 2]
        det = abs(np.linalg.det(h))
        if not (1e-9 <= det <= 1e9):
            raise ValueError(f"homography determinant {det:g} out of range")
        object.__setattr__(self, "H", h)
        object.__setattr__(self, "_Hinv", np.linalg.inv(h))

    @property
    def inverse(self) -> np.ndarray:
        return self._Hinv


def undistort(u: float, v: float, m: FisheyeModel):
    """Undistorted pixel coordinates for (u, v), or None outside the usable FOV.

    The centered coordinates are (u_c, v_c) = S^-1 ((u, v) - (u0, v0)) and the
    result scales the offset from the optical center by a0 / d(rho); at
    rho = 0 the map is the identity.
    """
    uc = np.linalg.solve(m.stretch, np.array([u, v]) - m.center)
    rho = float(np.hypot(uc[0], uc[1]))
    d = float(m.distortion(rho))
    if d <= 0.0:
        return None
    k = m.a0 / d
    return (
        m.center[0] + k * (u - m.center[0]),
        m.center[1] + k * (v - m.center[1]),
    )


def ipm_project(u_prime: float, v_prime: float, h: IpmHomography):
    """Ground point (x_b, y_b) in the vehicle frame, or None at the horizon."""
    g = h.inverse @ np.array([u_prime, v_prime, 1.0])
    if abs(g[2]) < 1e-12:
        return None
    return (g[0] / g[2], g[1] / g[2])


def _ground_range(u: float, v: float, m: FisheyeModel, h: IpmHomography):
    ud = undistort(u, v, m)
    if ud is None:
        return None
    g = ipm_project(ud[0], ud[1], h)
    if g is None:
        return None
    return math.hypot(g[0], g[1])


def pixel_confidence(u: int, v: int, m: FisheyeModel, h: IpmHomography, a: float, b: float) -> float:
    """Confidence bel in [0, 1] for one pixel via central finite differences.

    f(u, v) is the ground range of the pixel; the gradient norm is the size
    of the pixel in physical space. Border pixels fall back to one-sided
    differences; a pixel with no valid neighbor along some axis gets bel = 0.
    """
    f0 = _ground_range(u, v, m, h)
    if f0 is None:
        raise ValueError("pixel_confidence requires a valid pixel")

    def axis_derivative(du: int, dv: int):
        fp = _ground_range(u + du, v + dv, m, h) if (0 <= u + du < m.width and 0 <= v + dv < m.height) else None
        fm = _ground_range(u - du, v - dv, m, h) if (0 <= u - du < m.width and 0 <= v - dv < m.height) else None
        if fp is not None and fm is not None:
            return 0.5 * (fp - fm)
        if fp is not None:
            return fp - f0
        if fm is not None:
            return f0 - fm
        return None

    fu = axis_derivative(1, 0)
    fv = axis_derivative(0, 1)
    if fu is None or fv is None:
        return 0.0
    grad = math.hypot(fu, fv)
    return _confidence_from_gradient(grad, a, b)


def _confidence_from_gradient(grad, a: float, b: float):
    """bel = sigmoid(-b (a - 1/||grad f||)); grad -> 0 gives bel -> 1 for b > 0."""
    grad = np.asarray(grad, dtype=float)
    with np.errstate(divide="ignore"):
        inv = np.where(grad > 0.0, 1.0 / np.where(grad > 0.0, grad, 1.0), np.inf)
    z = b * (a - inv)
    # Clip the exponent to dodge overflow warnings; the result saturates anyway.
    bel = 1.0 / (1.0 + np.exp(np.clip(z, -700.0, 700.0)))
    bel = np.where(np.isposinf(inv), 1.0 if b > 0 else (0.5 if b == 0 else 0.0), bel)
    return bel if bel.ndim else float(bel)


@dataclass(frozen=True)
class ProjectionLut:
    """Per-pixel ground points and confidences, fixed for a given calibration.

    ground (H, W, 2) holds NaN for invalid pixels; valid marks usable pixels;
    confidence is zero wherever a pixel is invalid.
    """

    width: int
    height: int
    ground: np.ndarray
    valid: np.ndarray
    confidence: np.ndarray
    conf_a: float
    conf_b: float
    max_range: float

    def __post_init__(self):
        vi = np.nonzero(self.valid)
        object.__setattr__(self, "_valid_vu", vi)
        object.__setattr__(self, "_valid_points", self.ground[vi])
        object.__setattr__(self, "_valid_conf", self.confidence[vi])

    @property
    def valid_pixel_indices(self):
        """(rows, cols) arrays of valid pixels, in row-major order."""
        return self._valid_vu

    @property
    def valid_ground_points(self) -> np.ndarray:
        return self._valid_points

    @property
    def valid_confidences(self) -> np.ndarray:
        return self._valid_conf

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())

    def lookup(self, u: int, v: int):
        """Ground point and confidence for a pixel, or None when invalid."""
        if not self.valid[v, u]:
            return None
        return self.ground[v, u].copy(), float(self.confidence[v, u])


def build_projection_lut(
    m: FisheyeModel, h: IpmHomography, a: float, b: float, max_range: float
) -> ProjectionLut:
    """Evaluate undistortion, IPM, and confidence for every pixel once.

    Pixels outside the usable field of view (d(rho) <= 0), at the horizon, or
    beyond max_range are marked invalid. Deterministic for fixed inputs.
    """
    W, Hh = m.width, m.height
    uu, vv = np.meshgrid(np.arange(W, dtype=float), np.arange(Hh, dtype=float))
    sinv = np.linalg.inv(m.stretch)
    du = uu - m.center[0]
    dv = vv - m.center[1]
    uc = sinv[0, 0] * du + sinv[0, 1] * dv
    vc = sinv[1, 0] * du + sinv[1, 1] * dv
    rho = np.hypot(uc, vc)
    d = m.distortion(rho)
    fov_ok = d > 0.0
    k = np.where(fov_ok, m.a0 / np.where(fov_ok, d, 1.0), np.nan)
    up = m.center[0] + k * du
    vp = m.center[1] + k * dv

    hinv = h.inverse
    gx = hinv[0, 0] * up + hinv[0, 1] * vp + hinv[0, 2]
    gy = hinv[1, 0] * up + hinv[1, 1] * vp + hinv[1, 2]
    mu = hinv[2, 0] * up + hinv[2, 1] * vp + hinv[2, 2]
    horizon_ok = np.abs(mu) >= 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        gx = np.where(horizon_ok, gx / mu, np.nan)
        gy = np.where(horizon_ok, gy / mu, np.nan)
    rng = np.hypot(gx, gy)
    valid = fov_ok & horizon_ok & (rng <= max_range)

    ground = np.full((Hh, W, 2), np.nan)
    ground[..., 0] = np.where(valid, gx, np.nan)
    ground[..., 1] = np.where(valid, gy, np.nan)

    confidence = np.zeros((Hh, W))
    f = np.where(valid, rng, np.nan)
    dfu, dfv = _masked_axis_derivatives(f)
    grad = np.hypot(dfu, dfv)
    has_grad = np.isfinite(grad) & valid
    bel = _confidence_from_gradient(np.where(has_grad, grad, 1.0), a, b)
    confidence = np.where(has_grad, bel, 0.0)
    confidence = np.clip(confidence, 0.0, 1.0)

    return ProjectionLut(
        width=W,
        height=Hh,
        ground=ground,
        valid=valid,
        confidence=confidence,
        conf_a=a,
        conf_b=b,
        max_range=max_range,
    )


def _masked_axis_derivatives(f: np.ndarray):
    """Per-axis derivatives of f: central where both neighbors are finite,
    one-sided where only one is, NaN otherwise."""

    def one_axis(shift_axis: int):
        fp = np.full_like(f, np.nan)
        fm = np.full_like(f, np.nan)
        if shift_axis == 1:  # d/du: neighbors along columns
            fp[:, :-1] = f[:, 1:]
            fm[:, 1:] = f[:, :-1]
        else:  # d/dv: neighbors along rows
            fp[:-1, :] = f[1:, :]
            fm[1:, :] = f[:-1, :]
        ok_p = np.isfinite(fp)
        ok_m = np.isfinite(fm)
        central = 0.5 * (fp - fm)
        fwd = fp - f
        bwd = f - fm
        out = np.where(ok_p & ok_m, central, np.where(ok_p, fwd, np.where(ok_m, bwd, np.nan)))
        return out

    return one_axis(1), one_axis(0)


@dataclass(frozen=True)
class CameraCalibration:
    """Everything needed to build the projection LUT, as read from disk."""

    model: FisheyeModel
    homography: IpmHomography
    conf_a: float
    conf_b: float
    max_range: float

    def build_lut(self) -> ProjectionLut:
        return build_projection_lut(self.model, self.homography, self.conf_a, self.conf_b, self.max_range)


def calibration_from_dict(data: dict) -> CameraCalibration:
    if data.get("version") != CALIBRATION_VERSION:
        raise ValueError(f"unsupported calibration version: {data.get('version')!r}")
    model = FisheyeModel(
        a0=float(data["a0"]),
        a2=float(data["a2"]),
        a3=float(data["a3"]),
        a4=float(data["a4"]),
        stretch=np.array(data["stretch"], dtype=float).reshape(2, 2),
        center=np.array(data["center"], dtype=float),
        width=int(data["width"]),
        height=int(data["height"]),
    )
    homography = IpmHomography(np.array(data["H"], dtype=float).reshape(3, 3))
    return CameraCalibration(
        model=model,
        homography=homography,
        conf_a=float(data["conf_a"]),
        conf_b=float(data["conf_b"]),
        max_range=float(data["max_range"]),
    )


def load_calibration(path) -> CameraCalibration:
    with open(path, "r", encoding="utf-8") as fh:
        return calibration_from_dict(json.load(fh))


def default_calibration() -> CameraCalibration:
    """The calibration shipped with the package (512x512 top-down fisheye)."""
    text = resources.files("lotslam.data").joinpath(DEFAULT_CALIBRATION_RESOURCE).read_text()
    return calibration_from_dict(json.loads(text))
