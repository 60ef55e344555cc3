"""Dense optical flow: coarse-to-fine variational estimation and 8-bit quantization.

The estimator minimizes a robust energy with brightness constancy, gradient
constancy (weight gamma) and Charbonnier-regularized smoothness (weight
alpha), solved on an image pyramid with warping, fixed-point linearization
and red-black successive over-relaxation. Defaults are calibrated for 8-bit
intensity range; inputs in [0, 1] are rescaled internally.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError
from .imageops import bilinear_sample, central_diff, resize_bilinear, to_gray

CHARBONNIER_EPS = 1e-3
_EPS2 = CHARBONNIER_EPS * CHARBONNIER_EPS
_INTENSITY_SCALE = 255.0  # solver works in 8-bit units; see FlowParams docs


@dataclass
class FlowParams:
    """Solver parameters. alpha/gamma follow the classic variational-flow
    literature for 8-bit intensities; all are configurable."""

    alpha: float = 30.0
    gamma: float = 10.0
    pyramid_scale: float = 0.9
    outer_iters: int = 5
    inner_iters: int = 20
    omega: float = 1.9
    min_pyramid_side: int = 16
    presmooth_sigma: float = 0.8

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma < 0:
            raise ValueError("alpha must be positive, gamma non-negative")
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError("pyramid_scale must be in (0, 1)")
        if not 0.0 < self.omega < 2.0:
            raise ValueError("omega must be in (0, 2)")
        if self.outer_iters < 1 or self.inner_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.min_pyramid_side < 4:
            raise ValueError("min_pyramid_side must be >= 4")


@dataclass
class FlowField:
    width: int
    height: int
    u: np.ndarray  # horizontal displacement, shape (height, width)
    v: np.ndarray  # vertical displacement, shape (height, width)


@dataclass
class QuantizedFlow:
    width: int
    height: int
    qu: np.ndarray  # uint8, shape (height, width)
    qv: np.ndarray
    m_scale: float  # max absolute component of the source field


def _pyramid_sizes(h, w, scale, min_side):
    sizes = [(h, w)]
    k = 1
    while True:
        nh = int(round(h * scale**k))
        nw = int(round(w * scale**k))
        if min(nh, nw) < min_side:
            break
        sizes.append((nh, nw))
        k += 1
    return sizes


def _build_pyramid(img, sizes, scale):
    # incremental smooth-and-shrink; sigma follows the downsampling factor
    sigma = 0.6 * np.sqrt(scale**-2 - 1.0)
    levels = [img]
    for (nh, nw) in sizes[1:]:
        prev = gaussian_filter(levels[-1], sigma, mode="nearest")
        levels.append(resize_bilinear(prev, nh, nw))
    return levels


def _neighbor_weighted_sum(wh, wv, field):
    # wh[i, j] weights edge (i,j)-(i,j+1); wv[i, j] weights (i,j)-(i+1,j)
    s = np.zeros_like(field)
    s[:, 1:] += wh * field[:, :-1]
    s[:, :-1] += wh * field[:, 1:]
    s[1:, :] += wv * field[:-1, :]
    s[:-1, :] += wv * field[1:, :]
    return s


def _edge_weight_sum(wh, wv, shape):
    s = np.zeros(shape)
    s[:, 1:] += wh
    s[:, :-1] += wh
    s[1:, :] += wv
    s[:-1, :] += wv
    return s


def _solve_level(i1, i2, u, v, p: FlowParams):
    h, w = i1.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    i1x = central_diff(i1, 1)
    i1y = central_diff(i1, 0)
    i2x = central_diff(i2, 1)
    i2y = central_diff(i2, 0)
    red = (yy.astype(np.intp) + xx.astype(np.intp)) % 2 == 0
    alpha = p.alpha
    gamma = p.gamma

    for _ in range(p.outer_iters):
        ys = yy + v
        xs = xx + u
        mask = ((ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)).astype(np.float64)
        i2w = bilinear_sample(i2, ys, xs)
        i2wx = bilinear_sample(i2x, ys, xs)
        i2wy = bilinear_sample(i2y, ys, xs)

        ix = 0.5 * (i1x + i2wx)
        iy = 0.5 * (i1y + i2wy)
        iz = i2w - i1
        ixz = i2wx - i1x
        iyz = i2wy - i1y
        ixx = central_diff(ix, 1)
        ixy = central_diff(ix, 0)
        iyx = central_diff(iy, 1)
        iyy = central_diff(iy, 0)

        du = np.zeros_like(u)
        dv = np.zeros_like(v)
        for _ in range(p.inner_iters):
            # lagged data robustness factor
            r0 = iz + ix * du + iy * dv
            r1 = ixz + ixx * du + ixy * dv
            r2 = iyz + iyx * du + iyy * dv
            s2 = r0 * r0 + gamma * (r1 * r1 + r2 * r2)
            psi_d = mask * 0.5 / np.sqrt(s2 + _EPS2)

            j11 = psi_d * (ix * ix + gamma * (ixx * ixx + iyx * iyx))
            j12 = psi_d * (ix * iy + gamma * (ixx * ixy + iyx * iyy))
            j22 = psi_d * (iy * iy + gamma * (ixy * ixy + iyy * iyy))
            ju = psi_d * (ix * iz + gamma * (ixx * ixz + iyx * iyz))
            jv = psi_d * (iy * iz + gamma * (ixy * ixz + iyy * iyz))

            # lagged smoothness factor on the total flow
            tu = u + du
            tv = v + dv
            grad2 = (central_diff(tu, 1) ** 2 + central_diff(tu, 0) ** 2
                     + central_diff(tv, 1) ** 2 + central_diff(tv, 0) ** 2)
            psi_s = 0.5 / np.sqrt(grad2 + _EPS2)
            wh = 0.5 * (psi_s[:, :-1] + psi_s[:, 1:])
            wv_ = 0.5 * (psi_s[:-1, :] + psi_s[1:, :])
            wsum = _edge_weight_sum(wh, wv_, (h, w))

            for color in (red, ~red):
                su = _neighbor_weighted_sum(wh, wv_, u + du)
                sv = _neighbor_weighted_sum(wh, wv_, v + dv)
                rhs_u = alpha * (su - wsum * u) - ju
                rhs_v = alpha * (sv - wsum * v) - jv
                a11 = j11 + alpha * wsum
                a12 = j12
                a22 = j22 + alpha * wsum
                det = a11 * a22 - a12 * a12
                du_star = (a22 * rhs_u - a12 * rhs_v) / det
                dv_star = (a11 * rhs_v - a12 * rhs_u) / det
                du[color] = (1.0 - p.omega) * du[color] + p.omega * du_star[color]
                dv[color] = (1.0 - p.omega) * dv[color] + p.omega * dv_star[color]
        u = u + du
        v = v + dv
        yield u, v


def flow_energy(img_t, img_t1, u, v, params: FlowParams | None = None,
                margin: int = 6) -> float:
    """Variational energy of a candidate flow.

    The data term is summed over the image minus a border margin (clamped
    warping pollutes the border), the smoothness term over the full field.
    Uses the same internal intensity scale as estimate_flow, so values are
    comparable across solver iterations.
    """
    p = params or FlowParams()
    i1 = to_gray(img_t) * _INTENSITY_SCALE
    i2 = to_gray(img_t1) * _INTENSITY_SCALE
    if p.presmooth_sigma > 0:
        i1 = gaussian_filter(i1, p.presmooth_sigma, mode="nearest")
        i2 = gaussian_filter(i2, p.presmooth_sigma, mode="nearest")
    h, w = i1.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    i2w = bilinear_sample(i2, yy + v, xx + u)
    i2wx = bilinear_sample(central_diff(i2, 1), yy + v, xx + u)
    i2wy = bilinear_sample(central_diff(i2, 0), yy + v, xx + u)
    data = (i2w - i1) ** 2 + p.gamma * (
        (i2wx - central_diff(i1, 1)) ** 2 + (i2wy - central_diff(i1, 0)) ** 2)
    grad2 = (central_diff(u, 1) ** 2 + central_diff(u, 0) ** 2
             + central_diff(v, 1) ** 2 + central_diff(v, 0) ** 2)
    m = margin if min(h, w) > 2 * margin else 0
    sl = (slice(m, h - m), slice(m, w - m))
    return float(np.sum(np.sqrt(data[sl] + _EPS2))
                 + p.alpha * np.sum(np.sqrt(grad2 + _EPS2)))


def estimate_flow(img_t, img_t1, params: FlowParams | None = None,
                  energy_log: list | None = None) -> FlowField:
    """Estimate dense flow from img_t to img_t1 (both [0, 1], same shape).

    Color inputs are converted to grayscale by channel mean. If energy_log
    is a list, the energy after each outer iteration at the finest pyramid
    level is appended to it.
    """
    p = params or FlowParams()
    i1 = to_gray(img_t)
    i2 = to_gray(img_t1)
    if i1.shape != i2.shape:
        raise DataError(f"flow input shapes differ: {i1.shape} vs {i2.shape}")
    i1 = i1 * _INTENSITY_SCALE
    i2 = i2 * _INTENSITY_SCALE
    if p.presmooth_sigma > 0:
        i1 = gaussian_filter(i1, p.presmooth_sigma, mode="nearest")
        i2 = gaussian_filter(i2, p.presmooth_sigma, mode="nearest")

    h, w = i1.shape
    sizes = _pyramid_sizes(h, w, p.pyramid_scale, p.min_pyramid_side)
    pyr1 = _build_pyramid(i1, sizes, p.pyramid_scale)
    pyr2 = _build_pyramid(i2, sizes, p.pyramid_scale)

    u = np.zeros(sizes[-1])
    v = np.zeros(sizes[-1])
    for lvl in range(len(sizes) - 1, -1, -1):
        lh, lw = sizes[lvl]
        if u.shape != (lh, lw):
            u = resize_bilinear(u, lh, lw) * (lw / u.shape[1])
            v = resize_bilinear(v, lh, lw) * (lh / v.shape[0])
        finest = lvl == 0
        for (u, v) in _solve_level(pyr1[lvl], pyr2[lvl], u, v, p):
            if finest and energy_log is not None:
                energy_log.append(flow_energy(img_t, img_t1, u, v, p))
    return FlowField(width=w, height=h, u=u, v=v)


def quantize_flow(field: FlowField) -> QuantizedFlow:
    """Map both components into [0, 255] symmetrically about 128.

    The shared scale M is the max absolute value over both components;
    q = clamp(round_half_up((x / M + 1) * 127.5)). A zero field maps to
    all-128 planes with m_scale 0. Amplitude is not preserved: a
    near-zero field has its residual noise stretched to the full range.
    """
    m = float(max(np.abs(field.u).max(), np.abs(field.v).max(), 0.0))
    if m == 0.0:
        full = np.full((field.height, field.width), 128, dtype=np.uint8)
        return QuantizedFlow(field.width, field.height, full, full.copy(), 0.0)

    def q(x):
        vals = np.floor((x / m + 1.0) * 127.5 + 0.5)
        return np.clip(vals, 0, 255).astype(np.uint8)

    return QuantizedFlow(field.width, field.height, q(field.u), q(field.v), m)


def dequantize_flow(qf: QuantizedFlow) -> FlowField:
    """Inverse of quantize_flow up to quantization error <= m_scale / 255."""

    def dq(plane):
        return (plane.astype(np.float64) / 127.5 - 1.0) * qf.m_scale

    return FlowField(qf.width, qf.height, dq(qf.qu), dq(qf.qv))


_QFLOW_MAGIC = b"QFLW"
QFLOW_VERSION = 1


def write_qflow(path, qf: QuantizedFlow) -> None:
    """Serialize little-endian: magic, u32 version, u32 width, u32 height,
    f32 m_scale, then qu and qv planes row-major."""
    with open(path, "wb") as f:
        f.write(_QFLOW_MAGIC)
        f.write(struct.pack("<IIIf", QFLOW_VERSION, qf.width, qf.height, qf.m_scale))
        f.write(np.ascontiguousarray(qf.qu, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(qf.qv, dtype=np.uint8).tobytes())


def read_qflow(path) -> QuantizedFlow:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _QFLOW_MAGIC:
        raise DataError(f"not a qflow file: {path}")
    version, width, height, m_scale = struct.unpack_from("<IIIf", blob, 4)
    if version != QFLOW_VERSION:
        raise DataError(f"unsupported qflow version {version} in {path}")
    n = width * height
    expected = 20 + 2 * n
    if len(blob) != expected:
        raise DataError(f"truncated qflow file {path}: {len(blob)} != {expected} bytes")
    qu = np.frombuffer(blob, dtype=np.uint8, count=n, offset=20).reshape(height, width)
    qv = np.frombuffer(blob, dtype=np.uint8, count=n, offset=20 + n).reshape(height, width)
    return QuantizedFlow(width, height, qu.copy(), qv.copy(), float(m_scale))
