"""Fundamental-mode phase-velocity dispersion of a water-loaded layered seabed.

The P-SV motion-stress vector (U, W, S, T) of each elastic layer obeys
``b' = A b`` with ``u_x = U e^{i(kx-wt)}``, ``u_z = i W e^{i(kx-wt)}``,
``tau_zz = i S e^{i(kx-wt)}`` and ``tau_xz = T e^{i(kx-wt)}``.  The two
solutions decaying into the half-space are carried upward as their wedge
product (the 6 second-order minors), which keeps the propagation free of the
precision loss of the plain Thomson-Haskell product.  Each layer propagator
``exp(-A h)`` is split into its P and S parts with Sylvester's formula; the
P-P and S-S minors are height independent and only the P-S cross minors carry
the exponential growth, so that factor can be scaled out exactly.

At the seafloor the elastic wedge is matched to the single acoustic solution
of the water column (free surface at the top, no shear traction and
continuous normal displacement/stress at the bottom).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geo_model import LayeredEarthModel

N_FREQ = 21

ROOT_TOL = 1e-6          # km/s, bisection bracket width
SCAN_RATIO = 1.005       # multiplicative step of the sign-change scan
RESTART_RATIO = 0.97     # continuation starts this far below the previous root
LOWER_FRACTION = 0.6     # scan floor as a fraction of the slowest wave speed

_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


class RootNotFound(RuntimeError):
    """No sign change of the secular function below the half-space shear speed."""

    def __init__(self, freq: float):
        super().__init__(f"no fundamental-mode root bracketed at {freq:g} Hz")
        self.freq = freq


@dataclass(frozen=True)
class FrequencyGrid:
    freqs: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.freqs, dtype=float)
        if f.ndim != 1 or f.size < 1:
            raise ValueError("frequency grid must be a non-empty 1-D array")
        if np.any(~np.isfinite(f)) or np.any(f <= 0):
            raise ValueError("frequencies must be finite and positive")
        if np.any(np.diff(f) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        object.__setattr__(self, "freqs", f)

    def __len__(self) -> int:
        return self.freqs.size

    def __eq__(self, other) -> bool:
        return isinstance(other, FrequencyGrid) and np.array_equal(self.freqs, other.freqs)

    def __hash__(self):
        return hash(self.freqs.tobytes())

    def matches(self, other: "FrequencyGrid", rtol: float = 1e-9) -> bool:
        return len(self) == len(other) and np.allclose(self.freqs, other.freqs, rtol=rtol, atol=0)


@dataclass(frozen=True)
class DispersionCurve:
    grid: FrequencyGrid
    phase_vel: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.phase_vel, dtype=float)
        if v.shape != self.grid.freqs.shape:
            raise ValueError("phase velocities and frequencies differ in length")
        if np.any(~np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("phase velocities must be finite and positive")
        object.__setattr__(self, "phase_vel", v)

    @property
    def freqs(self) -> np.ndarray:
        return self.grid.freqs

    def to_csv(self, path) -> None:
        rows = "\n".join(f"{float(f)!r},{float(c)!r}" for f, c in zip(self.freqs, self.phase_vel))
        with open(path, "w") as fh:
            fh.write("freq_hz,phase_vel_km_s\n" + rows + "\n")

    @classmethod
    def from_csv(cls, path) -> "DispersionCurve":
        with open(path) as fh:
            header = fh.readline().strip().replace(" ", "")
            if header != "freq_hz,phase_vel_km_s":
                raise ValueError(f"{path}: expected header 'freq_hz,phase_vel_km_s', got {header!r}")
            rows = []
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: expected 2 columns")
                try:
                    rows.append((float(parts[0]), float(parts[1])))
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
        if not rows:
            raise ValueError(f"{path}: no data rows")
        arr = np.array(rows)
        return cls(FrequencyGrid(arr[:, 0]), arr[:, 1])


def default_grid() -> FrequencyGrid:
    """21 log-spaced frequencies from 0.2 Hz to 2.5 Hz."""
    return FrequencyGrid(np.geomspace(0.2, 2.5, N_FREQ))


# --------------------------------------------------------------------------
# numerical kernels
# --------------------------------------------------------------------------

@njit(cache=True)
def _trig(nu2, h):
    """cosh(nu h), sinh(nu h)/nu and the exponent scaled out of both.

    Works for nu^2 of either sign; for evanescent waves the returned values
    are multiplied by exp(-nu h) and ``nu h`` is returned as the exponent.
    """
    if nu2 > 0.0:
        nu = math.sqrt(nu2)
        x = nu * h
        e = math.exp(-2.0 * x)
        return 0.5 * (1.0 + e), 0.5 * (1.0 - e) / nu if nu > 0 else h, x
    elif nu2 < 0.0:
        q = math.sqrt(-nu2)
        x = q * h
        return math.cos(x), math.sin(x) / q, 0.0
    return 1.0, h, 0.0


@njit(cache=True)
def _system_matrix(k, omega, vp, vs, rho, a):
    mu = rho * vs * vs
    lam2mu = rho * vp * vp
    lam = lam2mu - 2.0 * mu
    rw2 = rho * omega * omega
    a[:, :] = 0.0
    a[0, 1] = k
    a[0, 3] = 1.0 / mu
    a[1, 0] = -k * lam / lam2mu
    a[1, 2] = 1.0 / lam2mu
    a[2, 1] = -rw2
    a[2, 3] = -k
    a[3, 0] = 4.0 * k * k * mu * (lam + mu) / lam2mu - rw2
    a[3, 2] = k * lam / lam2mu


@njit(cache=True)
def _minors(m, out):
    p = 0
    for i in range(4):
        for j in range(i + 1, 4):
            q = 0
            for r in range(4):
                for s in range(r + 1, 4):
                    out[p, q] = m[i, r] * m[j, s] - m[i, s] * m[j, r]
                    q += 1
            p += 1


@njit(cache=True)
def _propagate(k, omega, h, vp, vs, rho, w, work, normalize):
    """Apply the second compound of exp(-A h) to the wedge ``w`` in place.

    The result carries an extra positive factor exp(-(nu_a + nu_b) h) for
    evanescent waves (and a max-abs normalisation when ``normalize``), which
    leaves the sign of the secular function intact.  ``work`` is a (6, 4, 4)
    scratch buffer.
    """
    a = work[0]
    a2 = work[1]
    pa = work[2]
    pb = work[3]
    ma = work[4]
    mb = work[5]
    _system_matrix(k, omega, vp, vs, rho, a)
    for i in range(4):
        for j in range(4):
            acc = 0.0
            for l in range(4):
                acc += a[i, l] * a[l, j]
            a2[i, j] = acc
    w2 = omega * omega
    na2 = k * k - w2 / (vp * vp)
    nb2 = k * k - w2 / (vs * vs)
    gap = na2 - nb2
    for i in range(4):
        for j in range(4):
            pa[i, j] = a2[i, j] / gap
            pb[i, j] = -a2[i, j] / gap
        pa[i, i] -= nb2 / gap
        pb[i, i] += na2 / gap
    ca, sa, xa = _trig(na2, h)
    cb, sb, xb = _trig(nb2, h)
    # M = P (c I - s A); P and A commute
    for i in range(4):
        for j in range(4):
            acc_a = 0.0
            acc_b = 0.0
            for l in range(4):
                acc_a += pa[i, l] * a[l, j]
                acc_b += pb[i, l] * a[l, j]
            ma[i, j] = ca * pa[i, j] - sa * acc_a
            mb[i, j] = cb * pb[i, j] - sb * acc_b
    scale = math.exp(-(xa + xb))
    out = np.empty(6)
    p = 0
    for i in range(4):
        for j in range(i + 1, 4):
            acc = 0.0
            q = 0
            for r in range(4):
                for s in range(r + 1, 4):
                    pure = (pa[i, r] * pa[j, s] - pa[i, s] * pa[j, r]
                            + pb[i, r] * pb[j, s] - pb[i, s] * pb[j, r])
                    cross = (ma[i, r] * mb[j, s] + mb[i, r] * ma[j, s]
                             - ma[i, s] * mb[j, r] - mb[i, s] * ma[j, r])
                    acc += (scale * pure + cross) * w[q]
                    q += 1
            out[p] = acc
            p += 1
    big = 1.0
    if normalize:
        big = 0.0
        for p in range(6):
            if abs(out[p]) > big:
                big = abs(out[p])
    for p in range(6):
        w[p] = out[p] / big


def _layer_compound(k, omega, h, vp, vs, rho):
    """Dense (6, 6) scaled compound propagator, for inspection and tests."""
    work = np.empty((6, 4, 4))
    comp = np.empty((6, 6))
    for q in range(6):
        w = np.zeros(6)
        w[q] = 1.0
        _propagate(k, omega, h, vp, vs, rho, w, work, False)
        comp[:, q] = w
    return comp


@njit(cache=True)
def _halfspace_wedge(k, omega, vp, vs, rho):
    mu = rho * vs * vs
    w2 = omega * omega
    na = math.sqrt(k * k - w2 / (vp * vp))
    nb = math.sqrt(k * k - w2 / (vs * vs))
    ep = np.array([k, na, rho * w2 - 2.0 * mu * k * k, -2.0 * mu * k * na])
    es = np.array([nb, k, -2.0 * mu * k * nb, -mu * (k * k + nb * nb)])
    w = np.empty(6)
    p = 0
    for i in range(4):
        for j in range(i + 1, 4):
            w[p] = ep[i] * es[j] - ep[j] * es[i]
            p += 1
    return w


@njit(cache=True)
def _secular(c, omega, h, vp, vs, rho, wdepth, wvp, wrho):
    """Secular function; its zeros in c are the modal phase velocities."""
    k = omega / c
    n = vs.size
    w = _halfspace_wedge(k, omega, vp[n - 1], vs[n - 1], rho[n - 1])
    w /= np.max(np.abs(w))
    work = np.empty((6, 4, 4))
    for i in range(n - 2, -1, -1):
        _propagate(k, omega, h[i], vp[i], vs[i], rho[i], w, work, True)
    if wdepth > 0.0:
        nu2 = k * k - omega * omega / (wvp * wvp)
        cw, sw, _ = _trig(nu2, wdepth)
        uz = cw
        szz = -wrho * omega * omega * sw
        norm = max(abs(uz), abs(szz))
        uz /= norm
        szz /= norm
    else:
        uz = 1.0
        szz = 0.0
    return szz * w[4] - uz * w[5]


@njit(cache=True)
def _bisect(a, fa, b, omega, h, vp, vs, rho, wdepth, wvp, wrho, tol):
    while b - a > tol:
        m = 0.5 * (a + b)
        fm = _secular(m, omega, h, vp, vs, rho, wdepth, wvp, wrho)
        if fm == 0.0:
            return m
        if (fm > 0.0) == (fa > 0.0):
            a = m
            fa = fm
        else:
            b = m
    return 0.5 * (a + b)


@njit(cache=True)
def _curve(freqs, h, vp, vs, rho, wdepth, wvp, wrho, tol, scan, restart, lower, out):
    """Fill ``out`` with fundamental-mode velocities; return index of a failed
    frequency or -1.  Frequencies are processed from high to low so each scan
    can start just below the previous (slower) root."""
    n = vs.size
    slow = np.min(vs)
    if wdepth > 0.0 and wvp < slow:
        slow = wvp
    c_lo = lower * slow
    c_hi = vs[n - 1] * (1.0 - 1e-9)
    prev = -1.0
    for idx in range(freqs.size - 1, -1, -1):
        omega = 2.0 * math.pi * freqs[idx]
        f_lo = _secular(c_lo, omega, h, vp, vs, rho, wdepth, wvp, wrho)
        ref_pos = f_lo > 0.0
        if prev < 0.0:
            a = c_lo
        else:
            a = max(c_lo, restart * prev)
            while a > c_lo:
                fa = _secular(a, omega, h, vp, vs, rho, wdepth, wvp, wrho)
                if (fa > 0.0) == ref_pos:
                    break
                a = max(c_lo, a * restart)
        fa = _secular(a, omega, h, vp, vs, rho, wdepth, wvp, wrho)
        found = False
        while a < c_hi:
            b = min(a * scan, c_hi)
            fb = _secular(b, omega, h, vp, vs, rho, wdepth, wvp, wrho)
            if (fb > 0.0) != (fa > 0.0) or fb == 0.0:
                out[idx] = _bisect(a, fa, b, omega, h, vp, vs, rho, wdepth, wvp, wrho, tol)
                found = True
                break
            a = b
            fa = fb
        if not found:
            return idx
        prev = out[idx]
    return -1


def model_arrays(model: LayeredEarthModel):
    h, vp, vs, rho = model.as_arrays()
    return h, vp, vs, rho, float(model.water_depth), float(model.water_vp), float(model.water_rho)


def secular_function(model: LayeredEarthModel, freq: float, c: float) -> float:
    """Value of the dispersion secular function at (freq, c)."""
    return float(_secular(c, 2.0 * math.pi * freq, *model_arrays(model)))


def dispersion_values(h, vp, vs, rho, water_depth, water_vp, water_rho, freqs) -> np.ndarray:
    """Array-level entry point used by the dataset generator."""
    out = np.zeros(len(freqs))
    bad = _curve(np.ascontiguousarray(freqs, dtype=float), h, vp, vs, rho,
                 float(water_depth), float(water_vp), float(water_rho),
                 ROOT_TOL, SCAN_RATIO, RESTART_RATIO, LOWER_FRACTION, out)
    if bad >= 0:
        raise RootNotFound(float(freqs[bad]))
    return out


def dispersion(model: LayeredEarthModel, grid: FrequencyGrid | None = None) -> DispersionCurve:
    """Fundamental-mode phase velocity (km/s) at every grid frequency."""
    grid = default_grid() if grid is None else grid
    return DispersionCurve(grid, dispersion_values(*model_arrays(model), grid.freqs))


def rayleigh_halfspace_velocity(vs: float, vp: float) -> float:
    """Rayleigh speed of a homogeneous half-space from the classical cubic.

    With x = (c/vs)^2 and g = (vs/vp)^2 the Rayleigh equation reduces to
    x^3 - 8x^2 + (24 - 16g)x - 16(1 - g) = 0, whose root in (0, 1) is taken.
    """
    g = (vs / vp) ** 2
    roots = np.roots([1.0, -8.0, 24.0 - 16.0 * g, -16.0 * (1.0 - g)])
    real = roots[np.abs(roots.imag) < 1e-12].real
    x = real[(real > 0) & (real < 1)]
    if x.size != 1:
        raise ValueError("no unique Rayleigh root")
    return vs * math.sqrt(x[0])
