"""Arrival-time histograms, constrained four-peak fits and window selection.

The histogram model has two signal peaks a fixed ``bit_delay`` apart and two
Raman peaks.  Both pairs share one area ratio ``q`` between the undelayed and
delayed paths: the bit-0 signal peak is the bit-1 peak scaled by ``q``, and
the delayed Raman peak is the early Raman peak shifted by ``raman_delay`` and
scaled by ``1/q``.  All four peaks share one Gaussian FWHM and sit on a flat
pedestal.  The delayed Raman peak lands on top of the bit-0 signal peak,
which is why the fit needs the constraint at all.

Fitting works in nanoseconds; public fields are in seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal, special

from .errors import DomainError, FitError
from .photonics import DEFAULT_BIT_DELAY, ClickLog

NS = 1e-9
_K = 4.0 * math.log(2.0)
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class TimingHistogram:
    bin_width: float
    origin: float
    counts: np.ndarray

    def __post_init__(self):
        if not self.bin_width > 0:
            raise DomainError("bin_width must be > 0")
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or len(self.counts) < 1:
            raise DomainError("histogram needs at least one bin")
        if np.any(self.counts < 0):
            raise DomainError("counts must be nonnegative")

    @property
    def edges(self):
        return self.origin + self.bin_width * np.arange(len(self.counts) + 1)

    @property
    def centers(self):
        return self.origin + self.bin_width * (np.arange(len(self.counts)) + 0.5)

    @property
    def total(self):
        return int(self.counts.sum())

    def scaled(self, factor):
        return TimingHistogram(self.bin_width, self.origin, self.counts * int(factor))


def _offsets(clicks):
    if isinstance(clicks, ClickLog):
        return np.asarray(clicks.time_offset, dtype=float)
    clicks = list(clicks) if not isinstance(clicks, np.ndarray) else clicks
    if isinstance(clicks, np.ndarray):
        return clicks.astype(float)
    return np.array([c.time_offset for c in clicks], dtype=float)


def build_histogram(clicks, bin_width=4 * NS, origin=None, n_bins=None):
    """Histogram click time offsets into bins ``[origin + i*w, origin + (i+1)*w)``.

    ``clicks`` may be a :class:`ClickLog`, an iterable of ``ClickEvent`` or an
    array of offsets in seconds.  By default the range covers every click.
    """
    if not bin_width > 0:
        raise DomainError("bin_width must be > 0")
    t = _offsets(clicks)
    if origin is None:
        origin = math.floor(t.min() / bin_width) * bin_width if len(t) else 0.0
    idx = np.floor((t - origin) / bin_width).astype(np.int64)
    if n_bins is None:
        n_bins = max(int(idx.max()) + 1 if len(idx) else 1, 1)
    inside = (idx >= 0) & (idx < n_bins)
    counts = np.bincount(idx[inside], minlength=n_bins)
    return TimingHistogram(bin_width, origin, counts)


# --- peak model ---------------------------------------------------------------

def _gauss(x, c, w):
    return np.exp(-_K * (x - c) ** 2 / w**2)


def _full_model(p, x, D):
    c0, w, a1, cR, rA, d, q, ped = p
    return (q * a1 * _gauss(x, c0, w) + a1 * _gauss(x, c0 + D, w)
            + rA * _gauss(x, cR, w) + rA / q * _gauss(x, cR + d, w) + ped)


def _full_jac(p, x, D):
    c0, w, a1, cR, rA, d, q, ped = p
    comps = [(c0, q * a1), (c0 + D, a1), (cR, rA), (cR + d, rA / q)]
    G, dGc, dGw = [], [], []
    for c, _ in comps:
        g = _gauss(x, c, w)
        G.append(g)
        dGc.append(g * 2 * _K * (x - c) / w**2)
        dGw.append(g * 2 * _K * (x - c) ** 2 / w**3)
    J = np.empty((len(x), 8))
    J[:, 0] = q * a1 * dGc[0] + a1 * dGc[1]
    J[:, 1] = sum(a * dw for (_, a), dw in zip(comps, dGw))
    J[:, 2] = q * G[0] + G[1]
    J[:, 3] = rA * dGc[2] + rA / q * dGc[3]
    J[:, 4] = G[2] + G[3] / q
    J[:, 5] = rA / q * dGc[3]
    J[:, 6] = a1 * G[0] - rA / q**2 * G[3]
    J[:, 7] = 1.0
    return J


def _signal_model(p, x, D):
    c0, w, a1, q, ped = p
    return q * a1 * _gauss(x, c0, w) + a1 * _gauss(x, c0 + D, w) + ped


def _signal_jac(p, x, D):
    c0, w, a1, q, ped = p
    g0, g1 = _gauss(x, c0, w), _gauss(x, c0 + D, w)
    J = np.empty((len(x), 5))
    J[:, 0] = q * a1 * g0 * 2 * _K * (x - c0) / w**2 + a1 * g1 * 2 * _K * (x - c0 - D) / w**2
    J[:, 1] = (q * a1 * g0 * 2 * _K * (x - c0) ** 2 + a1 * g1 * 2 * _K * (x - c0 - D) ** 2) / w**3
    J[:, 2] = q * g0 + g1
    J[:, 3] = a1 * g0
    J[:, 4] = 1.0
    return J


@dataclass
class PeakFit:
    primary_peak_centers: tuple  # (bit 0, bit 1), seconds
    shared_fwhm: float
    peak_amplitudes: dict  # counts per bin at each peak maximum
    raman_delay: float | None
    raman_ratio: float | None
    raman_center: float | None
    pedestal: float
    residual_norm: float
    raman_detected: bool
    path_ratio: float
    stderr: dict = field(default_factory=dict)
    n_evaluations: int = 0


def _initial_guess(hist, D_ns):
    y = hist.counts.astype(float)
    x = hist.centers / NS
    bw = hist.bin_width / NS
    smooth_n = max(1, int(round(20.0 / bw)))
    ys = np.convolve(y, np.ones(smooth_n) / smooth_n, mode="same")
    if ys.max() <= 0:
        raise FitError("empty histogram")
    peaks, props = signal.find_peaks(ys, prominence=0.05 * ys.max(),
                                     distance=max(1, int(40.0 / bw)))
    if len(peaks) < 2:
        raise FitError(f"found {len(peaks)} peak(s); need at least 2",
                       {"peaks_ns": list(x[peaks])})
    top2 = np.sort(peaks[np.argsort(ys[peaks])[-2:]])
    i0, i1 = top2
    widths = signal.peak_widths(ys, [i1], rel_height=0.5)[0]
    w = float(max(widths[0] * bw, 2 * bw))
    ped = float(np.percentile(y, 10))
    a1 = max(ys[i1] - ped, 1.0)
    c0 = x[i1] - D_ns
    q = max(ys[i0] - ped, 1.0) / a1
    # Raman partner one bit delay before the bit-0 peak, if a mode is there
    near = peaks[np.abs(x[peaks] - (c0 - D_ns)) < 0.25 * D_ns]
    raman = None
    if len(near):
        j = near[np.argmax(ys[near])]
        rA = max(ys[j] - ped, 1.0)
        raman = (float(x[j]), float(rA))
        q = max(ys[i0] - ped - rA, 0.1 * a1) / a1
    return dict(c0=c0, w=w, a1=a1, q=max(q, 0.2), ped=ped, raman=raman)


def fit_peaks(hist, bit_delay=DEFAULT_BIT_DELAY, max_nfev=2000, raman_sigma=3.0):
    """Least-squares fit of the constrained four-Gaussian arrival-time model.

    Residuals are weighted by ``sqrt(max(y, 1e-3 * max(y)))`` so that scaling
    all counts by a constant leaves the fitted shape unchanged.  If the early
    Raman peak is not found, or its fitted amplitude is below ``raman_sigma``
    standard errors, the signal-only model is used and ``raman_detected`` is
    False.
    """
    D = bit_delay / NS
    x = hist.centers / NS
    y = hist.counts.astype(float)
    sigma = np.sqrt(np.maximum(y, 1e-3 * y.max()))
    g = _initial_guess(hist, D)

    def solve(model, jac, p0):
        res = optimize.least_squares(
            lambda p: (model(p, x, D) - y) / sigma,
            p0, jac=lambda p: jac(p, x, D) / sigma[:, None],
            method="lm", x_scale="jac", max_nfev=max_nfev)
        if res.status <= 0:
            raise FitError(f"fit did not converge: {res.message}",
                           {"nfev": res.nfev, "x": res.x.tolist(), "cost": res.cost})
        try:
            cov = np.linalg.inv(res.jac.T @ res.jac)
            err = np.sqrt(np.clip(np.diag(cov), 0, None))
        except np.linalg.LinAlgError:
            err = np.full(len(p0), np.inf)
        return res, err

    if g["raman"] is not None:
        cR, rA = g["raman"]
        p0 = [g["c0"], g["w"], g["a1"], cR, rA, D, g["q"], g["ped"]]
        res, err = solve(_full_model, _full_jac, p0)
        c0, w, a1, cR, rA, d, q, ped = res.x
        if rA > raman_sigma * err[4] and w > 0 and q > 0:
            names = ["c0", "fwhm", "a1", "raman_center", "raman_amplitude", "raman_delay",
                     "ratio", "pedestal"]
            return PeakFit(
                primary_peak_centers=(c0 * NS, (c0 + D) * NS),
                shared_fwhm=abs(w) * NS,
                peak_amplitudes={"bit0": q * a1, "bit1": a1, "raman_early": rA,
                                 "raman_late": rA / q},
                raman_delay=d * NS, raman_ratio=q, raman_center=cR * NS,
                pedestal=ped, residual_norm=float(np.linalg.norm(res.fun)),
                raman_detected=True, path_ratio=q,
                stderr={n: float(e) * (NS if n in ("c0", "fwhm", "raman_center",
                                                   "raman_delay") else 1.0)
                        for n, e in zip(names, err)},
                n_evaluations=res.nfev)

    p0 = [g["c0"], g["w"], g["a1"], g["q"], g["ped"]]
    res, err = solve(_signal_model, _signal_jac, p0)
    c0, w, a1, q, ped = res.x
    if not (w > 0 and q > 0):
        raise FitError("fit converged to a non-physical shape", {"x": res.x.tolist()})
    return PeakFit(
        primary_peak_centers=(c0 * NS, (c0 + D) * NS), shared_fwhm=w * NS,
        peak_amplitudes={"bit0": q * a1, "bit1": a1, "raman_early": 0.0, "raman_late": 0.0},
        raman_delay=None, raman_ratio=None, raman_center=None, pedestal=ped,
        residual_norm=float(np.linalg.norm(res.fun)), raman_detected=False, path_ratio=q,
        stderr={n: float(e) * (NS if n in ("c0", "fwhm") else 1.0)
                for n, e in zip(["c0", "fwhm", "a1", "ratio", "pedestal"], err)},
        n_evaluations=res.nfev)


def peak_model(hist_or_x, fit, bit_delay=DEFAULT_BIT_DELAY):
    """Evaluate a fitted model at histogram bin centres (or times, seconds)."""
    x = hist_or_x.centers if isinstance(hist_or_x, TimingHistogram) else np.asarray(hist_or_x)
    x = x / NS
    D = bit_delay / NS
    c0 = fit.primary_peak_centers[0] / NS
    w = fit.shared_fwhm / NS
    a1 = fit.peak_amplitudes["bit1"]
    q = fit.path_ratio
    if fit.raman_detected:
        p = [c0, w, a1, fit.raman_center / NS, fit.peak_amplitudes["raman_early"],
             fit.raman_delay / NS, q, fit.pedestal]
        return _full_model(p, x, D)
    return _signal_model([c0, w, a1, q, fit.pedestal], x, D)


def synthetic_histogram(rng, n_counts=100_000, *, fwhm=72 * NS, bit_delay=DEFAULT_BIT_DELAY,
                        raman_delay=319.5 * NS, ratio=1.04, raman_share=0.3,
                        pedestal_share=0.03, bit0_center=0.0, raman_center=None,
                        bin_width=4 * NS):
    """Poisson-sampled histogram drawn from the constrained four-peak model.

    ``raman_share`` and ``pedestal_share`` are the expected fractions of all
    counts in the two Raman peaks and in the flat pedestal.
    """
    if raman_center is None:
        raman_center = bit0_center - bit_delay
    lo = min(raman_center, bit0_center) - 4 * fwhm
    hi = bit0_center + bit_delay + 4 * fwhm
    n_bins = int(math.ceil((hi - lo) / bin_width))
    hist = TimingHistogram(bin_width, lo, np.zeros(n_bins, np.int64))
    x = hist.centers
    area = fwhm / math.sqrt(_K / math.pi)  # integral of a unit-height peak
    sig_area = (1 - raman_share - pedestal_share) * n_counts
    ram_area = raman_share * n_counts
    a1 = sig_area / (1 + ratio) / area * bin_width
    rA = ram_area / (1 + 1 / ratio) / area * bin_width
    ped = pedestal_share * n_counts / n_bins
    mean = (ratio * a1 * _gauss(x, bit0_center, fwhm) + a1 * _gauss(x, bit0_center + bit_delay, fwhm)
            + rA * _gauss(x, raman_center, fwhm) + rA / ratio * _gauss(x, raman_center + raman_delay, fwhm)
            + ped)
    hist.counts = rng.poisson(mean)
    return hist


# --- windows ------------------------------------------------------------------

def window_capture_fraction(width, fwhm):
    """Fraction of a centred Gaussian (given FWHM) inside +/- width/2."""
    if not fwhm > 0:
        raise DomainError("fwhm must be > 0")
    if width < 0:
        raise DomainError("width must be >= 0")
    if math.isinf(width):
        return 1.0
    return float(special.erf(math.sqrt(math.log(2.0)) * width / fwhm))


@dataclass(frozen=True)
class WindowSelection:
    width: float
    centers: tuple
    captured_fraction: float
    secret_rate: float = 0.0
    zero_rate: bool = False


def window_tradeoff(scenario, widths):
    """Analytic ``(width, sifted_rate, qber)`` for each window width."""
    from . import security

    rows = []
    for w in widths:
        sc = scenario.with_window(float(w))
        S, B = security.click_rates(sc)
        qber = security.qber_model(S, B, sc.intrinsic_error) if S + B > 0 else float("nan")
        rows.append((float(w), 0.5 * (S + B), qber))
    return rows


def optimize_window(scenario, params=None, centers=None, lo_factor=0.1, hi_factor=5.0,
                    n_scan=41, xtol=1e-3):
    """Window width maximising the secret rate.

    A coarse scan brackets the best width, then golden-section search refines
    it.  The upper limit is capped at the bit delay so the two windows stay
    disjoint.  Ties go to the smaller width; a secret rate of zero everywhere
    sets ``zero_rate``.
    """
    from . import security

    params = params or security.SecurityParams()
    fwhm = scenario.detector.jitter_fwhm
    bit_delay = scenario.interferometer.bit_delay
    if centers is None:
        centers = (0.0, bit_delay)
    lo = lo_factor * fwhm
    hi = min(hi_factor * fwhm, bit_delay)

    def rate(w):
        return security.secret_rate(scenario.with_window(w), params)

    grid = np.linspace(lo, hi, n_scan)
    vals = np.array([rate(w) for w in grid])
    k = int(np.argmax(vals))  # first maximum, i.e. smallest width on ties
    best_w, best_v = float(grid[k]), float(vals[k])
    if best_v <= 0:
        return WindowSelection(best_w, centers, window_capture_fraction(best_w, fwhm), 0.0, True)
    if k == n_scan - 1:
        return WindowSelection(hi, centers, window_capture_fraction(hi, fwhm), best_v)

    a, b = float(grid[max(k - 1, 0)]), float(grid[min(k + 1, n_scan - 1)])
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = rate(c), rate(d)
    while b - a > xtol * fwhm:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = rate(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = rate(d)
    w = 0.5 * (a + b)
    v = rate(w)
    if v < best_v:
        w, v = best_w, best_v
    return WindowSelection(w, centers, window_capture_fraction(w, fwhm), v)
