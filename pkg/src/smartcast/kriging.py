"""Ordinary kriging with a Gaussian variogram.

Empirical variogram estimation, weighted least-squares model fitting,
LU-factorized ordinary-kriging solves with jitter escalation,
leave-one-out scoring, dense grid interpolation, and stacking of
per-depth grids into a moisture volume with file exports.

The Gaussian model uses the practical-range convention
gamma(h) = nugget + sill * (1 - exp(-3 h^2 / a^2)) with gamma(0) = 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.spatial.distance import cdist

from .errors import (
    DataError,
    FactorizationError,
    FlatFieldError,
    InsufficientDataError,
    ShapeError,
    UndefinedScoreError,
)
from .vegindex import DEFAULT_NODATA, BandGrid, IndexImage, write_bandgrid, write_pgm

_JITTER_START = 1e-10
_JITTER_STOP = 1e-6


@dataclass(frozen=True)
class SamplePoint:
    """One located measurement (coordinates in grid units or meters)."""

    x: float
    y: float
    value: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y) and np.isfinite(self.value)):
            raise DataError("sample coordinates and value must be finite")


@dataclass(frozen=True)
class Variogram:
    """Gaussian variogram parameters (practical-range convention)."""

    nugget: float
    sill: float
    range_a: float

    def __post_init__(self):
        if self.nugget < 0 or self.sill <= 0 or self.range_a <= 0:
            raise DataError(
                f"need nugget >= 0, sill > 0, range > 0; got ({self.nugget}, {self.sill}, {self.range_a})"
            )


@dataclass(frozen=True)
class VariogramBin:
    """One empirical-variogram bin."""

    lag: float
    semivariance: float
    pair_count: int


@dataclass(frozen=True)
class GridGeometry:
    """Uniform cell grid; row 0 is the southmost row, origin the SW corner."""

    nx: int
    ny: int
    cell_size: float
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.cell_size <= 0:
            raise DataError("grid must have positive dimensions and cell size")

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.x0 + (np.arange(self.nx) + 0.5) * self.cell_size
        ys = self.y0 + (np.arange(self.ny) + 0.5) * self.cell_size
        return xs, ys


@dataclass(frozen=True)
class KrigingModel:
    """Factorized ordinary-kriging system over a fixed sample set."""

    points: np.ndarray          # (n, 2)
    values: np.ndarray          # (n,)
    variogram: Variogram
    lu: tuple                   # scipy (lu, piv) factorization of the bordered system
    jitter: float

    @property
    def n_samples(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class DepthLayer:
    """Interpolated grid (values + kriging variance) at one depth."""

    depth_cm: int
    geometry: GridGeometry
    values: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        shape = (self.geometry.ny, self.geometry.nx)
        if self.values.shape != shape or self.variance.shape != shape:
            raise ShapeError(f"layer arrays must be {shape}")


@dataclass(frozen=True)
class MoistureVolume:
    """Depth-sorted stack of interpolated layers sharing one geometry."""

    layers: tuple[DepthLayer, ...]

    def __post_init__(self):
        if not self.layers:
            raise DataError("volume needs at least one layer")
        depths = [l.depth_cm for l in self.layers]
        if any(b <= a for a, b in zip(depths, depths[1:])):
            raise DataError("layers must be sorted by strictly increasing depth")
        if len({l.geometry for l in self.layers}) != 1:
            raise DataError("all layers must share one grid geometry")


# -- variogram -----------------------------------------------------------------

def gaussian_variogram(h: np.ndarray | float, v: Variogram) -> np.ndarray | float:
    """Semivariance at lag h: 0 at h=0, else nugget + sill*(1 - exp(-3h^2/a^2))."""
    h_arr = np.asarray(h, dtype=np.float64)
    if np.any(h_arr < 0):
        raise DataError("lag distance must be nonnegative")
    gamma = np.where(h_arr > 0.0, v.nugget + v.sill * (1.0 - np.exp(-3.0 * h_arr**2 / v.range_a**2)), 0.0)
    return float(gamma) if np.isscalar(h) else gamma


def empirical_variogram(
    samples: list[SamplePoint], n_bins: int = 15, max_lag: float | None = None
) -> list[VariogramBin]:
    """Binned empirical semivariances: (1/2N_b) * sum of squared value diffs.

    Pairs at lag <= max_lag (default: half the maximum pairwise
    distance) are assigned to n_bins uniform bins; empty bins are
    omitted. Raises DataError when no pair falls inside max_lag.
    """
    if len(samples) < 2:
        raise InsufficientDataError("empirical variogram needs at least 2 samples")
    if n_bins < 1:
        raise DataError("n_bins must be positive")
    pts = np.array([(s.x, s.y) for s in samples])
    vals = np.array([s.value for s in samples])
    dist = cdist(pts, pts)
    iu, ju = np.triu_indices(len(samples), k=1)
    lags = dist[iu, ju]
    sqdiff = (vals[iu] - vals[ju]) ** 2
    if max_lag is None:
        max_lag = float(lags.max()) / 2.0
    if max_lag <= 0:
        raise DataError("max_lag must be positive")
    keep = (lags > 0) & (lags <= max_lag)
    if not keep.any():
        raise DataError(f"no sample pair within max_lag={max_lag}")
    lags, sqdiff = lags[keep], sqdiff[keep]
    edges = np.linspace(0.0, max_lag, n_bins + 1)
    which = np.minimum(np.digitize(lags, edges) - 1, n_bins - 1)
    bins: list[VariogramBin] = []
    for b in range(n_bins):
        sel = which == b
        count = int(sel.sum())
        if count == 0:
            continue
        bins.append(
            VariogramBin(
                lag=float(lags[sel].mean()),
                semivariance=float(sqdiff[sel].sum() / (2.0 * count)),
                pair_count=count,
            )
        )
    return bins


def _wls_nugget_sill(f: np.ndarray, gamma: np.ndarray, w: np.ndarray) -> tuple[float, float, float]:
    """Weighted LLS for gamma ~ nugget + sill*f with nugget >= 0, sill > 0.

    Returns (nugget, sill, weighted SSE); sill <= 0 solutions are
    replaced by an infinite-SSE marker.
    """
    sw = w.sum()
    swf = (w * f).sum()
    swff = (w * f * f).sum()
    swg = (w * gamma).sum()
    swfg = (w * f * gamma).sum()
    det = sw * swff - swf * swf
    nugget, sill = 0.0, 0.0
    if det > 1e-300:
        nugget = (swff * swg - swf * swfg) / det
        sill = (sw * swfg - swf * swg) / det
    if det <= 1e-300 or nugget < 0.0:
        nugget = 0.0
        sill = swfg / swff if swff > 0 else 0.0
    if sill <= 0.0:
        return 0.0, 0.0, np.inf
    resid = gamma - (nugget + sill * f)
    return nugget, sill, float((w * resid * resid).sum())


def fit_variogram(bins: list[VariogramBin]) -> Variogram:
    """Weighted least-squares Gaussian fit over (nugget, sill, range).

    Weights are pair counts. The range is located by a log-spaced grid
    search and refined by golden-section descent; (nugget, sill) are
    re-solved in closed form at every candidate range.
    """
    if len(bins) < 3:
        raise InsufficientDataError(f"variogram fit needs >= 3 nonempty bins, have {len(bins)}")
    h = np.array([b.lag for b in bins])
    gamma = np.array([b.semivariance for b in bins])
    w = np.array([b.pair_count for b in bins], dtype=np.float64)
    if np.all(gamma <= 0.0):
        raise FlatFieldError("all semivariances are zero; the field is flat")

    def sse_at(a: float) -> tuple[float, float, float]:
        f = 1.0 - np.exp(-3.0 * h**2 / a**2)
        nugget, sill, sse = _wls_nugget_sill(f, gamma, w)
        return sse, nugget, sill

    lo = max(h.min() * 0.25, 1e-9)
    hi = h.max() * 4.0
    candidates = np.geomspace(lo, hi, 80)
    scores = [sse_at(a)[0] for a in candidates]
    k = int(np.argmin(scores))

    # golden-section refinement between the neighbors of the grid optimum
    left = candidates[max(k - 1, 0)]
    right = candidates[min(k + 1, len(candidates) - 1)]
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a_l, a_r = left, right
    x1 = a_r - invphi * (a_r - a_l)
    x2 = a_l + invphi * (a_r - a_l)
    f1, f2 = sse_at(x1)[0], sse_at(x2)[0]
    for _ in range(100):
        if f1 <= f2:
            a_r, x2, f2 = x2, x1, f1
            x1 = a_r - invphi * (a_r - a_l)
            f1 = sse_at(x1)[0]
        else:
            a_l, x1, f1 = x1, x2, f2
            x2 = a_l + invphi * (a_r - a_l)
            f2 = sse_at(x2)[0]
    best_a = (a_l + a_r) / 2.0
    sse, nugget, sill = sse_at(best_a)
    if not np.isfinite(sse) or sill <= 0.0:
        raise FlatFieldError("variogram fit failed to find a positive sill")
    return Variogram(nugget=float(nugget), sill=float(sill), range_a=float(best_a))


# -- kriging system --------------------------------------------------------------

def _assemble(points: np.ndarray, v: Variogram, jitter: float) -> np.ndarray:
    n = points.shape[0]
    gamma = gaussian_variogram(cdist(points, points), v)
    a = np.zeros((n + 1, n + 1))
    a[:n, :n] = gamma + jitter * np.eye(n)
    a[:n, n] = 1.0
    a[n, :n] = 1.0
    return a


def build_model(samples: list[SamplePoint], variogram: Variogram) -> KrigingModel:
    """Assemble and factorize the bordered ordinary-kriging system.

    Exact duplicate coordinates are rejected. If the LU factorization
    fails a probe-solve residual check, nugget-like jitter is added to
    the sample block diagonal, escalating from 1e-10*sill to 1e-6*sill
    by factors of 10 before giving up.
    """
    if not samples:
        raise InsufficientDataError("kriging needs at least one sample")
    points = np.array([(s.x, s.y) for s in samples], dtype=np.float64)
    values = np.array([s.value for s in samples], dtype=np.float64)
    n = len(samples)
    for i in range(n):
        for j in range(i + 1, n):
            if points[i, 0] == points[j, 0] and points[i, 1] == points[j, 1]:
                raise DataError(f"samples {i} and {j} share coordinates ({points[i, 0]}, {points[i, 1]})")

    jitters = [0.0] + [
        variogram.sill * _JITTER_START * 10**k
        for k in range(int(np.log10(_JITTER_STOP / _JITTER_START)) + 1)
    ]
    for jitter in jitters:
        a = _assemble(points, variogram, jitter)
        try:
            factors = lu_factor(a)
        except Exception:
            continue
        x_probe = np.ones(n + 1)
        b = a @ x_probe
        solved = lu_solve(factors, b)
        resid = np.abs(a @ solved - b).max()
        scale = max(1.0, np.abs(a).max())
        if np.isfinite(resid) and resid <= 1e-9 * scale:
            return KrigingModel(points=points, values=values, variogram=variogram, lu=factors, jitter=jitter)
    raise FactorizationError(f"kriging system singular even with jitter {jitters[-1]:.3e}")


def solve_weights(model: KrigingModel, x: float, y: float) -> tuple[np.ndarray, float]:
    """Ordinary-kriging weights and Lagrange multiplier for one query point."""
    q = np.array([[x, y]], dtype=np.float64)
    rhs = np.empty(model.n_samples + 1)
    rhs[:-1] = gaussian_variogram(cdist(model.points, q)[:, 0], model.variogram)
    rhs[-1] = 1.0
    sol = lu_solve(model.lu, rhs)
    return sol[:-1], float(sol[-1])


def predict_point(model: KrigingModel, x: float, y: float) -> tuple[float, float]:
    """Kriged (value, variance) at one point.

    Weights solve the bordered system and sum to 1; the variance is
    sum(w_i * gamma_i) + mu, nonnegative up to round-off.
    """
    q = np.array([[x, y]], dtype=np.float64)
    rhs = np.empty(model.n_samples + 1)
    rhs[:-1] = gaussian_variogram(cdist(model.points, q)[:, 0], model.variogram)
    rhs[-1] = 1.0
    sol = lu_solve(model.lu, rhs)
    w = sol[:-1]
    mu = sol[-1]
    return float(w @ model.values), float(w @ rhs[:-1] + mu)


def point_in_hull(model: KrigingModel, x: float, y: float) -> bool:
    """True when (x, y) lies inside the samples' axis-aligned bounding box.

    Used to flag extrapolating queries; a bounding box is the widest
    honest hull proxy that stays defined for collinear or tiny sample
    sets.
    """
    xs, ys = model.points[:, 0], model.points[:, 1]
    return bool(xs.min() <= x <= xs.max() and ys.min() <= y <= ys.max())


def interpolate_grid(
    model: KrigingModel, geometry: GridGeometry, mask: np.ndarray | IndexImage | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Kriged value and variance at every cell center of a grid.

    `mask` (bool array or IndexImage valid mask) restricts evaluation;
    skipped cells hold NaN. Results are independent of evaluation
    order: all right-hand sides are solved against one factorization.
    """
    xs, ys = geometry.cell_centers()
    gx, gy = np.meshgrid(xs, ys)
    queries = np.column_stack([gx.ravel(), gy.ravel()])
    if mask is None:
        active = np.ones(queries.shape[0], dtype=bool)
    elif isinstance(mask, IndexImage):
        if (mask.height, mask.width) != (geometry.ny, geometry.nx):
            raise ShapeError("mask image dimensions must match the grid")
        active = mask.valid_mask().ravel()
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (geometry.ny, geometry.nx):
            raise ShapeError("mask shape must match the grid")
        active = mask.ravel()

    values = np.full(queries.shape[0], np.nan)
    variances = np.full(queries.shape[0], np.nan)
    if active.any():
        q = queries[active]
        gamma_q = gaussian_variogram(cdist(model.points, q), model.variogram)
        rhs = np.vstack([gamma_q, np.ones((1, q.shape[0]))])
        sol = lu_solve(model.lu, rhs)
        w = sol[:-1, :]
        mu = sol[-1, :]
        values[active] = w.T @ model.values
        variances[active] = np.sum(w * gamma_q, axis=0) + mu
    return values.reshape(geometry.ny, geometry.nx), variances.reshape(geometry.ny, geometry.nx)


def loo_score(samples: list[SamplePoint], variogram: Variogram) -> float:
    """Leave-one-out coefficient of determination in (-inf, 1].

    Each sample is predicted from the remaining ones under the given
    variogram; the score is 1 - SS_res/SS_tot. Raises
    UndefinedScoreError when the sample values have zero variance.
    """
    if len(samples) < 3:
        raise InsufficientDataError("leave-one-out scoring needs at least 3 samples")
    values = np.array([s.value for s in samples])
    ss_tot = float(((values - values.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise UndefinedScoreError("sample values are constant; the score is undefined")
    preds = np.empty(len(samples))
    for i in range(len(samples)):
        rest = samples[:i] + samples[i + 1 :]
        model = build_model(rest, variogram)
        preds[i], _ = predict_point(model, samples[i].x, samples[i].y)
    ss_res = float(((values - preds) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def stack_depths(layers: list[DepthLayer]) -> MoistureVolume:
    """Sort per-depth layers into a volume; geometry must be uniform."""
    if not layers:
        raise InsufficientDataError("no layers to stack")
    depths = [l.depth_cm for l in layers]
    if len(set(depths)) != len(depths):
        raise DataError(f"duplicate depths in {sorted(depths)}")
    ordered = tuple(sorted(layers, key=lambda l: l.depth_cm))
    return MoistureVolume(layers=ordered)


# -- exports ----------------------------------------------------------------------

def export_grid_csv(volume: MoistureVolume, path: str | Path) -> None:
    """Write `x,y,depth_cm,value,variance` rows for every evaluated cell."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "depth_cm", "value", "variance"])
        for layer in volume.layers:
            xs, ys = layer.geometry.cell_centers()
            for i, y in enumerate(ys):
                for j, x in enumerate(xs):
                    v = layer.values[i, j]
                    if np.isnan(v):
                        continue
                    writer.writerow([repr(float(x)), repr(float(y)), layer.depth_cm, repr(float(v)), repr(float(layer.variance[i, j]))])


def export_volume(volume: MoistureVolume, out_dir: str | Path) -> Path:
    """Write one 2-band BandGrid (+ PGM heatmap) per depth and a manifest.

    Returns the manifest path; masked cells become the nodata sentinel.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["depth_cm", "path"])
        for layer in volume.layers:
            name = f"depth_{layer.depth_cm:03d}.bgrid"
            values = np.where(np.isnan(layer.values), DEFAULT_NODATA, layer.values)
            variance = np.where(np.isnan(layer.variance), DEFAULT_NODATA, layer.variance)
            grid = BandGrid(
                width=layer.geometry.nx,
                height=layer.geometry.ny,
                nodata=DEFAULT_NODATA,
                band_names=("moisture", "variance"),
                data=np.stack([values, variance]).astype(np.float32),
            )
            write_bandgrid(grid, out_dir / name)
            write_pgm(values, out_dir / f"depth_{layer.depth_cm:03d}.pgm", nodata=DEFAULT_NODATA)
            writer.writerow([layer.depth_cm, name])
    return manifest
