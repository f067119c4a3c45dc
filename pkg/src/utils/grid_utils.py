import numpy as np

POINTS_PER_DECADE = 64
GRID_LO = 1e-3
GRID_HI = 1e6
TAIL_GRID_HI = 1e200
DEFAULT_ATOL = 1e-9
DEFAULT_RTOL = 1e-9


def geometric_grid(
    lo: float = GRID_LO,
    hi: float = GRID_HI,
    per_decade: int = POINTS_PER_DECADE,
    include_zero: bool = True,
) -> np.ndarray:
    decades = np.log10(hi) - np.log10(lo)
    count = int(round(decades * per_decade)) + 1
    grid = np.geomspace(lo, hi, count)
    if include_zero:
        grid = np.concatenate(([0.0], grid))
    return grid


def tail_grid(per_decade: int = 4, lo: float = 1e3, hi: float = TAIL_GRID_HI) -> np.ndarray:
    return geometric_grid(lo, hi, per_decade, include_zero=False)


def tolerance(values: np.ndarray, atol: float = DEFAULT_ATOL, rtol: float = DEFAULT_RTOL) -> np.ndarray:
    return atol + rtol * np.abs(values)


def nondecreasing_defect(values: np.ndarray, atol: float = DEFAULT_ATOL, rtol: float = DEFAULT_RTOL) -> float:
    """Largest drop between neighbours beyond tolerance; <= 0 means nondecreasing."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    drops = values[:-1] - values[1:] - tolerance(values[:-1], atol, rtol)
    return float(drops.max())


def nonincreasing_defect(values: np.ndarray, atol: float = DEFAULT_ATOL, rtol: float = DEFAULT_RTOL) -> float:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    rises = values[1:] - values[:-1] - tolerance(values[:-1], atol, rtol)
    return float(rises.max())


def concavity_defect(
    xs: np.ndarray,
    values: np.ndarray,
    atol: float = DEFAULT_ATOL,
    rtol: float = DEFAULT_RTOL,
    noise: np.ndarray | None = None,
) -> float:
    """Largest increase of successive chord slopes beyond tolerance; <= 0 means concave on the grid.

    `noise` is an absolute rounding bound per value; it widens the slope
    tolerance by the error it induces on each chord.
    """
    xs = np.asarray(xs, dtype=float)
    values = np.asarray(values, dtype=float)
    if xs.size < 3:
        return 0.0
    dx = np.diff(xs)
    slopes = np.diff(values) / dx
    rises = slopes[1:] - slopes[:-1] - tolerance(slopes[:-1], atol, rtol)
    if noise is not None:
        noise = np.broadcast_to(np.asarray(noise, dtype=float), values.shape)
        slope_noise = (noise[1:] + noise[:-1]) / dx
        rises = rises - slope_noise[1:] - slope_noise[:-1]
    return float(rises.max())


def pair_grid(lo: float = GRID_LO, hi: float = GRID_HI, per_decade: int = 8) -> tuple[np.ndarray, np.ndarray]:
    axis = geometric_grid(lo, hi, per_decade, include_zero=False)
    return np.meshgrid(axis, axis, indexing="ij")
