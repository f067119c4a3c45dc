import functools
import logging
import math
import os
from dataclasses import dataclass
from io import BytesIO

from PIL import Image, ImageDraw, ImageFont

from models import CurvePoint

logger = logging.getLogger("perpetua.plot_utils")

PLOT_WIDTH = 640
PLOT_HEIGHT = 400
MARGIN = 48

BACKGROUND = (255, 255, 255)
AXIS = (60, 60, 60)
LINE = (31, 119, 180)
BAND = (174, 199, 232)


@functools.lru_cache(maxsize=4)
def _load_font(size: int) -> ImageFont.FreeTypeFont | ImageFont.ImageFont:
    font_path = os.getenv("FONT_PATH")
    if font_path:
        try:
            return ImageFont.truetype(font_path, size)
        except Exception as e:
            logger.warning(f"Failed to load font from {font_path}: {e}. Using default font.")
    return ImageFont.load_default()


@dataclass(frozen=True)
class PlotFrame:
    """Maps (t, y) to pixels; t is log-scaled when positive over more than a decade."""

    t_lo: float
    t_hi: float
    y_lo: float
    y_hi: float
    log_t: bool
    width: int = PLOT_WIDTH
    height: int = PLOT_HEIGHT
    margin: int = MARGIN

    @classmethod
    def fit(cls, points: list[CurvePoint], width: int = PLOT_WIDTH, height: int = PLOT_HEIGHT) -> "PlotFrame":
        ts = [p.t for p in points if math.isfinite(p.t)]
        ys = [v for p in points for v in (p.lo, p.hi, p.estimate) if math.isfinite(v)]
        t_lo, t_hi = (min(ts), max(ts)) if ts else (0.0, 1.0)
        y_lo, y_hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
        log_t = t_lo > 0 and t_hi > 10 * t_lo
        if t_hi == t_lo:
            t_lo, t_hi = t_lo - 0.5, t_hi + 0.5
            log_t = False
        if y_hi == y_lo:
            y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
        return cls(t_lo, t_hi, y_lo, y_hi, log_t, width, height)

    def _unit_t(self, t: float) -> float:
        if self.log_t:
            return (math.log(t) - math.log(self.t_lo)) / (math.log(self.t_hi) - math.log(self.t_lo))
        return (t - self.t_lo) / (self.t_hi - self.t_lo)

    def px(self, t: float, y: float) -> tuple[float, float]:
        span_x = self.width - 2 * self.margin
        span_y = self.height - 2 * self.margin
        x = self.margin + self._unit_t(t) * span_x
        y = self.height - self.margin - (y - self.y_lo) / (self.y_hi - self.y_lo) * span_y
        return round(x, 2), round(y, 2)

    def band(self, points: list[CurvePoint]) -> list[tuple[float, float]]:
        upper = [self.px(p.t, p.hi) for p in points]
        lower = [self.px(p.t, p.lo) for p in reversed(points)]
        return upper + lower

    def line(self, points: list[CurvePoint]) -> list[tuple[float, float]]:
        return [self.px(p.t, p.estimate) for p in points]


def finite_points(points: list[CurvePoint]) -> list[CurvePoint]:
    return [p for p in points if all(math.isfinite(v) for v in (p.t, p.estimate, p.lo, p.hi))]


def render_curve_png(points: list[CurvePoint], title: str = "") -> BytesIO:
    points = finite_points(points)
    frame = PlotFrame.fit(points)
    image = Image.new("RGB", (frame.width, frame.height), BACKGROUND)
    draw = ImageDraw.Draw(image)
    font = _load_font(14)

    left, bottom = frame.margin, frame.height - frame.margin
    draw.line([(left, frame.margin), (left, bottom), (frame.width - frame.margin, bottom)], fill=AXIS, width=1)
    if len(points) >= 2:
        draw.polygon(frame.band(points), fill=BAND)
        draw.line(frame.line(points), fill=LINE, width=2)
    elif points:
        x, y = frame.px(points[0].t, points[0].estimate)
        draw.ellipse((x - 3, y - 3, x + 3, y + 3), fill=LINE)

    draw.text((left, 8), title, font=font, fill=AXIS)
    draw.text((left, bottom + 8), f"t: {frame.t_lo:.4g} .. {frame.t_hi:.4g}{' (log)' if frame.log_t else ''}", font=font, fill=AXIS)
    draw.text((4, frame.margin - 20), f"{frame.y_hi:.4g}", font=font, fill=AXIS)
    draw.text((4, bottom - 8), f"{frame.y_lo:.4g}", font=font, fill=AXIS)

    buffer = BytesIO()
    image.save(buffer, format="PNG")
    buffer.seek(0)
    return buffer
