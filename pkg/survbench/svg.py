"""Static SVG figures rendered from jinja2 templates."""

import dataclasses
import os

import numpy as np
import pandas as pd
from jinja2 import Environment, FileSystemLoader
from loguru import logger as log

from survbench.lib import YEAR_DAYS, ShapeError, is_defined

TEMPLATES_DIR = os.path.join(os.path.dirname(__file__), "_templates")


@dataclasses.dataclass(frozen=True)
class Canvas:
    """Plot area inside a fixed-size figure; maps data to pixel coordinates."""

    width: int = 720
    height: int = 420
    left: int = 60
    right_margin: int = 20
    top: int = 30
    bottom_margin: int = 90

    @property
    def right(self) -> int:
        return self.width - self.right_margin

    @property
    def bottom(self) -> int:
        return self.height - self.bottom_margin

    def x(self, value, low: float, high: float):
        return self.left + (np.asarray(value, dtype=np.float64) - low) / (high - low) * (self.right - self.left)

    def y(self, value, low: float, high: float):
        return self.bottom - (np.asarray(value, dtype=np.float64) - low) / (high - low) * (self.bottom - self.top)

    def context(self) -> dict:
        return {"width": self.width, "height": self.height, "left": self.left, "right": self.right, "top": self.top, "bottom": self.bottom}

    pass


def _render(name: str, path, **context) -> None:
    env = Environment(loader=FileSystemLoader(TEMPLATES_DIR), autoescape=True)
    template = env.get_template(name)
    with open(path, "w") as stream:
        stream.write(template.render(**context))
    log.debug(f"wrote {path}")
    return


def _points(xs, ys) -> str:
    return " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))


def _range(values: np.ndarray) -> tuple:
    low, high = float(values.min()), float(values.max())
    pad = 0.05 * (high - low) if high > low else 0.05
    return low - pad, high + pad


def box_plot(groups: dict, path, title: str = "", ylabel: str = "concordance") -> None:
    """One box (quartiles, 1.5 IQR whiskers) per group with every value drawn as a point.

    Undefined values are skipped; groups without defined values are omitted.
    """
    samples = {}
    for label, values in groups.items():
        defined = np.array([v for v in values if is_defined(v)], dtype=np.float64)
        if len(defined):
            samples[label] = defined
    if not samples:
        raise ShapeError("box plot needs at least one defined value")

    canvas = Canvas(width=max(720, 60 * len(samples) + 120))
    low, high = _range(np.concatenate(list(samples.values())))
    spacing = (canvas.right - canvas.left) / len(samples)
    boxes = []
    for i, (label, values) in enumerate(samples.items()):
        q1, median, q3 = np.quantile(values, [0.25, 0.5, 0.75])
        reach = 1.5 * (q3 - q1)
        inside = values[(values >= q1 - reach) & (values <= q3 + reach)]
        boxes.append(
            {
                "label": label,
                "x": canvas.left + spacing * (i + 0.5),
                "half": min(20.0, spacing / 3),
                "q1": float(canvas.y(q1, low, high)),
                "q3": float(canvas.y(q3, low, high)),
                "median": float(canvas.y(median, low, high)),
                "low": float(canvas.y(inside.min(), low, high)),
                "high": float(canvas.y(inside.max(), low, high)),
                "points": canvas.y(values, low, high).tolist(),
            }
        )
    ticks = [{"y": float(canvas.y(v, low, high)), "label": f"{v:.3f}"} for v in np.linspace(low, high, 5)]
    _render("box_plot.svg", path, title=title, ylabel=ylabel, boxes=boxes, ticks=ticks, **canvas.context())
    return


def km_plot(table: pd.DataFrame, path, title: str = "", n_ticks: int = 6) -> None:
    """Population survival band from :func:`survbench.metrics.population_survival`.

    The Kaplan-Meier estimate and at-risk counts are drawn when the table has them.
    """
    if not len(table):
        raise ShapeError("survival table is empty")
    canvas = Canvas()
    years = table["time"].to_numpy() / YEAR_DAYS
    x_high = float(years.max())
    xs = canvas.x(years, 0.0, x_high)

    def ys(column: str) -> np.ndarray:
        return canvas.y(table[column].to_numpy(), 0.0, 1.0)

    band = _points(np.concatenate([xs, xs[::-1]]), np.concatenate([ys("upper"), ys("lower")[::-1]]))
    observed = ""
    if "kaplan_meier" in table:
        # Step function: hold each value until the next grid point.
        step_x = np.repeat(xs, 2)[1:]
        step_y = np.repeat(ys("kaplan_meier"), 2)[:-1]
        observed = _points(step_x, step_y)

    picks = np.unique(np.linspace(0, len(table) - 1, n_ticks).round().astype(int))
    xticks = []
    for i in picks:
        at_risk = int(table["at_risk"].iloc[i]) if "at_risk" in table else ""
        xticks.append({"x": float(xs[i]), "label": f"{years[i]:.1f}", "at_risk": at_risk})
    yticks = [{"y": float(canvas.y(v, 0.0, 1.0)), "label": f"{v:.1f}"} for v in np.linspace(0.0, 1.0, 6)]

    _render(
        "km_plot.svg",
        path,
        title=title,
        band=band,
        predicted=_points(xs, ys("median")),
        observed=observed,
        xticks=xticks,
        yticks=yticks,
        **canvas.context(),
    )
    return
