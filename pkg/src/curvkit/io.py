"""File formats and deterministic serialization.

Models, parameters, datasets, and scalar reports are JSON; curves, densities,
and materialized matrices are CSV. Floats are written with 17 significant
digits, which round-trips 64-bit reals exactly, and the writers avoid any
non-deterministic content, so re-running a command with the same seed and
configuration reproduces byte-identical files.
"""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from .model import Layer, Model
from .risk import Dataset, LossSpec, Reduction, RiskSpec

Array = np.ndarray


class FileFormatError(ValueError):
    """A malformed input file; names the offending path and field."""

    def __init__(self, path, field: str, message: str):
        super().__init__(f"{path}: field {field!r}: {message}")
        self.path = str(path)
        self.field = field


# ---------------------------------------------------------------------------
# deterministic JSON
# ---------------------------------------------------------------------------


def format_float(x: float) -> str:
    if not np.isfinite(x):
        raise ValueError("refusing to serialize a non-finite number")
    return format(float(x), ".17g")


def dumps_json(obj, indent: int = 0) -> str:
    pad = " " * indent
    inner = " " * (indent + 2)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        parts = [
            f"{inner}{json.dumps(str(k))}: {dumps_json(v, indent + 2)}"
            for k, v in obj.items()
        ]
        return "{\n" + ",\n".join(parts) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        items = [dumps_json(v, indent + 2) for v in obj]
        if sum(len(i) for i in items) < 72 and all("\n" not in i for i in items):
            return "[" + ", ".join(items) + "]"
        return "[\n" + ",\n".join(inner + i for i in items) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if obj is None:
        return "null"
    raise TypeError(f"cannot serialize {type(obj)!r}")


def save_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_json(obj))
        fh.write("\n")


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# model / parameter / dataset files
# ---------------------------------------------------------------------------


def _require(mapping: dict, field: str, path) -> object:
    if field not in mapping:
        raise FileFormatError(path, field, "missing")
    return mapping[field]


def save_model(path, risk: RiskSpec) -> None:
    doc = {
        "layers": [
            {"kind": l.kind, "in": l.dim_in, "out": l.dim_out, "bias": l.bias}
            for l in risk.model.layers
        ],
        "loss": risk.loss.kind,
        "reduction": risk.reduction.kind,
    }
    save_json(path, doc)


def load_model(path) -> RiskSpec:
    doc = load_json(path)
    if not isinstance(doc, dict):
        raise FileFormatError(path, "<root>", "expected an object")
    raw_layers = _require(doc, "layers", path)
    if not isinstance(raw_layers, list) or not raw_layers:
        raise FileFormatError(path, "layers", "expected a nonempty list")
    layers = []
    for i, entry in enumerate(raw_layers):
        try:
            layers.append(
                Layer(
                    str(_require(entry, "kind", path)),
                    int(_require(entry, "in", path)),
                    int(_require(entry, "out", path)),
                    bool(entry.get("bias", True)),
                )
            )
        except (TypeError, ValueError) as exc:
            raise FileFormatError(path, f"layers[{i}]", str(exc)) from exc
    try:
        model = Model(layers)
    except ValueError as exc:
        raise FileFormatError(path, "layers", str(exc)) from exc
    try:
        loss = LossSpec(str(_require(doc, "loss", path)))
    except ValueError as exc:
        raise FileFormatError(path, "loss", str(exc)) from exc
    try:
        reduction = Reduction(str(_require(doc, "reduction", path)))
    except ValueError as exc:
        raise FileFormatError(path, "reduction", str(exc)) from exc
    return RiskSpec(model, loss, reduction)


def save_params(path, params: Sequence[Array]) -> None:
    save_json(path, {"params": [np.asarray(p) for p in params]})


def load_params(path, model: Model = None) -> list[Array]:
    doc = load_json(path)
    raw = _require(doc, "params", path)
    if not isinstance(raw, list):
        raise FileFormatError(path, "params", "expected a list of tensors")
    try:
        params = [np.asarray(p, dtype=np.float64) for p in raw]
    except (TypeError, ValueError) as exc:
        raise FileFormatError(path, "params", f"not numeric: {exc}") from exc
    if model is not None:
        shapes = model.param_shapes
        if len(params) != len(shapes):
            raise FileFormatError(
                path, "params", f"expected {len(shapes)} tensors, got {len(params)}"
            )
        for i, (p, s) in enumerate(zip(params, shapes)):
            if p.shape != s:
                raise FileFormatError(
                    path, f"params[{i}]", f"shape {p.shape} does not match {s}"
                )
    return params


def save_dataset(path, data: Dataset) -> None:
    y = data.y
    save_json(path, {"x": data.x, "y": y})


def load_dataset(path) -> Dataset:
    doc = load_json(path)
    x = _require(doc, "x", path)
    y = _require(doc, "y", path)
    try:
        x = np.asarray(x, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise FileFormatError(path, "x", f"not numeric: {exc}") from exc
    y_arr = np.asarray(y)
    if y_arr.dtype == object:
        raise FileFormatError(path, "y", "ragged or non-numeric targets")
    if y_arr.ndim == 1 and np.issubdtype(y_arr.dtype, np.integer):
        y_arr = y_arr.astype(np.int64)
    else:
        y_arr = y_arr.astype(np.float64)
    try:
        return Dataset(x, y_arr)
    except ValueError as exc:
        raise FileFormatError(path, "y", str(exc)) from exc


# ---------------------------------------------------------------------------
# CSV and SVG results
# ---------------------------------------------------------------------------


def save_csv(path, header: Sequence[str], columns: Sequence[Array]) -> None:
    columns = [np.asarray(c, dtype=np.float64) for c in columns]
    if len(header) != len(columns):
        raise ValueError("one header entry per column")
    n = columns[0].shape[0]
    if any(c.shape != (n,) for c in columns):
        raise ValueError("columns must share their length")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in range(n):
            fh.write(",".join(format_float(c[row]) for c in columns) + "\n")


def load_csv(path) -> tuple[list[str], Array]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    return header, np.asarray(rows, dtype=np.float64)


def save_matrix_csv(path, mat: Array) -> None:
    mat = np.asarray(mat, dtype=np.float64)
    header = [f"c{j}" for j in range(mat.shape[1])]
    save_csv(path, header, [mat[:, j] for j in range(mat.shape[1])])


def load_matrix_csv(path) -> Array:
    _, values = load_csv(path)
    return values


def save_svg_line_plot(
    path, x: Array, y: Array, title: str = "", xlabel: str = "", ylabel: str = ""
) -> None:
    """A dependency-free, fully deterministic polyline plot."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    width, height, margin = 640.0, 400.0, 56.0
    x_lo, x_hi = float(x.min()), float(x.max())
    y_lo, y_hi = float(y.min()), float(y.max())
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(v):
        return margin + (v - x_lo) / x_span * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y_lo) / y_span * (height - 2 * margin)

    points = " ".join(f"{sx(a):.3f},{sy(b):.3f}" for a, b in zip(x, y))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" viewBox="0 0 {width:.0f} {height:.0f}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<polyline points="{points}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        'stroke="black"/>',
    ]
    label = '<text x="{x:.1f}" y="{y:.1f}" font-size="12" font-family="monospace"{extra}>{t}</text>'
    parts.append(label.format(x=margin, y=height - margin + 28, t=format(x_lo, ".6g"), extra=""))
    parts.append(
        label.format(x=width - margin, y=height - margin + 28, t=format(x_hi, ".6g"),
                     extra=' text-anchor="end"')
    )
    parts.append(label.format(x=margin - 50, y=height - margin, t=format(y_lo, ".6g"), extra=""))
    parts.append(label.format(x=margin - 50, y=margin + 6, t=format(y_hi, ".6g"), extra=""))
    if title:
        parts.append(label.format(x=width / 2, y=24, t=title, extra=' text-anchor="middle"'))
    if xlabel:
        parts.append(
            label.format(x=width / 2, y=height - 10, t=xlabel, extra=' text-anchor="middle"')
        )
    if ylabel:
        parts.append(label.format(x=8, y=height / 2, t=ylabel, extra=""))
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
        fh.write("\n")
