"""SVG rendering of stroke sequences.

Frames are (dx, dy, pen) triples; positions are cumulative sums of the
offsets. A pen value above 0.5 lifts the pen: the move into that point is
invisible and a new polyline starts there. Sequences are stacked one per
row. Output is built with ElementTree so it always parses as strict XML.
"""

import xml.etree.ElementTree as ET

from .errors import ConfigError

_PAD = 10.0


def _fmt(v):
    return f"{v:.3f}"


def stroke_polylines(frames, length):
    """Split one sequence into pen-down point runs (lists of (x, y))."""
    runs = []
    current = [(0.0, 0.0)]
    x = y = 0.0
    for t in range(length):
        x += float(frames[t, 0])
        y += float(frames[t, 1])
        if frames[t, 2] > 0.5:
            if len(current) >= 2:
                runs.append(current)
            current = [(x, y)]
        else:
            current.append((x, y))
    if len(current) >= 2:
        runs.append(current)
    return runs


def render_svg(batch):
    """Render a stroke SequenceBatch as an SVG document string."""
    if batch.frame_dim != 3:
        raise ConfigError(f"stroke rendering needs 3 channels, got {batch.frame_dim}")
    rows = [stroke_polylines(batch.frames[i], batch.lengths[i])
            for i in range(batch.batch_size)]
    flat = [pt for runs in rows for run in runs for pt in run] or [(0.0, 0.0)]
    min_x = min(p[0] for p in flat)
    max_x = max(p[0] for p in flat)
    min_y = min(p[1] for p in flat)
    max_y = max(p[1] for p in flat)
    row_h = (max_y - min_y) + 2 * _PAD
    width = (max_x - min_x) + 2 * _PAD
    height = row_h * max(len(rows), 1)

    root = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "width": _fmt(width),
        "height": _fmt(height),
        "viewBox": f"0 0 {_fmt(width)} {_fmt(height)}",
    })
    for i, runs in enumerate(rows):
        off_x = _PAD - min_x
        off_y = _PAD - min_y + i * row_h
        for run in runs:
            points = " ".join(f"{_fmt(px + off_x)},{_fmt(py + off_y)}" for px, py in run)
            ET.SubElement(root, "polyline", {
                "points": points,
                "fill": "none",
                "stroke": "black",
                "stroke-width": "1",
            })
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"
