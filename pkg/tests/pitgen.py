"""Synthetic etch-pit renderer used by the test suite.

Three pit morphologies mirror the wafer taxonomy: elongated asymmetric
"sea-shell" pits (BPD), small round pits with a dark core (TED), and
larger round pits with a dark core (TSD). Pits are smooth dark dips on a
bright background so the classical pipeline segments them cleanly.
"""

from __future__ import annotations

import numpy as np

TYPES = ("BPD", "TED", "TSD")

BACKGROUND = 0.82
BPD_THETA = 0.35  # shared base orientation: the off-axis direction


def _dip(xs, ys, cx, cy, a, b, theta, depth, sharpness=3.0):
    xr = (xs - cx) * np.cos(theta) + (ys - cy) * np.sin(theta)
    yr = -(xs - cx) * np.sin(theta) + (ys - cy) * np.cos(theta)
    f = (xr / a) ** 2 + (yr / b) ** 2
    return depth * np.exp(-(f**sharpness)), xr


def pit_params(kind: str, rng: np.random.Generator) -> dict:
    if kind == "BPD":
        a = rng.uniform(13.0, 17.0)
        return {
            "a": a,
            "b": a / rng.uniform(2.1, 2.5),
            "theta": BPD_THETA + rng.uniform(-0.12, 0.12),
            "depth": rng.uniform(0.42, 0.5),
            "core": 0.0,
        }
    if kind == "TED":
        r = rng.uniform(5.0, 7.0)
        return {
            "a": r,
            "b": r * rng.uniform(0.92, 1.0),
            "theta": rng.uniform(0, np.pi),
            "depth": rng.uniform(0.38, 0.46),
            "core": rng.uniform(0.2, 0.3),
        }
    if kind == "TSD":
        r = rng.uniform(11.0, 15.0)
        return {
            "a": r,
            "b": r * rng.uniform(0.92, 1.0),
            "theta": rng.uniform(0, np.pi),
            "depth": rng.uniform(0.38, 0.46),
            "core": rng.uniform(0.2, 0.3),
        }
    raise ValueError(kind)


def draw_pit(canvas: np.ndarray, cx: float, cy: float, kind: str, rng) -> float:
    """Stamp one pit onto the canvas; returns its nominal radius."""
    h, w = canvas.shape
    ys, xs = np.mgrid[0:h, 0:w]
    p = pit_params(kind, rng)
    dip, xr = _dip(xs, ys, cx, cy, p["a"], p["b"], p["theta"], p["depth"])
    if kind == "BPD":
        # sea-shell asymmetry: one end digs deeper; encodes the off-axis direction
        dip = dip * (1.0 + 0.3 * np.tanh(xr / p["a"]))
    if p["core"] > 0:
        core, _ = _dip(xs, ys, cx, cy, p["a"] / 3.0, p["a"] / 3.0, 0.0, p["core"], 2.0)
        dip = dip + core
    np.subtract(canvas, dip, out=canvas)
    np.clip(canvas, 0.0, 1.0, out=canvas)
    return float(p["a"])


def background_field(shape, rng, base: float = BACKGROUND, noise: float = 0.012):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    slow = 0.02 * np.sin(2 * np.pi * xs / max(w, 1) + rng.uniform(0, 6.28)) * np.sin(
        2 * np.pi * ys / max(h, 1) + rng.uniform(0, 6.28)
    )
    return np.clip(base + slow + rng.normal(0, noise, size=shape), 0.0, 1.0)


def render_patch(kind: str, rng, size: int = 64) -> np.ndarray:
    canvas = background_field((size, size), rng)
    jitter = size * 0.06
    draw_pit(
        canvas,
        size / 2 + rng.uniform(-jitter, jitter),
        size / 2 + rng.uniform(-jitter, jitter),
        kind,
        rng,
    )
    return canvas


def render_double_patch(rng, size: int = 64) -> np.ndarray:
    """Two overlapping/adjacent pits: an unusable dictionary candidate."""
    canvas = background_field((size, size), rng)
    kinds = rng.choice(TYPES, size=2)
    cx, cy = size / 2, size / 2
    offset = rng.uniform(8.0, 16.0)
    angle = rng.uniform(0, 2 * np.pi)
    dx, dy = offset * np.cos(angle), offset * np.sin(angle)
    draw_pit(canvas, cx - dx / 2, cy - dy / 2, str(kinds[0]), rng)
    draw_pit(canvas, cx + dx / 2, cy + dy / 2, str(kinds[1]), rng)
    return canvas


def make_quality_corpus(n_per_class: int, seed: int = 0):
    """(patches, labels): n single-pit patches (label 1) and n double-pit
    patches (label 0)."""
    rng = np.random.default_rng(seed)
    singles = [render_patch(str(rng.choice(TYPES)), rng) for _ in range(n_per_class)]
    doubles = [render_double_patch(rng) for _ in range(n_per_class)]
    patches = np.stack(singles + doubles)
    labels = np.concatenate([np.ones(n_per_class, np.int64), np.zeros(n_per_class, np.int64)])
    return patches, labels


def make_type_corpus(n_per_type: int, seed: int = 0):
    """(patches, type labels 0/1/2) for the BPD/TED/TSD dictionary tests."""
    rng = np.random.default_rng(seed)
    patches, labels = [], []
    for label, kind in enumerate(TYPES):
        for _ in range(n_per_type):
            patches.append(render_patch(kind, rng))
            labels.append(label)
    order = rng.permutation(len(labels))
    return np.stack(patches)[order], np.asarray(labels, np.int64)[order]


def make_tile(rng, width: int = 480, height: int = 360, counts: dict | None = None):
    """A synthetic microscopy tile with known pit positions.

    Returns (tile array, truth list of (kind, cx, cy)). Pits are placed
    with enough clearance that none overlap.
    """
    counts = counts or {"BPD": 6, "TED": 6, "TSD": 4}
    canvas = background_field((height, width), rng)
    truth = []
    occupied: list[tuple[float, float, float]] = []
    for kind, n in counts.items():
        for _ in range(n):
            for _attempt in range(200):
                cx = rng.uniform(30, width - 30)
                cy = rng.uniform(30, height - 30)
                if all(np.hypot(cx - ox, cy - oy) > r + 22 for ox, oy, r in occupied):
                    r = draw_pit(canvas, cx, cy, kind, rng)
                    occupied.append((cx, cy, r))
                    truth.append((kind, cx, cy))
                    break
    return canvas, truth
