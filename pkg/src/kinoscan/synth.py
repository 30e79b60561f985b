"""Procedural moving-shapes videos for desk-scale experiments.

Two dataset modes share one renderer:

* motion mode: the label is the movement direction (up/down/left/right);
  shape identity, size, speed magnitude, color, and start position are all
  sampled independently of the label, so a single frame carries no direction
  information.
* appearance mode: the label is the shape identity; objects are static, so
  all frames are identical up to noise.

Each sample draws from its own (seed, index)-derived random stream, which
makes generation order-independent and byte-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

SHAPES = ("square", "disc", "cross")
DIRECTIONS = ("up", "down", "left", "right")
_DIRECTION_STEPS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}


@dataclass
class SyntheticVideoSpec:
    canvas: tuple[int, int] = (32, 32)
    frames: int = 8
    shapes: tuple[str, ...] = SHAPES
    motion_classes: tuple[str, ...] = DIRECTIONS
    speed_range: tuple[int, int] = (1, 3)   # pixels per frame, integer
    half_size_range: tuple[int, int] = (3, 5)
    noise_std: float = 0.03
    seed: int = 0

    def to_json(self):
        return asdict(self)


@dataclass
class VideoSample:
    pixels: np.ndarray   # [T, 3, H, W] float32 in [0, 1]
    label: int
    meta: dict


def _sample_rng(seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _shape_mask(shape: str, half: int) -> np.ndarray:
    """Boolean stamp of side 2*half+1 centered on the object."""
    r = np.arange(-half, half + 1)
    di, dj = np.meshgrid(r, r, indexing="ij")
    if shape == "square":
        return np.ones_like(di, dtype=bool)
    if shape == "disc":
        return di * di + dj * dj <= half * half
    if shape == "cross":
        return (np.abs(di) <= 1) | (np.abs(dj) <= 1)
    raise ValueError(f"unknown shape {shape!r}")


def _render_clip(spec, shape, half, color, start, velocity, rng) -> np.ndarray:
    h, w = spec.canvas
    t_len = spec.frames
    mask = _shape_mask(shape, half)
    clip = np.zeros((t_len, 3, h, w), dtype=np.float32)
    for t in range(t_len):
        ci = start[0] + velocity[0] * t
        cj = start[1] + velocity[1] * t
        region = clip[t, :, ci - half:ci + half + 1, cj - half:cj + half + 1]
        region[:, mask] = np.asarray(color, dtype=np.float32)[:, None]
    if spec.noise_std > 0:
        clip += rng.normal(0.0, spec.noise_std, size=clip.shape).astype(np.float32)
        np.clip(clip, 0.0, 1.0, out=clip)
    return clip


def _feasible_speeds(spec, half):
    """Speeds for which some start keeps the object >= 1 px inside the canvas."""
    h, w = spec.canvas
    travel_budget = min(h, w) - 2 * half - 3  # 1 px margin on both sides
    lo, hi = spec.speed_range
    speeds = [s for s in range(lo, hi + 1) if s * (spec.frames - 1) <= travel_budget]
    if not speeds:
        raise ValueError(
            f"no feasible speed for half_size={half} on canvas {spec.canvas} "
            f"with {spec.frames} frames")
    return speeds


def _sample_start(rng, spec, half, velocity):
    h, w = spec.canvas
    d = spec.frames - 1
    lo_i = half + 1 - min(0, velocity[0] * d)
    hi_i = h - 2 - half - max(0, velocity[0] * d)
    lo_j = half + 1 - min(0, velocity[1] * d)
    hi_j = w - 2 - half - max(0, velocity[1] * d)
    return int(rng.integers(lo_i, hi_i + 1)), int(rng.integers(lo_j, hi_j + 1))


def _draw_color(rng):
    return rng.uniform(0.5, 1.0, size=3)


def generate_motion_dataset(spec: SyntheticVideoSpec, n: int) -> list[VideoSample]:
    """Direction-labeled clips; class of sample i is i % len(motion_classes)."""
    k = len(spec.motion_classes)
    if n <= 0 or n % k != 0:
        raise ValueError(
            f"n must be a positive multiple of the {k} motion classes, got {n}")
    samples = []
    for i in range(n):
        rng = _sample_rng(spec.seed, i)
        label = i % k
        direction = spec.motion_classes[label]
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        half = int(rng.integers(spec.half_size_range[0], spec.half_size_range[1] + 1))
        color = _draw_color(rng)
        speeds = _feasible_speeds(spec, half)
        speed = int(speeds[int(rng.integers(len(speeds)))])
        step = _DIRECTION_STEPS[direction]
        velocity = (step[0] * speed, step[1] * speed)
        start = _sample_start(rng, spec, half, velocity)
        pixels = _render_clip(spec, shape, half, color, start, velocity, rng)
        samples.append(VideoSample(pixels, label, {
            "shape": shape, "half_size": half, "start": list(start),
            "velocity": list(velocity), "color": [float(c) for c in color],
        }))
    return samples


def generate_appearance_dataset(spec: SyntheticVideoSpec, n: int) -> list[VideoSample]:
    """Shape-labeled static clips; frames are identical up to noise."""
    k = len(spec.shapes)
    if n <= 0 or n % k != 0:
        raise ValueError(
            f"n must be a positive multiple of the {k} shape classes, got {n}")
    samples = []
    for i in range(n):
        rng = _sample_rng(spec.seed, i)
        label = i % k
        shape = spec.shapes[label]
        half = int(rng.integers(spec.half_size_range[0], spec.half_size_range[1] + 1))
        color = _draw_color(rng)
        start = _sample_start(rng, spec, half, (0, 0))
        pixels = _render_clip(spec, shape, half, color, start, (0, 0), rng)
        samples.append(VideoSample(pixels, label, {
            "shape": shape, "half_size": half, "start": list(start),
            "velocity": [0, 0], "color": [float(c) for c in color],
        }))
    return samples


def to_arrays(samples):
    x = np.stack([s.pixels for s in samples]).astype(np.float32)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# on-disk container: JSON manifest + one raw little-endian blob per split
# ---------------------------------------------------------------------------

def save_dataset(out_dir, samples, spec: SyntheticVideoSpec, mode: str):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(out / "data.bin", "wb") as fh:
        for s in samples:
            raw = np.ascontiguousarray(s.pixels, dtype="<f4").tobytes()
            entries.append({
                "label": int(s.label),
                "meta": s.meta,
                "offset": offset,
                "nbytes": len(raw),
                "shape": list(s.pixels.shape),
                "dtype": "<f4",
            })
            fh.write(raw)
            offset += len(raw)
    manifest = {
        "format": "kinodata-v1",
        "mode": mode,
        "spec": spec.to_json(),
        "samples": entries,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_dataset(in_dir):
    path = Path(in_dir)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "kinodata-v1":
        raise ValueError(f"{in_dir}: not a kinodata-v1 container")
    blob = (path / "data.bin").read_bytes()
    samples = []
    for e in manifest["samples"]:
        arr = np.frombuffer(blob[e["offset"]:e["offset"] + e["nbytes"]],
                            dtype=e["dtype"]).reshape(e["shape"]).copy()
        samples.append(VideoSample(arr, e["label"], e["meta"]))
    return samples, manifest
