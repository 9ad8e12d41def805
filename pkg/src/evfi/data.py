"""Procedural toy sequences: band-limited textures under known motion, with simulated events."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from evfi.events import EventStream, reverse_events, simulate_sequence, split_events, voxelize

SUBSTEP_US = 10_000
CONTRAST_THRESHOLD = 0.2


@dataclass
class Texture:
    """Sum of random low-frequency plane waves, shared across colour channels with per-channel gains."""

    freqs: np.ndarray    # (K, 2) cycles per pixel, (fx, fy)
    phases: np.ndarray   # (K,)
    amps: np.ndarray     # (K,)
    gains: np.ndarray    # (C, K)

    @classmethod
    def random(cls, rng: np.random.Generator, channels: int = 3, components: int = 12,
               min_wavelength: float = 10.0, max_wavelength: float = 32.0) -> "Texture":
        wl = rng.uniform(min_wavelength, max_wavelength, size=components)
        ang = rng.uniform(0, np.pi, size=components)
        freqs = np.stack([np.cos(ang), np.sin(ang)], axis=1) / wl[:, None]
        phases = rng.uniform(0, 2 * np.pi, size=components)
        amps = rng.uniform(0.5, 1.0, size=components)
        gains = rng.uniform(0.7, 1.0, size=(channels, components))
        return cls(freqs, phases, amps, gains)

    def render(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Sample at texture coordinates; returns C x H x W in roughly [0.1, 0.9]."""
        arg = 2 * np.pi * (xs[..., None] * self.freqs[:, 0] + ys[..., None] * self.freqs[:, 1]) + self.phases
        waves = np.cos(arg) * self.amps
        scale = 0.4 / np.sum(self.amps) * 2.2
        out = 0.5 + scale * np.einsum("hwk,ck->chw", waves, self.gains)
        return np.clip(out, 0.02, 0.98)


@dataclass
class Motion:
    """Rigid 2-D motion: translation ``velocity`` (px per interval) plus rotation ``omega`` (rad per interval)."""

    velocity: tuple = (0.0, 0.0)
    omega: float = 0.0
    center: tuple = (0.0, 0.0)

    def source_coords(self, xs, ys, tau: float):
        """Texture coordinates shown at pixel (xs, ys) at normalized time ``tau``."""
        cx, cy = self.center
        c, s = np.cos(-self.omega * tau), np.sin(-self.omega * tau)
        dx, dy = xs - cx, ys - cy
        rx = c * dx - s * dy + cx
        ry = s * dx + c * dy + cy
        return rx - self.velocity[0] * tau, ry - self.velocity[1] * tau

    def displacement(self, h: int, w: int, t_from: float, t_to: float) -> np.ndarray:
        """Flow (2, H, W) mapping pixels at time ``t_from`` to their position at ``t_to``."""
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        cx, cy = self.center
        ang = self.omega * (t_to - t_from)
        c, s = np.cos(ang), np.sin(ang)
        dx, dy = xs - cx, ys - cy
        px = c * dx - s * dy + cx + self.velocity[0] * (t_to - t_from)
        py = s * dx + c * dy + cy + self.velocity[1] * (t_to - t_from)
        return np.stack([px - xs, py - ys])


@dataclass
class ToySequence:
    """Frames at uniform sub-steps; one motion interval spans ``substeps`` frames."""

    frames: list
    times: list
    events: EventStream
    substeps: int
    motion: Motion | None = None
    kind: str = "translate"
    meta: dict = field(default_factory=dict)

    @property
    def n_intervals(self) -> int:
        return (len(self.frames) - 1) // self.substeps

    def gt_flows(self, t: float, interval: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Ground-truth ``(V_{t->0}, V_{t->1})`` for normalized time ``t`` inside an interval."""
        _, h, w = self.frames[0].shape
        if self.motion is None:
            z = np.zeros((2, h, w))
            return z, z.copy()
        base = float(interval)
        return (self.motion.displacement(h, w, base + t, base),
                self.motion.displacement(h, w, base + t, base + 1.0))


def make_toy_dataset(kind: str, n: int, size: int = 64, seed: int = 0, *, speed: float = 3.0,
                     substeps: int = 8, intervals: int = 1, channels: int = 3,
                     contrast_threshold: float = CONTRAST_THRESHOLD,
                     direction: float | None = None) -> list[ToySequence]:
    """``n`` sequences of ``intervals`` motion intervals, each rendered at ``substeps`` frames.

    ``speed`` is the displacement per interval in pixels (translate) or of the
    image corner (rotate).  ``direction`` fixes the translation angle; by
    default it is drawn per sequence.
    """
    if size < 32:
        raise ValueError(f"size must be at least 32, got {size}")
    if kind not in ("translate", "rotate", "static"):
        raise ValueError(f"unknown sequence kind {kind!r}")
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    out = []
    for _ in range(n):
        tex = Texture.random(rng, channels)
        offset = rng.uniform(0, 512, size=2)
        center = ((size - 1) / 2.0, (size - 1) / 2.0)
        if kind == "translate":
            ang = rng.uniform(0, 2 * np.pi) if direction is None else direction
            motion = Motion((speed * np.cos(ang), speed * np.sin(ang)), 0.0, center)
        elif kind == "rotate":
            radius = np.hypot(*center)
            omega = rng.choice([-1.0, 1.0]) * speed / radius
            motion = Motion((0.0, 0.0), omega, center)
        else:
            motion = Motion((0.0, 0.0), 0.0, center)
        n_frames = intervals * substeps + 1
        frames, times = [], []
        for f in range(n_frames):
            tau = f / substeps
            sx, sy = motion.source_coords(xs, ys, tau)
            frames.append(tex.render(sx + offset[0], sy + offset[1]))
            times.append(f * SUBSTEP_US)
        events = simulate_sequence(frames, times, contrast_threshold)
        out.append(ToySequence(frames, times, events, substeps, None if kind == "static" else motion, kind))
    return out


@dataclass
class Sample:
    """One interpolation problem: key frames, target, voxel grids, normalized time."""

    i0: np.ndarray
    i1: np.ndarray
    gt: np.ndarray
    g_0t: np.ndarray
    g_t0: np.ndarray
    g_t1: np.ndarray
    t: float
    flow_t0: np.ndarray
    flow_t1: np.ndarray


def event_grids(events: EventStream, t0_us: int, t_us: int, t1_us: int, bins: int = 16):
    """Voxel grids ``G_0t``, ``G_t0`` (reversed left events) and ``G_t1`` for a split at ``t_us``."""
    sel = (events.t > t0_us) & (events.t <= t1_us) if len(events) else np.zeros(0, bool)
    window = events.select(sel, t0_us, t1_us)
    left, right = split_events(window, t_us)
    g_0t = voxelize(left, t0_us, t_us, bins)
    g_t0 = voxelize(reverse_events(left), t0_us, t_us, bins)
    g_t1 = voxelize(right, t_us, t1_us, bins)
    return g_0t, g_t0, g_t1


def make_sample(seq: ToySequence, interval: int, j: int, span: int | None = None, bins: int = 16) -> Sample:
    """Sample with key frames ``interval*span`` and ``(interval+1)*span``, target ``j`` frames in."""
    span = span or seq.substeps
    a = interval * span
    b = a + span
    if not 0 < j < span or b > len(seq.frames) - 1:
        raise ValueError(f"invalid sample indices interval={interval} j={j} span={span}")
    t = j / span
    t0_us, t1_us = seq.times[a], seq.times[b]
    t_us = seq.times[a + j]
    g_0t, g_t0, g_t1 = event_grids(seq.events, t0_us, t_us, t1_us, bins)
    if seq.motion is None:
        z = np.zeros((2,) + seq.frames[0].shape[1:])
        f0, f1 = z, z.copy()
    else:
        _, h, w = seq.frames[0].shape
        base = a / seq.substeps
        end = b / seq.substeps
        mid = (a + j) / seq.substeps
        f0 = seq.motion.displacement(h, w, mid, base)
        f1 = seq.motion.displacement(h, w, mid, end)
    return Sample(seq.frames[a], seq.frames[b], seq.frames[a + j], g_0t, g_t0, g_t1, t, f0, f1)


def random_crop(sample: Sample, size: int, rng: np.random.Generator) -> Sample:
    """Same pixel window for frames, voxel grids and flows."""
    h, w = sample.i0.shape[1:]
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than sample {h}x{w}")
    if size == h and size == w:
        return sample
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    sl = (slice(None), slice(y, y + size), slice(x, x + size))
    return Sample(sample.i0[sl], sample.i1[sl], sample.gt[sl], sample.g_0t[sl], sample.g_t0[sl],
                  sample.g_t1[sl], sample.t, sample.flow_t0[sl], sample.flow_t1[sl])


@dataclass
class Batch:
    i0: np.ndarray
    i1: np.ndarray
    gt: np.ndarray
    g_0t: np.ndarray
    g_t0: np.ndarray
    g_t1: np.ndarray
    t: np.ndarray
    flow_t0: np.ndarray
    flow_t1: np.ndarray


def collate(samples) -> Batch:
    return Batch(*(np.stack([getattr(s, k) for s in samples]) for k in
                   ("i0", "i1", "gt", "g_0t", "g_t0", "g_t1")),
                 np.array([s.t for s in samples]),
                 np.stack([s.flow_t0 for s in samples]), np.stack([s.flow_t1 for s in samples]))


def sample_batch(dataset, batch: int, rng: np.random.Generator, crop: int | None = None,
                 bins: int = 16) -> Batch:
    out = []
    for _ in range(batch):
        seq = dataset[int(rng.integers(len(dataset)))]
        interval = int(rng.integers(seq.n_intervals))
        j = int(rng.integers(1, seq.substeps))
        s = make_sample(seq, interval, j, bins=bins)
        if crop is not None:
            s = random_crop(s, crop, rng)
        out.append(s)
    return collate(out)


def middle_batch(dataset, bins: int = 16) -> Batch:
    """Middle-time sample of the first interval of every sequence (evaluation set)."""
    return collate([make_sample(seq, 0, seq.substeps // 2, bins=bins) for seq in dataset])
