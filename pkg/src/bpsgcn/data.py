"""Trajectory ingestion, windowing and synthetic scene generation.

Two on-disk formats are supported:

* ETH/UCY text: whitespace-separated ``frame_id agent_id x y`` rows.
* SDD annotations: ``track xmin ymin xmax ymax frame lost occluded generated label``.

Windows are built over the sorted set of frame indices present in a scene, so
the ETH convention of sampling every 10th video frame needs no special casing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataFormatError(ValueError):
    """Raised when an annotation file cannot be parsed."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptySceneError(DataFormatError):
    pass


@dataclass(frozen=True)
class AgentTrack:
    agent_id: str
    frames: np.ndarray  # (F,) int64, strictly increasing
    positions: np.ndarray  # (F, 2) float64
    label: str | None = None  # SDD class string; metadata only

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.int64)
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if len(frames) != len(positions):
            raise ValueError("frames and positions differ in length")
        if len(frames) < 2:
            raise ValueError(f"track {self.agent_id!r} needs at least 2 frames")
        if np.any(np.diff(frames) <= 0):
            raise ValueError(f"track {self.agent_id!r} frames are not strictly increasing")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "positions", positions)


@dataclass(frozen=True)
class Scene:
    tracks: tuple[AgentTrack, ...]
    frame_rate: float = 2.5
    unit: str = "meters"
    name: str = ""

    @property
    def frame_indices(self) -> np.ndarray:
        if not self.tracks:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate([t.frames for t in self.tracks]))


@dataclass(frozen=True)
class Window:
    """``observed`` is (N, t_obs, 2), ``future`` is (N, t_fut, 2)."""

    observed: np.ndarray
    future: np.ndarray
    agent_ids: tuple[str, ...] = ()
    start_frame: int = 0
    scene: str = ""

    @property
    def n_agents(self) -> int:
        return self.observed.shape[0]

    @property
    def t_obs(self) -> int:
        return self.observed.shape[1]

    @property
    def t_fut(self) -> int:
        return self.future.shape[1]


@dataclass(frozen=True)
class BehaviorModeSpec:
    """Kinematic envelope for one synthetic behaviour.

    Speeds are in scene units per step and turn rates in radians per step.
    ``noise`` is the std of Gaussian jitter added to every position.
    """

    name: str
    speed: tuple[float, float]
    turn_rate: tuple[float, float] = (0.0, 0.0)
    noise: float = 0.0


DEFAULT_MODES = (
    BehaviorModeSpec("slow-walker", speed=(0.35, 0.5), turn_rate=(0.0, 0.0), noise=0.06),
    BehaviorModeSpec("fast-linear", speed=(1.3, 1.7), turn_rate=(0.0, 0.0), noise=0.02),
    BehaviorModeSpec("curved-rider", speed=(0.9, 1.1), turn_rate=(0.35, 0.45), noise=0.0),
)


def _group_tracks(rows: dict[str, list[tuple[int, float, float]]], labels=None) -> tuple[AgentTrack, ...]:
    tracks = []
    for agent_id in sorted(rows, key=_natural_key):
        obs = sorted(rows[agent_id])
        frames = np.array([r[0] for r in obs], dtype=np.int64)
        # duplicated frames keep the last observation
        keep = np.append(np.diff(frames) != 0, True)
        frames = frames[keep]
        pos = np.array([(r[1], r[2]) for r in obs], dtype=np.float64)[keep]
        if len(frames) < 2:
            continue
        tracks.append(AgentTrack(agent_id, frames, pos, None if labels is None else labels.get(agent_id)))
    return tuple(tracks)


def _natural_key(s: str):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)


def _num_id(token: str) -> str:
    # "1.0" and "1" name the same agent in ETH/UCY dumps
    value = float(token)
    return str(int(value)) if value.is_integer() else token


def load_ethucy(path: str | Path, frame_rate: float = 2.5) -> Scene:
    path = Path(path)
    rows: dict[str, list[tuple[int, float, float]]] = {}
    n = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataFormatError(f"expected 4 columns, got {len(parts)}", path, lineno)
            try:
                frame = float(parts[0])
                agent = _num_id(parts[1])
                x, y = float(parts[2]), float(parts[3])
            except ValueError as exc:
                raise DataFormatError(f"malformed row {line.strip()!r}", path, lineno) from exc
            if not (math.isfinite(x) and math.isfinite(y)) or not frame.is_integer():
                raise DataFormatError(f"malformed row {line.strip()!r}", path, lineno)
            rows.setdefault(agent, []).append((int(frame), x, y))
            n += 1
    if n == 0:
        raise EmptySceneError("empty scene", path)
    return Scene(_group_tracks(rows), frame_rate=frame_rate, unit="meters", name=path.stem)


def load_sdd(path: str | Path, frame_rate: float = 30.0) -> Scene:
    path = Path(path)
    rows: dict[str, list[tuple[int, float, float]]] = {}
    labels: dict[str, str] = {}
    n = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 10:
                raise DataFormatError(f"expected 10 columns, got {len(parts)}", path, lineno)
            try:
                track = _num_id(parts[0])
                xmin, ymin, xmax, ymax = (float(v) for v in parts[1:5])
                frame = int(parts[5])
                lost = int(parts[6])
            except ValueError as exc:
                raise DataFormatError(f"malformed row {line.strip()!r}", path, lineno) from exc
            n += 1
            if lost:
                continue
            rows.setdefault(track, []).append((frame, (xmin + xmax) / 2.0, (ymin + ymax) / 2.0))
            labels[track] = parts[9].strip('"')
    if n == 0:
        raise EmptySceneError("empty scene", path)
    return Scene(_group_tracks(rows, labels), frame_rate=frame_rate, unit="pixels", name=path.stem)


def write_ethucy(scene: Scene, path: str | Path, precision: int = 6) -> None:
    lines = []
    for track in scene.tracks:
        for f, (x, y) in zip(track.frames, track.positions):
            lines.append((int(f), track.agent_id, f"{f}\t{track.agent_id}\t{x:.{precision}f}\t{y:.{precision}f}"))
    lines.sort(key=lambda r: (r[0], _natural_key(r[1])))
    Path(path).write_text("".join(r[2] + "\n" for r in lines))


def make_windows(scene: Scene, t_obs: int = 8, t_fut: int = 12, stride: int = 1) -> list[Window]:
    if t_obs < 2 or t_fut < 1 or stride < 1:
        raise ValueError("need t_obs >= 2, t_fut >= 1, stride >= 1")
    frames = scene.frame_indices
    length = t_obs + t_fut
    lookup = []
    for track in scene.tracks:
        lookup.append({int(f): i for i, f in enumerate(track.frames)})
    windows = []
    for start in range(0, len(frames) - length + 1, stride):
        span = frames[start:start + length]
        obs, fut, ids = [], [], []
        for track, index in zip(scene.tracks, lookup):
            rows = [index.get(int(f)) for f in span]
            if any(r is None for r in rows):
                continue
            pos = track.positions[rows]
            obs.append(pos[:t_obs])
            fut.append(pos[t_obs:])
            ids.append(track.agent_id)
        if ids:
            windows.append(Window(np.stack(obs), np.stack(fut), tuple(ids), int(span[0]), scene.name))
    return windows


def gen_synthetic(
    modes: Sequence[BehaviorModeSpec] = DEFAULT_MODES,
    n_agents: int = 50,
    seed: int = 0,
    track_len: int = 20,
    group_size: int = 10,
    extent: float = 40.0,
) -> tuple[Scene, np.ndarray]:
    """Generate ``n_agents`` tracks per mode; returns the scene and per-track mode index.

    Tracks are dealt into groups of ``group_size`` co-present agents, each group
    occupying its own block of ``track_len`` frames, so sliding windows of that
    length recover the groups exactly. Curving modes always turn left; headings
    and start points are uniform.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if not modes:
        raise ValueError("at least one behaviour mode is required")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(modes)), n_agents)
    order = rng.permutation(len(labels))
    labels = labels[order]
    tracks = []
    for i, mode_idx in enumerate(labels):
        mode = modes[mode_idx]
        speed = rng.uniform(*mode.speed)
        turn = rng.uniform(*mode.turn_rate)
        heading = rng.uniform(-math.pi, math.pi)
        start = rng.uniform(-extent / 2, extent / 2, size=2)
        headings = heading + turn * np.arange(track_len - 1)
        steps = speed * np.stack([np.cos(headings), np.sin(headings)], axis=1)
        pos = np.vstack([start, start + np.cumsum(steps, axis=0)])
        if mode.noise > 0:
            pos = pos + rng.normal(0.0, mode.noise, size=pos.shape)
        first = (i // group_size) * track_len
        frames = np.arange(first, first + track_len)
        tracks.append(AgentTrack(str(i), frames, pos, label=mode.name))
    return Scene(tuple(tracks), frame_rate=2.5, unit="meters", name=f"synthetic-{seed}"), labels


@dataclass
class SplitManifest:
    """Train/val/test file lists; serialised as a flat JSON object."""

    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    format: str = "ethucy"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        raw = json.loads(Path(path).read_text())
        return cls(**{k: raw[k] for k in ("train", "val", "test", "format") if k in raw})


def leave_one_out(files: Iterable[str | Path], held_out: str, val: str | None = None, fmt: str = "ethucy") -> SplitManifest:
    """Hold out every file whose path contains ``held_out`` for testing."""
    files = sorted(str(f) for f in files)
    test = [f for f in files if held_out in f]
    if not test:
        raise ValueError(f"no file matches held-out scene {held_out!r}")
    rest = [f for f in files if f not in test]
    val_files = [f for f in rest if val is not None and val in f]
    train = [f for f in rest if f not in val_files]
    return SplitManifest(train=train, val=val_files, test=test, format=fmt)


def load_scene(path: str | Path, fmt: str = "ethucy") -> Scene:
    if fmt == "ethucy":
        return load_ethucy(path)
    if fmt == "sdd":
        return load_sdd(path)
    raise ValueError(f"unknown format {fmt!r}")
