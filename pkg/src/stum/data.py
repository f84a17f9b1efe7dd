"""Traffic graphs, frame series, dataset files, splits, scaling and windows.

Two on-disk layouts are supported.

``csv``
    ``flow.csv``: one header row, then T rows of N*C values. Column ``n*C + c``
    holds node ``n`` channel ``c``; headers of the form ``n{node}_c{channel}``
    declare C, any other header means C = 1.
``flatbin``
    ``<stem>.json`` with ``{"T", "N", "C", "interval_minutes"}`` and ``<stem>.bin``
    holding T*N*C little-endian float32 values, time-major, node-middle,
    channel-minor.

The graph file is ``edges.csv`` with rows ``u,v[,weight]`` and an optional
header; missing weights default to 1.0.
"""

from __future__ import annotations

import csv
import json
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    ConfigError,
    DegenerateChannel,
    DimensionMismatch,
    NonFiniteValue,
    ParseError,
    SeriesTooShort,
)

# published sizes of the PEMS archives: nodes, edges, frames
PEMS_STATS = {
    "PEMS03": (358, 547, 26208),
    "PEMS04": (307, 340, 16992),
    "PEMS07": (883, 866, 28224),
    "PEMS08": (170, 295, 17856),
}


@dataclass
class TrafficGraph:
    num_nodes: int
    edges: list[tuple[int, int, float]]
    adjacency: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        n = self.num_nodes
        adj = np.zeros((n, n))
        for u, v, w in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise DimensionMismatch(f"edge ({u}, {v}) outside node range [0, {n})")
            if not (math.isfinite(w) and w > 0):
                raise ParseError(f"edge ({u}, {v}) has non-positive or non-finite weight {w}")
            adj[u, v] = w
        self.adjacency = adj

    @property
    def num_edges(self) -> int:
        return len(self.edges)


@dataclass
class FrameSeries:
    values: np.ndarray  # (T, N, C)
    interval_minutes: float = 5.0
    start: int = 0  # frame offset inside the series this one was cut from

    def __post_init__(self):
        if self.values.ndim != 3:
            raise DimensionMismatch(f"series must be (T, N, C), got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise NonFiniteValue("series contains NaN or infinite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def nodes(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def segment(self, lo: int, hi: int) -> "FrameSeries":
        return FrameSeries(self.values[lo:hi], self.interval_minutes, self.start + lo)

    def with_values(self, values: np.ndarray) -> "FrameSeries":
        return FrameSeries(values, self.interval_minutes, self.start)


# ---------------------------------------------------------------------------
# files


def _read_edges(path: Path, num_nodes: int) -> TrafficGraph:
    edges = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            row = [c.strip() for c in row if c.strip() != ""]
            if not row or row[0].startswith("#"):
                continue
            try:
                u, v = int(float(row[0])), int(float(row[1]))
                w = float(row[2]) if len(row) > 2 else 1.0
            except (ValueError, IndexError):
                if lineno == 1:
                    continue  # header
                raise ParseError(f"{path}:{lineno}: cannot parse edge row {row}") from None
            edges.append((u, v, w))
    return TrafficGraph(num_nodes, edges)


_HEADER = re.compile(r"^n(\d+)_c(\d+)$")


def _read_flow_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path} is empty") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric value") from None
    matches = [_HEADER.match(h.strip()) for h in header]
    if all(matches):
        channels = max(int(m.group(2)) for m in matches) + 1
    else:
        channels = 1
    if len(header) % channels:
        raise ParseError(f"{path}: {len(header)} columns do not divide into {channels} channels")
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) // channels, channels)
    return data


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def _read_flatbin(path: Path) -> tuple[np.ndarray, float]:
    meta_path = _sidecar(path)
    try:
        meta = json.loads(meta_path.read_text())
        t, n, c = int(meta["T"]), int(meta["N"]), int(meta["C"])
        interval = float(meta.get("interval_minutes", 5.0))
    except (OSError, ValueError, KeyError) as exc:
        raise ParseError(f"bad flatbin sidecar {meta_path}: {exc}") from None
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != t * n * c:
        raise ParseError(f"{path}: expected {t * n * c} float32 values, found {raw.size}")
    return raw.reshape(t, n, c).astype(np.float64), interval


def write_flatbin(path: str | Path, series: FrameSeries) -> None:
    path = Path(path)
    t, n, c = series.values.shape
    meta = {"T": t, "N": n, "C": c, "interval_minutes": series.interval_minutes}
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True) + "\n")
    series.values.astype("<f4").tofile(path)


def write_flow_csv(path: str | Path, series: FrameSeries) -> None:
    t, n, c = series.values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"n{i}_c{j}" for i in range(n) for j in range(c)])
        for row in series.values.reshape(t, n * c):
            w.writerow([repr(float(v)) for v in row])


def write_edges(path: str | Path, graph: TrafficGraph) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "v", "weight"])
        for u, v, wt in graph.edges:
            w.writerow([u, v, repr(float(wt))])


def load_dataset(
    data_path: str | Path,
    graph_path: str | Path | None,
    format: str = "flatbin",
    expected: tuple[int, int] | None = None,
    interval_minutes: float = 5.0,
) -> tuple[FrameSeries, TrafficGraph | None]:
    """Read a series and its graph; ``expected`` optionally pins (N, T)."""
    data_path = Path(data_path)
    if not data_path.exists():
        raise FileNotFoundError(f"data file not found: {data_path}")
    if format == "csv":
        values = _read_flow_csv(data_path)
    elif format == "flatbin":
        values, interval_minutes = _read_flatbin(data_path)
    else:
        raise ValueError(f"unknown dataset format {format!r}")
    series = FrameSeries(values, interval_minutes)
    if expected is not None and (series.nodes, series.frames) != tuple(expected):
        raise DimensionMismatch(f"expected (N, T) = {tuple(expected)}, loaded {(series.nodes, series.frames)}")
    graph = None
    if graph_path is not None:
        graph_path = Path(graph_path)
        if not graph_path.exists():
            raise FileNotFoundError(f"graph file not found: {graph_path}")
        graph = _read_edges(graph_path, series.nodes)
    return series, graph


# ---------------------------------------------------------------------------
# splitting, scaling, windowing


def split_sizes(frames: int) -> tuple[int, int, int]:
    train = math.floor(0.6 * frames)
    val = math.floor(0.2 * frames)
    return train, val, frames - train - val


def split_622(series: FrameSeries) -> tuple[FrameSeries, FrameSeries, FrameSeries]:
    if series.frames < 10:
        raise SeriesTooShort(f"need at least 10 frames to split, got {series.frames}")
    n_train, n_val, _ = split_sizes(series.frames)
    return (
        series.segment(0, n_train),
        series.segment(n_train, n_train + n_val),
        series.segment(n_train + n_val, series.frames),
    )


@dataclass
class NormStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


def fit_normalizer(train: FrameSeries, min_std: float = 1e-8) -> NormStats:
    flat = train.values.reshape(-1, train.channels)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    degenerate = std < min_std
    if degenerate.any():
        warnings.warn(
            f"channels {np.flatnonzero(degenerate).tolist()} have std < {min_std}; clamped to 1",
            DegenerateChannel,
            stacklevel=2,
        )
        std = np.where(degenerate, 1.0, std)
    return NormStats(mean, std)


def window_count(frames: int, s: int, h: int) -> int:
    return max(0, frames - s - h + 1)


@dataclass
class WindowBatch:
    inputs: np.ndarray  # (B, s, N, C)
    targets: np.ndarray  # (B, h, N, C)
    origin_indices: np.ndarray  # (B,) index t of the last input frame, within the split


def make_windows(
    series: FrameSeries,
    s: int,
    h: int,
    batch: int,
    shuffle_seed: int | None = None,
) -> Iterator[WindowBatch]:
    """Yield every (s inputs, h targets) window of ``series`` in batches.

    Origins run over t = s-1 .. T-h-1, so exactly T - s - h + 1 windows come
    out. Order is chronological unless ``shuffle_seed`` is given. The last
    batch may be short.
    """
    if s < 1 or h < 1 or batch < 1:
        raise ValueError("s, h and batch must all be >= 1")
    if series.frames < s + h:
        raise SeriesTooShort(f"{series.frames} frames cannot hold an input of {s} and horizon of {h}")
    origins = np.arange(s - 1, series.frames - h)
    if shuffle_seed is not None:
        origins = np.random.default_rng(shuffle_seed).permutation(origins)
    # (T - w + 1, N, C, w) view; index by window start
    view = np.lib.stride_tricks.sliding_window_view(series.values, s + h, axis=0)
    for lo in range(0, origins.size, batch):
        t = origins[lo:lo + batch]
        win = np.moveaxis(view[t - s + 1], -1, 1)  # (B, s+h, N, C)
        yield WindowBatch(np.ascontiguousarray(win[:, :s]), np.ascontiguousarray(win[:, s:]), t)


@dataclass
class PreparedData:
    """Normalized chronological splits with the train-fitted scaling."""

    train: FrameSeries
    val: FrameSeries
    test: FrameSeries
    stats: NormStats
    raw_train: FrameSeries

    @property
    def nodes(self) -> int:
        return self.train.nodes

    @property
    def channels(self) -> int:
        return self.train.channels


def prepare(series: FrameSeries) -> PreparedData:
    train, val, test = split_622(series)
    stats = fit_normalizer(train)
    return PreparedData(
        train.with_values(stats.apply(train.values)),
        val.with_values(stats.apply(val.values)),
        test.with_values(stats.apply(test.values)),
        stats,
        train,
    )


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    """Region-structured synthetic traffic.

    ``noise`` is the per-node Gaussian noise std as a fraction of the node's
    regional amplitude. ``period`` is in frames (288 = one day at 5 minutes).
    """

    nodes: int = 20
    frames: int = 500
    regions: int = 3
    period: int = 288
    noise: float = 0.05
    seed: int = 1
    channels: int = 1
    coupling: float = 0.2
    intra_edge_prob: float = 0.5
    interval_minutes: float = 5.0

    def validate(self) -> None:
        if self.regions < 1:
            raise ConfigError("regions must be >= 1")
        if self.nodes < self.regions:
            raise ConfigError(f"regions ({self.regions}) cannot exceed nodes ({self.nodes})")
        if self.frames < 1 or self.period < 2 or self.channels < 1:
            raise ConfigError("frames, period and channels must be positive (period >= 2)")
        if self.noise < 0 or not 0 <= self.coupling <= 1:
            raise ConfigError("noise must be >= 0 and coupling in [0, 1]")


def region_of(nodes: int, regions: int) -> np.ndarray:
    """Contiguous, near-equal node blocks."""
    return (np.arange(nodes) * regions) // nodes


def _synth_graph(cfg: SynthConfig, region: np.ndarray, rng: np.random.Generator) -> TrafficGraph:
    pairs = set()
    for r in range(cfg.regions):
        members = np.flatnonzero(region == r)
        # ring keeps each region connected; random chords make it dense
        for a, b in zip(members, np.roll(members, -1)):
            if a != b:
                pairs.add((min(a, b), max(a, b)))
        for i, a in enumerate(members):
            for b in members[i + 1:]:
                if rng.random() < cfg.intra_edge_prob:
                    pairs.add((a, b))
    for r in range(cfg.regions - 1):
        a = np.flatnonzero(region == r)[-1]
        b = np.flatnonzero(region == r + 1)[0]
        pairs.add((a, b))
    edges = []
    for a, b in sorted(pairs):
        edges.append((int(a), int(b), 1.0))
        edges.append((int(b), int(a), 1.0))
    return TrafficGraph(cfg.nodes, edges)


def synth_generate(cfg: SynthConfig) -> tuple[FrameSeries, TrafficGraph]:
    """Deterministic region-clustered periodic traffic with graph diffusion and noise."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    region = region_of(cfg.nodes, cfg.regions)
    graph = _synth_graph(cfg, region, rng)

    t = np.arange(cfg.frames)[:, None]
    phase = 2 * np.pi * t / cfg.period
    spread = np.arange(cfg.regions) / max(cfg.regions - 1, 1)
    level = 150.0 + 250.0 * spread + rng.uniform(-10, 10, cfg.regions)
    amplitude = rng.uniform(60.0, 100.0, cfg.regions)
    shift = 2 * np.pi * np.arange(cfg.regions) / cfg.regions + rng.uniform(-0.2, 0.2, cfg.regions)
    second = rng.uniform(0, 2 * np.pi, cfg.regions)
    wave = level + amplitude * (
        0.7 * np.sin(phase + shift) + 0.3 * np.sin(2 * phase + second)
    )  # (T, regions)

    base = wave[:, region]  # (T, N)
    adj = graph.adjacency + np.eye(cfg.nodes)
    mixing = adj / adj.sum(axis=1, keepdims=True)
    # kappa * sum_j m_ij (base_j - base_i): exactly zero where neighbours share a waveform
    pull = np.zeros_like(base)
    for i in range(cfg.nodes):
        nbrs = np.flatnonzero(graph.adjacency[i])
        if nbrs.size:
            pull[:, i] = (base[:, nbrs] - base[:, i:i + 1]) @ mixing[i, nbrs]
    diffused = base + cfg.coupling * pull

    values = np.empty((cfg.frames, cfg.nodes, cfg.channels))
    for c in range(cfg.channels):
        channel = diffused * (1.0 + 0.5 * c)
        noise = rng.standard_normal((cfg.frames, cfg.nodes)) * (cfg.noise * amplitude[region])
        values[:, :, c] = channel + noise
    return FrameSeries(values, cfg.interval_minutes), graph
