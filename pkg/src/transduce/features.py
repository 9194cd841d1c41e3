"""Feature pyramid providers.

``synth_extract`` is a deterministic stand-in for a frozen encoder: a box
filter, then per level an average pool followed by a seeded random affine
channel lift with a ``tanh``. ``import_pyramid`` loads externally computed
pyramids from PTNS files and completes missing resolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import ptns
from .grid import FeaturePyramid, GridError, ResolutionSchedule, avg_pool, complete_pyramid


@dataclass(frozen=True)
class SyntheticExtractorConfig:
    seed: int = 0
    n: int = 4
    base_channels: int = 8
    max_channels: int = 64
    radius: int = 1
    channels: tuple | None = None

    def channel_schedule(self) -> tuple:
        if self.channels is not None:
            if len(self.channels) != self.n:
                raise GridError(f"{len(self.channels)} channel counts for n={self.n}")
            return tuple(int(c) for c in self.channels)
        return tuple(min(self.base_channels * 2**i, self.max_channels) for i in range(self.n))

    def describe(self) -> dict:
        out = {
            "name": "synthetic",
            "seed": str(self.seed),
            "n": str(self.n),
            "radius": str(self.radius),
            "channels": ",".join(str(c) for c in self.channel_schedule()),
        }
        return out

    @classmethod
    def from_description(cls, desc: Mapping[str, str]) -> "SyntheticExtractorConfig":
        if desc.get("name") != "synthetic":
            raise GridError(f"not a synthetic extractor description: {dict(desc)}")
        channels = tuple(int(c) for c in desc["channels"].split(","))
        return cls(seed=int(desc["seed"]), n=int(desc["n"]), radius=int(desc["radius"]), channels=channels)


def _lift_params(seed: int, level: int, c_in: int, c_out: int):
    # Philox is counter based: the same (seed, level) key gives the same stream anywhere
    rng = np.random.Generator(np.random.Philox(key=(int(seed) << 8) | level))
    weight = rng.standard_normal((c_in, c_out)) / math.sqrt(c_in)
    bias = 0.5 * rng.standard_normal(c_out)
    return weight, bias


def _lift(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out = np.broadcast_to(bias, x.shape[:-1] + bias.shape).copy()
    for c in range(x.shape[-1]):
        out += x[..., c : c + 1] * weight[c]
    return np.tanh(out)


def box_filter(grid: np.ndarray, radius: int, dim: int) -> np.ndarray:
    """Mean over a (2r+1)^dim neighbourhood with edge replication."""
    out = np.asarray(grid, dtype=np.float64)
    if radius <= 0:
        return out
    width = 2 * radius + 1
    for ax in range(dim):
        pad = [(0, 0)] * out.ndim
        pad[ax] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        length = out.shape[ax]
        for off in range(width):
            acc += np.take(padded, np.arange(off, off + length), axis=ax)
        out = acc / width
    return out


def synth_extract(grid: np.ndarray, config: SyntheticExtractorConfig | None = None, dim: int | None = None) -> FeaturePyramid:
    """Deterministic pyramid for a dense input grid of shape (res..., c_in)."""
    config = config or SyntheticExtractorConfig()
    grid = np.asarray(grid, dtype=np.float64)
    dim = dim if dim is not None else grid.ndim - 1
    if grid.ndim == dim:
        grid = grid[..., None]
    if grid.ndim != dim + 1:
        raise GridError(f"input must have {dim} spatial axes plus channels, got shape {grid.shape}")
    schedule = ResolutionSchedule.halving(grid.shape[:dim], config.n)
    channels = config.channel_schedule()
    x = box_filter(grid, config.radius, dim)
    levels = []
    for l in range(1, config.n + 1):
        if l > 1:
            x = avg_pool(x, dim)
        w, b = _lift_params(config.seed, l, x.shape[-1], channels[l - 1])
        x = _lift(x, w, b)
        levels.append(x.reshape(-1, x.shape[-1]).astype(np.float32))
    return FeaturePyramid(schedule, tuple(levels))


def _match_level(res: tuple, target: ResolutionSchedule) -> int:
    for l in range(1, target.n + 1):
        if target.res(l) == res:
            return l
    size = math.log2(math.prod(res))
    return min(range(1, target.n + 1), key=lambda l: (abs(math.log2(target.p(l)) - size), l))


def import_pyramid(paths, target: ResolutionSchedule | None = None) -> FeaturePyramid:
    """Load a pyramid from PTNS files, completing it to ``target`` if given.

    ``paths`` is one multi-level file, a sequence of single-level files, or a
    mapping level -> file. Unmapped grids are assigned to the target level
    with the same (or closest) resolution.
    """
    if isinstance(paths, (str, Path)):
        files = {None: Path(paths)}
    elif isinstance(paths, Mapping):
        files = {int(l): Path(p) for l, p in paths.items()}
    else:
        files = {i: Path(p) for i, p in enumerate(paths)}
    grids: dict = {}
    dim = None
    for key, path in files.items():
        name = f"level {key}" if isinstance(paths, Mapping) else f"level file {path.name}"
        if not path.exists():
            raise FileNotFoundError(f"missing pyramid file for {name}: {path}")
        f = ptns.read_ptns(path)
        if f.sparse:
            if target is None and len(files) == 1:
                return ptns.pyramid_from_file(f)
            raise GridError(f"{path}: sparse pyramids cannot be completed")
        if dim is None:
            dim = f.dim
        elif f.dim != dim:
            raise GridError(f"{path}: dim {f.dim} does not match {dim}")
        if target is not None and target.dim != f.dim:
            raise GridError(f"{path}: dim {f.dim} incompatible with target dim {target.dim}")
        for i, lv in enumerate(f.levels):
            g = lv.data.reshape(*lv.res, lv.channels)
            if isinstance(paths, Mapping):
                level = key + i
            elif target is not None:
                level = _match_level(lv.res, target)
            else:
                level = len(grids) + 1
            if level in grids:
                raise GridError(f"{path}: two grids map to level {level}")
            grids[level] = g
    if target is None:
        levels = [grids[l] for l in sorted(grids)]
        if sorted(grids) != list(range(1, len(levels) + 1)):
            raise GridError("levels are not contiguous; pass a target schedule to complete them")
        return FeaturePyramid.from_grids(levels, dim)
    complete = all(l in grids and tuple(grids[l].shape[:dim]) == target.res(l) for l in range(1, target.n + 1))
    if complete and len(grids) == target.n:
        return FeaturePyramid.from_grids([grids[l] for l in range(1, target.n + 1)], dim)
    return complete_pyramid(grids, target)


def export_pyramid(path, pyramid: FeaturePyramid) -> int:
    return ptns.write_pyramid(path, pyramid)
