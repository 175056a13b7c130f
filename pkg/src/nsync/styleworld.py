"""Procedural style world and negative-set curation.

A sample is an 8x8 grid flattened to 64 values. Each content class has a
fixed base pattern made of Gaussian bumps; a style re-weights the pattern's
DCT frequency bands, scales its contrast about the mean, and adds an offset.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np
from scipy.fft import dct

from nsync.diffusion import DEFAULT_DDIM_STEPS, ddim_sample
from nsync.errors import ConfigError
from nsync.model import GENERIC, Caption, Model
from nsync.records import read_record, write_record

N_BANDS = 4


@dataclass(frozen=True)
class StyleParams:
    name: str
    gains: tuple[float, ...] = (1.0,) * N_BANDS
    offset: float = 0.0
    contrast: float = 1.0

    def __post_init__(self):
        if len(self.gains) != N_BANDS:
            raise ConfigError(f"style {self.name!r}: expected {N_BANDS} band gains")
        if any(g <= 0 for g in self.gains) or self.contrast <= 0:
            raise ConfigError(f"style {self.name!r}: gains and contrast must be positive")

    def as_dict(self) -> dict:
        return {"name": self.name, "gains": list(self.gains), "offset": self.offset, "contrast": self.contrast}

    @classmethod
    def from_dict(cls, d) -> "StyleParams":
        return cls(d["name"], tuple(float(g) for g in d["gains"]), float(d["offset"]), float(d["contrast"]))


IDENTITY = StyleParams("identity")

GENERIC_STYLES = (
    StyleParams("generic0", (1.0, 1.0, 1.0, 1.0), 0.0, 1.0),
    StyleParams("generic1", (1.2, 0.8, 0.6, 0.5), 0.15, 0.85),
    StyleParams("generic2", (0.9, 1.3, 1.5, 1.6), -0.15, 1.15),
    StyleParams("generic3", (1.0, 1.0, 0.8, 0.7), 0.3, 1.3),
)

TARGET_STYLES = (
    StyleParams("targetA", (0.8, 1.5, 2.2, 2.8), 0.35, 0.75),
    StyleParams("targetB", (1.3, 0.7, 0.4, 0.3), -0.35, 1.45),
)


@dataclass(frozen=True)
class WorldConfig:
    grid: int = 8
    n_classes: int = 6
    bumps_per_class: int = 3
    bump_width: float = 0.9
    noise_std: float = 0.02
    generic_styles: tuple[StyleParams, ...] = GENERIC_STYLES
    target_styles: tuple[StyleParams, ...] = TARGET_STYLES

    @property
    def d_data(self) -> int:
        return self.grid * self.grid

    def style(self, name: str) -> StyleParams:
        for s in self.generic_styles + self.target_styles:
            if s.name == name:
                return s
        raise ConfigError(f"unknown style {name!r}")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["generic_styles"] = [s.as_dict() for s in self.generic_styles]
        d["target_styles"] = [s.as_dict() for s in self.target_styles]
        return d

    @classmethod
    def from_dict(cls, d) -> "WorldConfig":
        d = dict(d)
        for key in ("generic_styles", "target_styles"):
            if key in d:
                d[key] = tuple(StyleParams.from_dict(s) for s in d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# rendering


@lru_cache(maxsize=16)
def _base_patterns(grid: int, n_classes: int, bumps: int, width: float) -> np.ndarray:
    yy, xx = np.mgrid[0:grid, 0:grid].astype(np.float64)
    out = np.empty((n_classes, grid * grid))
    for c in range(n_classes):
        rng = np.random.default_rng([7919, c])
        img = np.zeros((grid, grid))
        centers = rng.uniform(0.5, grid - 1.5, size=(bumps, 2))
        signs = np.where(np.arange(bumps) % 2 == 0, 1.0, -0.6)
        for (cy, cx), s in zip(centers, signs):
            img += s * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        out[c] = img.ravel()
    out.flags.writeable = False
    return out


@lru_cache(maxsize=4)
def _band_projectors(grid: int) -> np.ndarray:
    """(N_BANDS, d, d) orthogonal projectors onto DCT frequency bands."""
    basis = dct(np.eye(grid), norm="ortho", axis=0)  # rows: frequencies
    u, v = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    radius = (u + v).ravel()
    edges = np.linspace(0, radius.max() + 1, N_BANDS + 1)
    full = np.kron(basis, basis)  # (d, d), row k = 2-d basis image k
    projs = np.empty((N_BANDS, grid * grid, grid * grid))
    for b in range(N_BANDS):
        rows = full[(radius >= edges[b]) & (radius < edges[b + 1])]
        projs[b] = rows.T @ rows
    projs.flags.writeable = False
    return projs


def base_pattern(content_class: int, world: WorldConfig = WorldConfig()) -> np.ndarray:
    if not 0 <= content_class < world.n_classes:
        raise ValueError(f"content class {content_class} out of range [0, {world.n_classes})")
    return _base_patterns(world.grid, world.n_classes, world.bumps_per_class, world.bump_width)[content_class]


def stylize(x: np.ndarray, style: StyleParams, grid: int) -> np.ndarray:
    # each term vanishes exactly for the identity style
    projs = _band_projectors(grid)
    y = x.copy()
    for b, g in enumerate(style.gains):
        if g != 1.0:
            y = y + (g - 1.0) * (projs[b] @ x)
    y = y + (style.contrast - 1.0) * (y - y.mean())
    return y + style.offset


def render(
    content_class: int,
    style: StyleParams,
    rng: np.random.Generator | None,
    world: WorldConfig = WorldConfig(),
) -> np.ndarray:
    """One sample; ``rng=None`` turns the observation noise off."""
    x = stylize(base_pattern(content_class, world), style, world.grid)
    if rng is not None and world.noise_std > 0:
        x = x + world.noise_std * rng.standard_normal(x.shape)
    return x


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    caption: Caption


@dataclass
class Dataset:
    x: np.ndarray
    contents: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.contents = np.asarray(self.contents, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] != self.contents.shape[0]:
            raise ValueError("dataset arrays are inconsistent")

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.x[i], Caption(int(self.contents[i])))

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self[i] for i in range(len(self)))

    @property
    def captions(self) -> list[Caption]:
        return [Caption(int(c)) for c in self.contents]

    def save(self, path) -> None:
        write_record(path, "dataset", self.meta, {"x": self.x, "contents": self.contents})

    @classmethod
    def load(cls, path) -> "Dataset":
        meta, arrays = read_record(path, "dataset")
        return cls(arrays["x"], arrays["contents"], meta)

    def export_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "content"] + [f"x{j}" for j in range(self.x.shape[1])])
            for i in range(len(self)):
                w.writerow([i, int(self.contents[i])] + [repr(float(v)) for v in self.x[i]])


def make_dataset(
    style: StyleParams,
    n: int,
    class_mix: Sequence[float] | None = None,
    seed: int = 0,
    world: WorldConfig = WorldConfig(),
) -> Dataset:
    """``n`` noisy samples of ``style`` with content-only captions.

    Sample ``i`` draws its class and noise from a generator seeded with
    ``(seed, i)``, so any prefix of a larger dataset is reproducible alone.
    """
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    if class_mix is None:
        class_mix = np.full(world.n_classes, 1.0 / world.n_classes)
    mix = np.asarray(class_mix, dtype=np.float64)
    if mix.size == 0 or mix.size != world.n_classes or np.any(mix < 0) or mix.sum() <= 0:
        raise ValueError("class_mix must be a non-empty, non-negative weight per class")
    cdf = np.cumsum(mix / mix.sum())
    styled = np.stack([stylize(base_pattern(c, world), style, world.grid) for c in range(world.n_classes)])
    x = np.empty((n, world.d_data))
    contents = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        c = min(int(np.searchsorted(cdf, rng.random(), side="right")), world.n_classes - 1)
        contents[i] = c
        x[i] = styled[c] + world.noise_std * rng.standard_normal(world.d_data)
    meta = {
        "source": "styleworld",
        "style": style.as_dict(),
        "seed": int(seed),
        "class_mix": [float(m) for m in mix],
        "world": world.as_dict(),
    }
    return Dataset(x, contents, meta)


def make_pretraining_set(world: WorldConfig, n_per_style: int, seed: int) -> tuple[Dataset, np.ndarray]:
    """Mixture of every generic style; returns the dataset and a style index per row."""
    parts = []
    style_idx = []
    for k, style in enumerate(world.generic_styles):
        ds = make_dataset(style, n_per_style, seed=seed * 1000 + k, world=world)
        parts.append(ds)
        style_idx.append(np.full(len(ds), k, dtype=np.int64))
    meta = {"source": "styleworld-generic-mixture", "seed": int(seed), "world": world.as_dict()}
    data = Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.contents for p in parts]), meta)
    return data, np.concatenate(style_idx)


def curate_negatives(
    base_model: Model,
    captions: Sequence[Caption] | np.ndarray,
    n_per_caption: int = 1,
    seed: int = 0,
    n_steps: int = DEFAULT_DDIM_STEPS,
) -> Dataset:
    """Sample the frozen base model under each caption with the GENERIC style token.

    Only the base model is consulted; nothing about the target style enters.
    """
    if not base_model.pretrained:
        raise ValueError("negative curation needs a pretrained base model")
    if base_model.mode is not None:
        raise ValueError("negative curation needs the frozen base model, not an adapted one")
    if GENERIC not in base_model.style_names:
        raise ValueError(f"base model has no {GENERIC} style token")
    if n_per_caption < 1:
        raise ValueError("n_per_caption must be at least 1")
    contents = np.array([c.content if isinstance(c, Caption) else int(c) for c in captions], dtype=np.int64)
    contents = np.repeat(contents, n_per_caption)
    cond = base_model.cond_batch(contents, GENERIC)
    x = ddim_sample(base_model.eps_hat, cond, n_steps, seed, base_model.schedule, base_model.config.d_data)
    meta = {"source": "negatives", "style_token": GENERIC, "seed": int(seed), "ddim_steps": int(n_steps)}
    return Dataset(x, contents, meta)
