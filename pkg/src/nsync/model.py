"""Conditional MLP denoiser, the token-embedding conditioning table, and the
two adaptation modes (textual inversion and low-rank adaptation).

The conditioning vector of a caption is the sum of its content embedding and
its style-token embedding. The denoiser input is
``concat(z_t, sinusoidal(t), cond)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from nsync import _kernels
from nsync.diffusion import DEFAULT_DDIM_STEPS, NoiseSchedule, ddim_sample, make_linear_schedule
from nsync.errors import ConfigError, NumericalError
from nsync.numerics import autodiff as ad
from nsync.numerics.autodiff import GradVector, ParamSet, flatten
from nsync.records import read_record, write_record

GENERIC = "GENERIC"
STAR = "S*"
CHECKPOINT_VERSION = 1

TI = "ti"
LORA = "lora"
MODES = (TI, LORA)


@dataclass(frozen=True)
class DenoiserConfig:
    d_data: int = 64
    d_hidden: int = 256
    n_layers: int = 3
    d_time: int = 16
    d_e: int = 16
    # fixed gain applied to the conditioning vector at the network input
    cond_scale: float = 10.0
    # std of freshly initialised token embeddings
    emb_init_std: float = 0.1

    def __post_init__(self):
        for name in ("d_data", "d_hidden", "n_layers", "d_time", "d_e"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) <= 0:
                raise ConfigError(f"DenoiserConfig.{name} must be positive")
        if self.d_time % 2:
            raise ConfigError("DenoiserConfig.d_time must be even")
        if self.n_layers < 2:
            raise ConfigError("DenoiserConfig.n_layers must be at least 2")
        if not (self.cond_scale > 0 and self.emb_init_std > 0):
            raise ConfigError("DenoiserConfig.cond_scale and emb_init_std must be positive")

    @property
    def d_in(self) -> int:
        return self.d_data + self.d_time + self.d_e

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.d_in] + [self.d_hidden] * (self.n_layers - 1) + [self.d_data]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class Caption:
    content: int
    style: str | None = None


@dataclass
class ConditioningTable:
    content: np.ndarray
    styles: dict[str, np.ndarray]
    trainable: str | None = None

    @property
    def n_content(self) -> int:
        return self.content.shape[0]


@dataclass(frozen=True)
class LoraAdapter:
    rank: int = 4
    alpha: float = 4.0
    layers: tuple[int, ...] = (0, -1)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def embed_caption(caption: Caption, table: ConditioningTable) -> np.ndarray:
    if not 0 <= caption.content < table.n_content:
        raise KeyError(f"unknown content class {caption.content}")
    vec = table.content[caption.content].copy()
    if caption.style is None:
        return vec
    if caption.style not in table.styles:
        raise KeyError(f"unknown style token {caption.style!r}")
    return vec + table.styles[caption.style]


def timestep_embedding(t, d_time: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = d_time // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@lru_cache(maxsize=8)
def _timestep_table(T: int, d_time: int) -> np.ndarray:
    table = timestep_embedding(np.arange(T), d_time)
    table.flags.writeable = False
    return table


def _weight(i: int) -> str:
    return f"layer{i}.weight"


def _bias(i: int) -> str:
    return f"layer{i}.bias"


def _lora(i: int, which: str) -> str:
    return f"lora{i}.{which}"


@dataclass
class Model:
    """A denoiser with its conditioning table and adaptation state."""

    config: DenoiserConfig
    params: ParamSet
    style_names: tuple[str, ...]
    schedule: NoiseSchedule = field(default_factory=make_linear_schedule)
    mode: str | None = None
    lora: LoraAdapter | None = None
    pretrained: bool = False

    # -- construction -------------------------------------------------------

    @classmethod
    def init(
        cls,
        config: DenoiserConfig,
        n_content: int,
        style_names: Sequence[str],
        seed: int,
        schedule: NoiseSchedule | None = None,
    ) -> "Model":
        if GENERIC not in style_names:
            raise ConfigError(f"style tokens must include {GENERIC}")
        rng = np.random.default_rng(seed)
        params = {}
        shapes = config.layer_shapes()
        for i, (m, n) in enumerate(shapes):
            std = np.sqrt(1.0 / m) if i < len(shapes) - 1 else 0.1 * np.sqrt(1.0 / m)
            params[_weight(i)] = rng.standard_normal((m, n)) * std
            params[_bias(i)] = np.zeros(n)
        params["content_emb"] = config.emb_init_std * rng.standard_normal((n_content, config.d_e))
        params["style_emb"] = config.emb_init_std * rng.standard_normal((len(style_names), config.d_e))
        return cls(
            config,
            ParamSet(params),
            tuple(style_names),
            schedule if schedule is not None else make_linear_schedule(),
        )

    def replace_params(self, params: ParamSet) -> "Model":
        return Model(self.config, params, self.style_names, self.schedule, self.mode, self.lora, self.pretrained)

    # -- conditioning --------------------------------------------------------

    @property
    def n_content(self) -> int:
        return self.params["content_emb"].shape[0]

    def style_vector(self, name: str) -> np.ndarray:
        if name == STAR:
            if "v_star" not in self.params:
                raise KeyError(f"style token {STAR} exists only after an adaptation mode is set")
            return self.params["v_star"]
        try:
            return self.params["style_emb"][self.style_names.index(name)]
        except ValueError:
            raise KeyError(f"unknown style token {name!r}") from None

    @property
    def table(self) -> ConditioningTable:
        styles = {n: self.params["style_emb"][i] for i, n in enumerate(self.style_names)}
        if "v_star" in self.params:
            styles[STAR] = self.params["v_star"]
        return ConditioningTable(
            self.params["content_emb"], styles, STAR if self.mode == TI else None
        )

    def cond_batch(self, contents, style: str | None) -> np.ndarray:
        contents = np.asarray(contents, dtype=np.int64)
        if np.any(contents < 0) or np.any(contents >= self.n_content):
            raise KeyError("content class out of range")
        cond = self.params["content_emb"][contents]
        if style is not None:
            cond = cond + self.style_vector(style)
        return cond

    # -- forward -------------------------------------------------------------

    def _effective_layers(self, params: ParamSet | None = None):
        p = self.params if params is None else params
        weights = []
        biases = []
        for i in range(self.config.n_layers):
            w = p[_weight(i)]
            if self.lora is not None and _lora(i, "A") in p:
                w = w + self.lora.scale * (p[_lora(i, "A")] @ p[_lora(i, "B")])
            weights.append(np.ascontiguousarray(w))
            biases.append(p[_bias(i)])
        return weights, biases

    def _inputs(self, z_t, t, cond) -> np.ndarray:
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (z_t.shape[0],))
        if z_t.shape[1] != self.config.d_data or cond.shape[1] != self.config.d_e:
            raise ValueError("input dimensions do not match the denoiser config")
        temb = _timestep_table(self.schedule.T, self.config.d_time)[t]
        return np.ascontiguousarray(np.concatenate([z_t, temb, self.config.cond_scale * cond], axis=1))

    def eps_hat(self, z_t, t, cond) -> np.ndarray:
        """Noise prediction on plain arrays (fast path)."""
        weights, biases = self._effective_layers()
        out = _kernels.mlp_forward(self._inputs(z_t, t, cond), weights, biases)
        if not np.all(np.isfinite(out)):
            raise NumericalError("denoiser produced non-finite output")
        return out

    def sample(self, contents, style: str | None = STAR, seed: int = 0, n_steps: int = DEFAULT_DDIM_STEPS) -> np.ndarray:
        """DDIM samples, one per entry of ``contents``, under ``caption + style``."""
        cond = self.cond_batch(contents, style)
        return ddim_sample(self.eps_hat, cond, n_steps, seed, self.schedule, self.config.d_data)

    def graph_leaves(self, params: ParamSet | None = None) -> dict[str, ad.Node]:
        p = self.params if params is None else params
        return {name: ad.leaf(value, name) for name, value in p.params.items()}

    def denoise_graph(self, z_t, t, cond, leaves: Mapping[str, ad.Node]) -> ad.Node:
        """Noise prediction as a graph over ``leaves`` (reference path)."""
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (z_t.shape[0],))
        temb = timestep_embedding(t, self.config.d_time)
        h = ad.concat([ad.Node(z_t), ad.Node(temb), ad.mul(cond, self.config.cond_scale)], axis=1)
        last = self.config.n_layers - 1
        for i in range(self.config.n_layers):
            w = leaves[_weight(i)]
            if self.lora is not None and _lora(i, "A") in leaves:
                w = w + self.lora.scale * (leaves[_lora(i, "A")] @ leaves[_lora(i, "B")])
            a = h @ w + leaves[_bias(i)]
            h = a if i == last else ad.silu(a)
        if not np.all(np.isfinite(h.value)):
            raise NumericalError("denoiser produced non-finite activations")
        return h

    def cond_graph(self, contents, style: str | None, leaves: Mapping[str, ad.Node]) -> ad.Node:
        cond = ad.take_rows(leaves["content_emb"], contents)
        if style is None:
            return cond
        if style == STAR:
            return cond + leaves["v_star"]
        row = ad.take_rows(leaves["style_emb"], [self.style_names.index(style)])
        return cond + row

    # -- fused loss / gradient ---------------------------------------------

    def loss_and_grad(self, z_t, t, eps, contents, style: str | None, params: ParamSet | None = None):
        """Denoising loss and its gradient over the trainable parameters.

        Returns ``(loss, GradVector)``; the batch loss is the mean over
        samples and coordinates.
        """
        p = self.params if params is None else params
        model = self if params is None else self.replace_params(params)
        cond = model.cond_batch(contents, style)
        x = model._inputs(z_t, t, cond)
        weights, biases = model._effective_layers()
        want_weights = any(n.startswith(("layer", "lora")) for n in p.trainable)
        loss, dx, dws, dbs = _kernels.mlp_loss_grad(
            x, np.ascontiguousarray(eps, dtype=np.float64), weights, biases, want_weights
        )
        if not np.isfinite(loss):
            raise NumericalError("denoising loss is non-finite")
        dcond = self.config.cond_scale * dx[:, self.config.d_data + self.config.d_time :]
        contents = np.asarray(contents, dtype=np.int64)
        grads = {}
        for name in p.trainable:
            if name == "v_star":
                grads[name] = dcond.sum(axis=0) if style == STAR else np.zeros(self.config.d_e)
            elif name == "content_emb":
                g = np.zeros_like(p[name])
                np.add.at(g, contents, dcond)
                grads[name] = g
            elif name == "style_emb":
                g = np.zeros_like(p[name])
                if style is not None and style != STAR:
                    g[self.style_names.index(style)] = dcond.sum(axis=0)
                grads[name] = g
            elif name.startswith("layer"):
                i = int(name[5 : name.index(".")])
                grads[name] = dws[i] if name.endswith("weight") else dbs[i]
            elif name.startswith("lora"):
                i = int(name[4 : name.index(".")])
                dw = dws[i]
                if name.endswith(".A"):
                    grads[name] = self.lora.scale * (dw @ p[_lora(i, "B")].T)
                else:
                    grads[name] = self.lora.scale * (p[_lora(i, "A")].T @ dw)
            else:
                raise KeyError(f"no gradient rule for parameter {name!r}")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        return loss, flatten(grads, p.layout)

    def loss_and_grad_mixed(self, z_t, t, eps, contents, style_idx):
        """Like :meth:`loss_and_grad` with a per-sample base style row.

        ``style_idx[i]`` indexes ``style_names``; -1 means no style token.
        Used for pretraining, where all base parameters train.
        """
        p = self.params
        contents = np.asarray(contents, dtype=np.int64)
        style_idx = np.asarray(style_idx, dtype=np.int64)
        has_style = style_idx >= 0
        cond = p["content_emb"][contents] + np.where(
            has_style[:, None], p["style_emb"][np.clip(style_idx, 0, None)], 0.0
        )
        x = self._inputs(z_t, t, cond)
        weights, biases = self._effective_layers()
        loss, dx, dws, dbs = _kernels.mlp_loss_grad(
            x, np.ascontiguousarray(eps, dtype=np.float64), weights, biases, True
        )
        if not np.isfinite(loss):
            raise NumericalError("denoising loss is non-finite")
        dcond = self.config.cond_scale * dx[:, self.config.d_data + self.config.d_time :]
        grads = {}
        for i in range(self.config.n_layers):
            grads[_weight(i)] = dws[i]
            grads[_bias(i)] = dbs[i]
        g = np.zeros_like(p["content_emb"])
        np.add.at(g, contents, dcond)
        grads["content_emb"] = g
        g = np.zeros_like(p["style_emb"])
        np.add.at(g, style_idx[has_style], dcond[has_style])
        grads["style_emb"] = g
        return loss, flatten({n: grads[n] for n in p.trainable}, p.layout)

    # -- adaptation ----------------------------------------------------------

    def set_adaptation_mode(self, mode: str, lora: LoraAdapter | None = None, seed: int = 0) -> "Model":
        """Freeze the base model and pick the trainable subset.

        ``ti``: only the new token embedding ``v_star`` trains, initialised
        from the GENERIC embedding. ``lora``: only the low-rank factors
        train; ``v_star`` is fixed at the GENERIC embedding.
        """
        if self.mode is not None:
            raise ValueError(f"adaptation mode already set to {self.mode!r}")
        if mode not in MODES:
            raise ValueError(f"unknown adaptation mode {mode!r}")
        if not self.pretrained:
            raise ValueError("adaptation requires a pretrained base model")
        params = dict(self.params.params)
        params["v_star"] = self.style_vector(GENERIC).copy()
        if mode == TI:
            return Model(self.config, ParamSet(params, ("v_star",)), self.style_names, self.schedule, TI, None, True)
        lora = lora or LoraAdapter()
        rng = np.random.default_rng(seed)
        shapes = self.config.layer_shapes()
        layers = sorted({i % len(shapes) for i in lora.layers})
        trainable = []
        for i in layers:
            m, n = shapes[i]
            if not lora.rank < min(m, n):
                raise ConfigError(f"LoRA rank {lora.rank} too large for a {m}x{n} matrix")
            params[_lora(i, "A")] = rng.standard_normal((m, lora.rank)) / np.sqrt(m)
            params[_lora(i, "B")] = np.zeros((lora.rank, n))
            trainable += [_lora(i, "A"), _lora(i, "B")]
        adapter = LoraAdapter(lora.rank, lora.alpha, tuple(layers))
        return Model(self.config, ParamSet(params, tuple(trainable)), self.style_names, self.schedule, LORA, adapter, True)

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "checkpoint_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "style_names": list(self.style_names),
            "schedule": self.schedule.describe(),
            "mode": self.mode,
            "lora": None if self.lora is None else asdict(self.lora),
            "pretrained": self.pretrained,
            "trainable": list(self.params.trainable),
        }
        names = sorted(self.params.params)
        write_record(path, "checkpoint", meta, {n: self.params[n] for n in names})

    @classmethod
    def load(cls, path) -> "Model":
        meta, arrays = read_record(path, "checkpoint")
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: checkpoint version {meta.get('checkpoint_version')} is not supported")
        config = DenoiserConfig(**meta["config"])
        style_names = tuple(meta["style_names"])
        sched = meta["schedule"]
        schedule = make_linear_schedule(sched["T"], sched["beta_min"], sched["beta_max"])
        lora = None
        if meta["lora"] is not None:
            lora = LoraAdapter(meta["lora"]["rank"], meta["lora"]["alpha"], tuple(meta["lora"]["layers"]))
        expected = {}
        for i, (m, n) in enumerate(config.layer_shapes()):
            expected[_weight(i)] = (m, n)
            expected[_bias(i)] = (n,)
        n_content = arrays.get("content_emb", np.zeros((0, 0))).shape[0]
        expected["content_emb"] = (n_content, config.d_e)
        expected["style_emb"] = (len(style_names), config.d_e)
        if "v_star" in arrays:
            expected["v_star"] = (config.d_e,)
        if lora is not None:
            shapes = config.layer_shapes()
            for i in lora.layers:
                expected[_lora(i, "A")] = (shapes[i][0], lora.rank)
                expected[_lora(i, "B")] = (lora.rank, shapes[i][1])
        if set(expected) != set(arrays):
            raise ConfigError(f"{path}: tensor names {sorted(arrays)} do not match the config")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ConfigError(f"{path}: tensor {name!r} has shape {arrays[name].shape}, expected {shape}")
        params = ParamSet(arrays, tuple(meta["trainable"]))
        return cls(config, params, style_names, schedule, meta["mode"], lora, bool(meta["pretrained"]))


def lora_effective_weights(model: Model) -> list[np.ndarray]:
    return model._effective_layers()[0]
