"""Contrastive finetuning with synthetic negatives.

Each step computes a denoising-loss gradient from three branches: a
positive batch, an anchor batch (other positives) and a negative batch
(base-model samples with the same captions). The variant decides how they
combine:

==========  ==================================================
ti          ``g_pos``
cto         ``g_pos - proj(g_pos, g_neg)``
ctoa        ``g_pos - proj(g_pos, g_neg) + proj(g_pos, g_anc)``
ctm         ``(g_pos + g_neg') / 2``
ctma        ``(g_pos + g_anc + g_neg') / 3``
==========  ==================================================

``proj(a, b) = (a.b / |b|^2) b``. ``g_neg'`` is the negative branch under
the negated-style prompt (see :data:`NEG_PROMPT_GENERIC`).
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from nsync.errors import ConfigError, NumericalError
from nsync.model import GENERIC, STAR, DenoiserConfig, LoraAdapter, Model
from nsync.numerics import AdamState, GradVector, adam_step
from nsync.styleworld import Dataset, WorldConfig, make_pretraining_set

log = logging.getLogger(__name__)


class Variant(str, Enum):
    TI_BASELINE = "ti"
    CTM = "ctm"
    CTMA = "ctma"
    CTO = "cto"
    CTOA = "ctoa"

    @property
    def contrastive(self) -> bool:
        return self is not Variant.TI_BASELINE

    @property
    def uses_anchor(self) -> bool:
        return self in (Variant.CTMA, Variant.CTOA)

    @property
    def orthogonal(self) -> bool:
        return self in (Variant.CTO, Variant.CTOA)


ALL_VARIANTS = (Variant.TI_BASELINE, Variant.CTM, Variant.CTMA, Variant.CTO, Variant.CTOA)

# negative-branch prompt for the mean variants
NEG_PROMPT_GENERIC = "generic"  # caption + GENERIC token
NEG_PROMPT_REFLECTED = "reflected"  # caption + (2 GENERIC - v_star)


# ---------------------------------------------------------------------------
# gradient arithmetic


def project(g_src: GradVector, g_dst: GradVector, eps_g: float = 1e-12) -> GradVector:
    """Projection of ``g_src`` onto ``g_dst``; zero when ``|g_dst|^2 < eps_g``.

    ``g_dst`` is first divided by its largest absolute entry. Each quotient is
    the correctly rounded value of a scale-free ratio, so whenever ``c * d`` is
    representable the result for ``c * d`` is bit-identical to that for ``d``.
    """
    g_src.check_layout(g_dst)
    d = g_dst.values
    if float(d @ d) < eps_g:
        return g_dst.replace(np.zeros_like(d))
    u = d / np.max(np.abs(d))
    return g_dst.replace((float(g_src.values @ u) / float(u @ u)) * u)


def combine_gradients(
    gpos: GradVector,
    ganc: GradVector | None,
    gneg: GradVector | None,
    variant: Variant | str,
    eps_g: float = 1e-12,
) -> GradVector:
    variant = Variant(variant)
    if variant is Variant.TI_BASELINE:
        return gpos
    if gneg is None:
        raise ValueError(f"variant {variant.value} needs a negative-branch gradient")
    if variant.uses_anchor and ganc is None:
        raise ValueError(f"variant {variant.value} needs an anchor-branch gradient")
    gpos.check_layout(gneg)
    if ganc is not None:
        gpos.check_layout(ganc)
    if variant is Variant.CTO:
        return gpos.replace(gpos.values - project(gpos, gneg, eps_g).values)
    if variant is Variant.CTOA:
        return gpos.replace(
            gpos.values - project(gpos, gneg, eps_g).values + project(gpos, ganc, eps_g).values
        )
    if variant is Variant.CTM:
        return gpos.replace((gpos.values + gneg.values) / 2.0)
    return gpos.replace((gpos.values + ganc.values + gneg.values) / 3.0)


# ---------------------------------------------------------------------------
# configuration and bookkeeping


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 8000
    batch_size: int = 8
    lr: float = 8e-4
    variant: str = Variant.CTOA.value
    mode: str = "ti"
    seed: int = 0
    eps_g: float = 1e-12
    log_every: int = 50
    checkpoint_every: int = 0
    share_branch_draws: bool = False
    per_triplet_projection: bool = False
    mean_neg_prompt: str = NEG_PROMPT_GENERIC
    lora_rank: int = 4
    lora_alpha: float = 4.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        Variant(self.variant)
        if self.mode not in ("ti", "lora"):
            raise ConfigError(f"unknown adaptation mode {self.mode!r}")
        for name in ("iterations", "batch_size", "log_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (self.lr > 0 and self.eps_g > 0):
            raise ConfigError("lr and eps_g must be positive")
        if self.mean_neg_prompt not in (NEG_PROMPT_GENERIC, NEG_PROMPT_REFLECTED):
            raise ConfigError(f"unknown mean_neg_prompt {self.mean_neg_prompt!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def interpretation_flags(self) -> dict:
        v = Variant(self.variant)
        return {
            "projection_scope": "global flat vector over all trainable parameters",
            "projection_granularity": "per-triplet" if self.per_triplet_projection else "batch-averaged",
            "degenerate_rule": f"zero projection when squared norm < {self.eps_g}",
            "mean_variant_rule": "plain average of branch gradients" if not v.orthogonal else None,
            "mean_neg_prompt": self.mean_neg_prompt if v.contrastive and not v.orthogonal else None,
            "branch_draws": "shared" if self.share_branch_draws else "independent",
            "anchor_sampling": "uniform over positives excluding the positive index",
            "negative_pairing": "uniform over negatives with the positive's content class",
        }


@dataclass
class StepStats:
    step: int
    loss_pos: float
    loss_anc: float
    loss_neg: float
    norm_pos: float
    norm_anc: float
    norm_neg: float
    norm_star: float
    cos_pos_neg: float
    cos_pos_anc: float

    FIELDS = (
        "step", "loss_pos", "loss_anc", "loss_neg", "norm_pos", "norm_anc",
        "norm_neg", "norm_star", "cos_pos_neg", "cos_pos_anc",
    )

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def _cos(a: GradVector | None, b: GradVector | None) -> float:
    if a is None or b is None:
        return float("nan")
    na, nb = np.linalg.norm(a.values), np.linalg.norm(b.values)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a.values @ b.values / (na * nb), -1.0, 1.0))


def _norm(g: GradVector | None) -> float:
    return float("nan") if g is None else float(np.linalg.norm(g.values))


# ---------------------------------------------------------------------------
# random streams


@dataclass
class BranchStreams:
    """Independent generators for sampling indices and noise per branch.

    Derived from ``SeedSequence(seed).spawn(6)`` in the fixed order
    pos-index, anc-index, neg-index, pos-noise, anc-noise, neg-noise.
    """

    pos_index: np.random.Generator
    anc_index: np.random.Generator
    neg_index: np.random.Generator
    pos_noise: np.random.Generator
    anc_noise: np.random.Generator
    neg_noise: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "BranchStreams":
        return cls(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(6)))


def draw_noise(rng: np.random.Generator, n: int, d: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform timesteps in [0, T) and standard normal noise for ``n`` samples."""
    t = rng.integers(0, T, size=n)
    eps = rng.standard_normal((n, d))
    return t, eps


# ---------------------------------------------------------------------------
# triplets


@dataclass
class TripletBatch:
    pos: np.ndarray  # indices into the positive set
    anc: np.ndarray | None  # indices into the positive set
    neg: np.ndarray | None  # indices into the negative set


class TripletSampler:
    def __init__(self, positives: Dataset, negatives: Dataset | None, streams: BranchStreams):
        if len(positives) < 2:
            raise ValueError("need at least two positives to sample anchors")
        self.positives = positives
        self.negatives = negatives
        self.streams = streams
        self._neg_by_class = None
        if negatives is not None:
            self._neg_by_class = {
                c: np.flatnonzero(negatives.contents == c) for c in np.unique(positives.contents)
            }
            empty = [int(c) for c, idx in self._neg_by_class.items() if idx.size == 0]
            if empty:
                raise ValueError(f"negative set has no samples for content classes {empty}")

    def sample(self, batch_size: int, anchor: bool, negative: bool) -> TripletBatch:
        n = len(self.positives)
        pos = self.streams.pos_index.integers(0, n, size=batch_size)
        anc = None
        if anchor:
            # uniform over positives except the pos index
            r = self.streams.anc_index.integers(0, n - 1, size=batch_size)
            anc = r + (r >= pos)
        neg = None
        if negative:
            neg = np.empty(batch_size, dtype=np.int64)
            for i, p in enumerate(pos):
                pool = self._neg_by_class[int(self.positives.contents[p])]
                neg[i] = pool[self.streams.neg_index.integers(0, pool.size)]
        return TripletBatch(pos, anc, neg)


# ---------------------------------------------------------------------------
# steps


def _branch_grad(model: Model, name: str, x0, contents, t, eps, style):
    noised_ab = model.schedule.alpha_bars[t][:, None]
    z_t = np.sqrt(noised_ab) * x0 + np.sqrt(1.0 - noised_ab) * eps
    try:
        return model.loss_and_grad(z_t, t, eps, contents, style)
    except NumericalError as exc:
        raise NumericalError(f"{name} branch: {exc}") from exc


def _reflected_grad(model: Model, name: str, x0, contents, t, eps):
    # cond = content + 2 GENERIC - v_star; d cond / d v_star = -I
    generic = model.style_vector(GENERIC)
    v = model.params["v_star"]
    params = dict(model.params.params)
    params["v_star"] = 2.0 * generic - v
    shifted = model.replace_params(model.params.__class__(params, model.params.trainable))
    loss, g = _branch_grad(shifted, name, x0, contents, t, eps, STAR)
    vals = g.values.copy()
    for e in g.layout:
        if e.name == "v_star":
            vals[e.offset : e.offset + e.size] *= -1.0
    return loss, g.replace(vals)


def train_step(
    model: Model,
    sampler: TripletSampler,
    cfg: TrainConfig,
    opt_state: AdamState,
    step: int = 0,
) -> tuple[Model, StepStats, GradVector]:
    """One contrastive update. Returns ``(model, stats, combined_gradient)``."""
    variant = Variant(cfg.variant)
    if model.mode is None:
        raise ValueError("train_step needs a model with an adaptation mode set")
    streams = sampler.streams
    pos_set, neg_set = sampler.positives, sampler.negatives
    if variant.contrastive and neg_set is None:
        raise ValueError(f"variant {variant.value} needs a negative set")
    batch = sampler.sample(cfg.batch_size, variant.uses_anchor, variant.contrastive)
    d, T = model.config.d_data, model.schedule.T

    t_pos, e_pos = draw_noise(streams.pos_noise, cfg.batch_size, d, T)
    draws = {"pos": (t_pos, e_pos)}
    if variant.uses_anchor:
        draws["anc"] = (t_pos, e_pos) if cfg.share_branch_draws else draw_noise(streams.anc_noise, cfg.batch_size, d, T)
    if variant.contrastive:
        draws["neg"] = (t_pos, e_pos) if cfg.share_branch_draws else draw_noise(streams.neg_noise, cfg.batch_size, d, T)

    neg_style = STAR
    if variant.contrastive and not variant.orthogonal and cfg.mean_neg_prompt == NEG_PROMPT_GENERIC:
        neg_style = GENERIC

    def branch(name, idx, source):
        t, eps = draws[name]
        x0, contents = source.x[idx], source.contents[idx]
        if name == "neg" and not variant.orthogonal and cfg.mean_neg_prompt == NEG_PROMPT_REFLECTED:
            if model.mode != "ti":
                raise ValueError("the reflected negative prompt is defined for textual-inversion mode only")
            return _reflected_grad(model, name, x0, contents, t, eps)
        style = neg_style if name == "neg" else STAR
        return _branch_grad(model, name, x0, contents, t, eps, style)

    def per_triplet(name, idx, source):
        t, eps = draws[name]
        out = []
        for i in range(cfg.batch_size):
            x0, contents = source.x[idx[i : i + 1]], source.contents[idx[i : i + 1]]
            style = neg_style if name == "neg" else STAR
            out.append(_branch_grad(model, name, x0, contents, t[i : i + 1], eps[i : i + 1], style))
        return out

    if cfg.per_triplet_projection and variant.contrastive:
        if cfg.mean_neg_prompt == NEG_PROMPT_REFLECTED and not variant.orthogonal:
            raise ValueError("per-triplet projection does not support the reflected negative prompt")
        p_list = per_triplet("pos", batch.pos, pos_set)
        a_list = per_triplet("anc", batch.anc, pos_set) if variant.uses_anchor else [None] * cfg.batch_size
        n_list = per_triplet("neg", batch.neg, neg_set)
        stars = [
            combine_gradients(p[1], a[1] if a else None, n[1], variant, cfg.eps_g).values
            for p, a, n in zip(p_list, a_list, n_list)
        ]
        gpos = p_list[0][1].replace(np.mean([p[1].values for p in p_list], axis=0))
        ganc = None if not variant.uses_anchor else gpos.replace(np.mean([a[1].values for a in a_list], axis=0))
        gneg = gpos.replace(np.mean([n[1].values for n in n_list], axis=0))
        lpos = float(np.mean([p[0] for p in p_list]))
        lanc = float(np.mean([a[0] for a in a_list])) if variant.uses_anchor else float("nan")
        lneg = float(np.mean([n[0] for n in n_list]))
        gstar = gpos.replace(np.mean(stars, axis=0))
    else:
        lpos, gpos = branch("pos", batch.pos, pos_set)
        lanc, ganc = branch("anc", batch.anc, pos_set) if variant.uses_anchor else (float("nan"), None)
        lneg, gneg = branch("neg", batch.neg, neg_set) if variant.contrastive else (float("nan"), None)
        gstar = combine_gradients(gpos, ganc, gneg, variant, cfg.eps_g)

    if not np.all(np.isfinite(gstar.values)):
        raise NumericalError("combined gradient is non-finite")
    new_params = adam_step(model.params, gstar, opt_state)
    stats = StepStats(
        step=step,
        loss_pos=float(lpos),
        loss_anc=float(lanc),
        loss_neg=float(lneg),
        norm_pos=_norm(gpos),
        norm_anc=_norm(ganc),
        norm_neg=_norm(gneg),
        norm_star=_norm(gstar),
        cos_pos_neg=_cos(gpos, gneg),
        cos_pos_anc=_cos(gpos, ganc),
    )
    return model.replace_params(new_params), stats, gstar


def adapt(base: Model, cfg: TrainConfig) -> Model:
    lora = LoraAdapter(cfg.lora_rank, cfg.lora_alpha) if cfg.mode == "lora" else None
    return base.set_adaptation_mode(cfg.mode, lora=lora, seed=cfg.seed)


@dataclass
class TrainResult:
    model: Model
    stats: list[StepStats]
    wall_clock: float
    config: TrainConfig
    checkpoints: list[str] = field(default_factory=list)


def train(
    cfg: TrainConfig,
    base: Model,
    positives: Dataset,
    negatives: Dataset | None = None,
    on_checkpoint: Callable[[int, Model], str] | None = None,
    refresh_negatives: Callable[[int], Dataset] | None = None,
    refresh_every: int = 0,
) -> TrainResult:
    """Finetune ``base`` for ``cfg.iterations`` steps.

    The baseline variant never touches ``negatives``. ``on_checkpoint`` is
    called every ``cfg.checkpoint_every`` steps and returns the path it wrote.
    With ``refresh_every > 0`` the negative set is replaced by
    ``refresh_negatives(k)`` before step ``k * refresh_every + 1``.
    """
    variant = Variant(cfg.variant)
    if variant.contrastive and negatives is None:
        raise ValueError(f"variant {variant.value} needs a negative set")
    if not variant.contrastive:
        negatives = None
    model = adapt(base, cfg)
    streams = BranchStreams.from_seed(cfg.seed)
    sampler = TripletSampler(positives, negatives, streams)
    opt = AdamState.for_params(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    stats = []
    paths = []
    start = time.perf_counter()
    for step in range(1, cfg.iterations + 1):
        if negatives is not None and refresh_every and refresh_negatives and step > 1 and (step - 1) % refresh_every == 0:
            sampler = TripletSampler(positives, refresh_negatives((step - 1) // refresh_every), streams)
        model, st, _ = train_step(model, sampler, cfg, opt, step)
        if step % cfg.log_every == 0:
            if not np.isfinite(st.loss_pos):
                raise NumericalError(f"positive-branch loss is non-finite at step {step}")
            stats.append(st)
            log.debug("step %d loss_pos %.5f cos(pos,neg) %.3f", step, st.loss_pos, st.cos_pos_neg)
        if cfg.checkpoint_every and on_checkpoint and step % cfg.checkpoint_every == 0:
            paths.append(on_checkpoint(step, model))
    return TrainResult(model, stats, time.perf_counter() - start, cfg, paths)


# ---------------------------------------------------------------------------
# base model


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 20000
    batch_size: int = 128
    lr: float = 2e-3
    lr_final: float = 1e-4
    seed: int = 0
    n_per_style: int = 400
    p_generic: float = 0.5
    p_none: float = 0.1

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.n_per_style <= 0:
            raise ConfigError("pretraining steps, batch size and set size must be positive")
        if not (0 <= self.p_generic and 0 <= self.p_none and self.p_generic + self.p_none <= 1):
            raise ConfigError("caption probabilities must lie in [0, 1] and sum to at most 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown pretrain config keys: {sorted(unknown)}")
        return cls(**d)


def base_style_names(world: WorldConfig) -> tuple[str, ...]:
    return (GENERIC,) + tuple(s.name for s in world.generic_styles)


def pretrain_base(
    world: WorldConfig,
    config: DenoiserConfig,
    pcfg: PretrainConfig,
    schedule=None,
) -> tuple[Model, Dataset, list[float]]:
    """Train the base denoiser on the generic-style mixture.

    Each training caption carries the GENERIC token with probability
    ``p_generic``, no style token with probability ``p_none``, and otherwise
    the token of the sample's own generic style. Returns the model, the
    pretraining set, and the loss trace (one mean per 100 steps).
    """
    if config.d_data != world.d_data:
        raise ConfigError(f"denoiser d_data={config.d_data} does not match the world ({world.d_data})")
    data, style_of = make_pretraining_set(world, pcfg.n_per_style, pcfg.seed)
    names = base_style_names(world)
    model = Model.init(config, world.n_classes, names, seed=pcfg.seed, schedule=schedule)
    model = model.replace_params(model.params.with_trainable(sorted(model.params.params)))
    rng = np.random.default_rng(np.random.SeedSequence([pcfg.seed, 31337]))
    opt = AdamState.for_params(model.params, lr=pcfg.lr)
    decay = (pcfg.lr_final / pcfg.lr) ** (1.0 / max(pcfg.steps - 1, 1))
    trace = []
    running = []
    T = model.schedule.T
    for step in range(pcfg.steps):
        idx = rng.integers(0, len(data), size=pcfg.batch_size)
        u = rng.random(pcfg.batch_size)
        style_idx = np.where(u < pcfg.p_generic, 0, style_of[idx] + 1)
        style_idx = np.where(u >= 1.0 - pcfg.p_none, -1, style_idx)
        t, eps = draw_noise(rng, pcfg.batch_size, config.d_data, T)
        ab = model.schedule.alpha_bars[t][:, None]
        z_t = np.sqrt(ab) * data.x[idx] + np.sqrt(1.0 - ab) * eps
        loss, g = model.loss_and_grad_mixed(z_t, t, eps, data.contents[idx], style_idx)
        if not np.all(np.isfinite(g.values)):
            raise NumericalError(f"non-finite gradient during pretraining at step {step}")
        opt.lr = pcfg.lr * decay**step
        model = model.replace_params(adam_step(model.params, g, opt))
        running.append(loss)
        if len(running) == 100:
            trace.append(float(np.mean(running)))
            running = []
    final = Model(model.config, model.params.with_trainable(()), model.style_names, model.schedule, None, None, True)
    return final, data, trace
