"""Conditional diffusion planner over short horizons of door-handle states.

The planner denoises a length-L sequence of 2-D handle states.  Scene
context (noisy hinge/radius/bearing estimates plus the exact current
end-effector position) conditions every encoder scale through feature-wise
modulation; the most recent contact force conditions every decoder scale
through cross-attention onto a small set of learned force tokens.  Setting
``vision_only`` bypasses the force pathway exactly: the cross-attention
update is never computed, so outputs are bit-identical under any change
of the force input.

States are parameterized as offsets from the nominal arc the observation
implies (see ``nominal_arc``): the diffusion variable is the correction the
sensed geometry and contact force call for, not an absolute position.
Corrections are centimeter-scale whatever the door's size or placement, so
the learning problem is the same for geometries far outside the training
ranges; de-normalized samples add the arc back and are world-frame meters.

The model predicts the clean sequence directly and clamps it to the
normalized box; ancestral sampling walks the full schedule with the
standard posterior coefficients.  Sampling never mutates parameters, so
concurrent read-only samplers over the same weights are safe.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from doordiff.nn import tensor as T
from doordiff.nn.tensor import Parameter, ShapeError, Tensor, no_grad
from doordiff.nn.layers import MLP, CrossAttention, Linear, Module, ResBlock, SelfAttention
from doordiff.nn.optim import Adam, EmaTracker
from doordiff.nn.serialize import CheckpointError, load_checkpoint, save_checkpoint

# Layout of an observation vector: hinge_x, hinge_y, radius, bearing, opening_sign.
SCENE_CONTEXT_DIM = 5

# Door angle a full-length plan spans.  Demonstration labels advance the door
# by this much per horizon, so the planner anchors its offsets to an arc with
# the same spacing.
PLAN_ANGLE_SPAN = math.pi / 12


def nominal_arc(observations: np.ndarray, horizon: int) -> np.ndarray:
    """Handle positions the observation predicts for the next ``horizon`` steps.

    Row layout follows SCENE_CONTEXT_DIM; inputs are raw world units.  Step k
    sits at bearing + sign * k * (PLAN_ANGLE_SPAN / horizon) on the believed
    circle, matching the label spacing of recorded demonstrations.  Returns
    (B, horizon, 2), or (horizon, 2) for a single row.
    """
    obs = np.asarray(observations, dtype=np.float64)
    single = obs.ndim == 1
    obs = np.atleast_2d(obs)
    if obs.shape[-1] != SCENE_CONTEXT_DIM:
        raise ShapeError(f"observation rows must have {SCENE_CONTEXT_DIM} fields, "
                         f"got {obs.shape[-1]}")
    step = PLAN_ANGLE_SPAN / horizon
    angles = obs[:, 3:4] + obs[:, 4:5] * step * np.arange(1, horizon + 1)[None, :]
    arc = np.stack(
        [obs[:, 0:1] + obs[:, 2:3] * np.cos(angles),
         obs[:, 1:2] + obs[:, 2:3] * np.sin(angles)], axis=-1)
    return arc[0] if single else arc


class NumericError(RuntimeError):
    """Raised when training or sampling produces non-finite numbers."""


@dataclass(frozen=True)
class DiffusionConfig:
    """Structural hyperparameters of the planner network.

    ``channels`` gives the width at each temporal scale; scale k runs at
    horizon / 2^k states, so the horizon must divide evenly that far down.
    ``init_seed`` fixes the weight draw, making the parameter set a pure
    function of the config.
    """

    horizon: int = 32
    state_dim: int = 2
    diffusion_steps: int = 100
    beta_kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.06
    channels: tuple[int, ...] = (24, 48)
    heads: int = 4
    force_tokens: int = 4
    token_dim: int = 16
    force_hidden: int = 64
    film_hidden: int = 64
    time_embed_dim: int = 16
    clamp_box: float = 1.5
    ema_decay: float = 0.995
    vision_only: bool = False
    init_seed: int = 0

    def __post_init__(self):
        scales = len(self.channels)
        if scales < 1:
            raise ShapeError("channels must name at least one scale")
        if self.horizon % (2 ** (scales - 1)) != 0:
            raise ShapeError(
                f"horizon {self.horizon} not divisible by 2^(scales-1) = {2 ** (scales - 1)}"
            )
        for c in self.channels:
            if c % self.heads != 0:
                raise ShapeError(f"channel width {c} not divisible by heads {self.heads}")
        if self.diffusion_steps < 1:
            raise ShapeError(f"diffusion_steps must be >= 1, got {self.diffusion_steps}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError(f"invalid beta endpoints ({self.beta_start}, {self.beta_end})")
        if self.diffusion_steps >= 2 and not (self.beta_start < self.beta_end):
            raise ValueError("beta endpoints must increase strictly for multi-step schedules")
        if self.beta_kind != "linear":
            raise ValueError(f"unknown beta schedule kind {self.beta_kind!r}")

    @property
    def scales(self) -> int:
        return len(self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "DiffusionConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return DiffusionConfig(**d)


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed diffusion constants; arrays are indexed by t-1 for t in 1..T.

    ``alpha_bars_prev[0]`` is 1, which zeroes the posterior variance of the
    final denoising step and makes it deterministic.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    alpha_bars_prev: np.ndarray
    posterior_mean_coef_x0: np.ndarray
    posterior_mean_coef_xt: np.ndarray
    posterior_variance: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)


def make_schedule(steps: int, kind: str = "linear",
                  endpoints: tuple[float, float] = (1e-4, 0.06)) -> NoiseSchedule:
    """Build the noise schedule and its posterior coefficients."""
    if kind != "linear":
        raise ValueError(f"unknown beta schedule kind {kind!r}")
    if steps < 1:
        raise ValueError(f"schedule needs at least one step, got {steps}")
    start, end = endpoints
    if not (0.0 < start <= end < 1.0):
        raise ValueError(f"invalid beta endpoints ({start}, {end})")
    betas = np.linspace(start, end, steps)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    one_minus = 1.0 - alpha_bars
    coef_x0 = betas * np.sqrt(alpha_bars_prev) / one_minus
    coef_xt = (1.0 - alpha_bars_prev) * np.sqrt(alphas) / one_minus
    variance = betas * (1.0 - alpha_bars_prev) / one_minus
    return NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        alpha_bars_prev=alpha_bars_prev,
        posterior_mean_coef_x0=coef_x0,
        posterior_mean_coef_xt=coef_xt,
        posterior_variance=variance,
    )


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    """Forward-noise clean states to step t (t in 1..T, scalar or per-item)."""
    t = np.asarray(t)
    ab = schedule.alpha_bars[t - 1]
    while ab.ndim < np.asarray(x0).ndim:
        ab = ab[..., None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps; returns shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2 == 1:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=-1)
    return emb


# ---------------------------------------------------------------------------
# normalization


def _half_range(lo: float, hi: float) -> float:
    return max(0.5 * (hi - lo), 1e-6)


@dataclass(frozen=True)
class Normalizer:
    """Affine map between world units and the model's normalized box.

    Positions, radius, and bearing are centered on the middle of their
    training range and scaled by the half-range, so training data lands in
    [-1, 1], strictly inside the clamp box.  Forces are scaled symmetrically
    about zero by a high quantile of the component magnitudes, and arc
    offsets (the diffusion variable, see ``nominal_arc``) likewise.  The
    numbers live in the dataset manifest and travel with every checkpoint.
    """

    position_loc: tuple[float, float]
    position_scale: tuple[float, float]
    radius_loc: float
    radius_scale: float
    bearing_loc: float
    bearing_scale: float
    force_scale: float
    offset_scale: float = 0.05

    @staticmethod
    def fit(positions: np.ndarray, radii: np.ndarray, bearings: np.ndarray,
            forces: np.ndarray, offsets: np.ndarray | None = None) -> "Normalizer":
        """Compute statistics from training data.

        positions: (N, 2) world points (plan labels and current states pooled);
        radii, bearings: (N,); forces: (N, 2); offsets: label minus nominal
        arc, any shape ending in 2.  The offset scale is floored at 5 mm so a
        noiseless corpus (offsets ~ 0) cannot produce a degenerate map.
        """
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        lo = positions.min(axis=0)
        hi = positions.max(axis=0)
        loc = 0.5 * (lo + hi)
        scale = np.array([_half_range(lo[0], hi[0]), _half_range(lo[1], hi[1])])
        radii = np.asarray(radii, dtype=np.float64)
        bearings = np.asarray(bearings, dtype=np.float64)
        mags = np.abs(np.asarray(forces, dtype=np.float64)).ravel()
        force_scale = float(np.quantile(mags, 0.999)) if mags.size else 1.0
        if offsets is None:
            offset_scale = 0.05
        else:
            offs = np.abs(np.asarray(offsets, dtype=np.float64)).ravel()
            offset_scale = float(np.quantile(offs, 0.999)) if offs.size else 0.05
        return Normalizer(
            position_loc=(float(loc[0]), float(loc[1])),
            position_scale=(float(scale[0]), float(scale[1])),
            radius_loc=float(0.5 * (radii.min() + radii.max())),
            radius_scale=_half_range(float(radii.min()), float(radii.max())),
            bearing_loc=float(0.5 * (bearings.min() + bearings.max())),
            bearing_scale=_half_range(float(bearings.min()), float(bearings.max())),
            force_scale=max(force_scale, 1e-6),
            offset_scale=max(offset_scale, 0.005),
        )

    def normalize_states(self, states: np.ndarray) -> np.ndarray:
        loc = np.asarray(self.position_loc)
        scale = np.asarray(self.position_scale)
        return (np.asarray(states, dtype=np.float64) - loc) / scale

    def denormalize_states(self, states: np.ndarray) -> np.ndarray:
        loc = np.asarray(self.position_loc)
        scale = np.asarray(self.position_scale)
        return np.asarray(states, dtype=np.float64) * scale + loc

    def normalize_observation(self, obs: np.ndarray) -> np.ndarray:
        """Normalize (..., 5) observation rows; the opening sign passes through."""
        out = np.array(obs, dtype=np.float64, copy=True)
        if out.shape[-1] != SCENE_CONTEXT_DIM:
            raise ShapeError(f"observation rows must have {SCENE_CONTEXT_DIM} fields, "
                             f"got {out.shape[-1]}")
        out[..., 0] = (out[..., 0] - self.position_loc[0]) / self.position_scale[0]
        out[..., 1] = (out[..., 1] - self.position_loc[1]) / self.position_scale[1]
        out[..., 2] = (out[..., 2] - self.radius_loc) / self.radius_scale
        out[..., 3] = (out[..., 3] - self.bearing_loc) / self.bearing_scale
        return out

    def normalize_force(self, force: np.ndarray) -> np.ndarray:
        return np.asarray(force, dtype=np.float64) / self.force_scale

    def normalize_offsets(self, offsets: np.ndarray) -> np.ndarray:
        return np.asarray(offsets, dtype=np.float64) / self.offset_scale

    def denormalize_offsets(self, offsets: np.ndarray) -> np.ndarray:
        return np.asarray(offsets, dtype=np.float64) * self.offset_scale

    def to_dict(self) -> dict:
        return {
            "position_loc": list(self.position_loc),
            "position_scale": list(self.position_scale),
            "radius_loc": self.radius_loc,
            "radius_scale": self.radius_scale,
            "bearing_loc": self.bearing_loc,
            "bearing_scale": self.bearing_scale,
            "force_scale": self.force_scale,
            "offset_scale": self.offset_scale,
        }

    @staticmethod
    def from_dict(d: dict) -> "Normalizer":
        return Normalizer(
            position_loc=(float(d["position_loc"][0]), float(d["position_loc"][1])),
            position_scale=(float(d["position_scale"][0]), float(d["position_scale"][1])),
            radius_loc=float(d["radius_loc"]),
            radius_scale=float(d["radius_scale"]),
            bearing_loc=float(d["bearing_loc"]),
            bearing_scale=float(d["bearing_scale"]),
            force_scale=float(d["force_scale"]),
            offset_scale=float(d["offset_scale"]),
        )


# ---------------------------------------------------------------------------
# condition bundle and plan types


def _require_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class ConditionBundle:
    """Normalized conditioning inputs for the denoiser.

    scene_context, current_state, and force are in normalized units (see
    Normalizer); rows may be batched along leading axes.  ``nominal`` is the
    world-unit anchor arc offsets are measured from; the network never sees
    it, sample() adds it back after de-normalizing, and it may be omitted
    when only denoise() will run.  ``t`` is only consulted by denoise();
    sample() walks the whole schedule itself.
    """

    scene_context: np.ndarray
    current_state: np.ndarray
    force: np.ndarray
    t: int | np.ndarray | None = None
    nominal: np.ndarray | None = None

    def __post_init__(self):
        ctx = np.asarray(self.scene_context, dtype=np.float64)
        cur = np.asarray(self.current_state, dtype=np.float64)
        frc = np.asarray(self.force, dtype=np.float64)
        if ctx.shape[-1] != SCENE_CONTEXT_DIM:
            raise ShapeError(f"scene_context last axis must be {SCENE_CONTEXT_DIM}, "
                             f"got {ctx.shape[-1]}")
        if cur.shape[-1] != 2:
            raise ShapeError(f"current_state last axis must be 2, got {cur.shape[-1]}")
        if frc.shape[-1] != 2:
            raise ShapeError(f"force last axis must be 2, got {frc.shape[-1]}")
        _require_finite("scene_context", ctx)
        _require_finite("current_state", cur)
        _require_finite("force", frc)
        object.__setattr__(self, "scene_context", ctx)
        object.__setattr__(self, "current_state", cur)
        object.__setattr__(self, "force", frc)
        if self.nominal is not None:
            nom = np.asarray(self.nominal, dtype=np.float64)
            if nom.shape[-1] != 2:
                raise ShapeError(f"nominal last axis must be 2, got {nom.shape[-1]}")
            _require_finite("nominal", nom)
            object.__setattr__(self, "nominal", nom)

    @property
    def batched(self) -> bool:
        return np.asarray(self.scene_context).ndim > 1


@dataclass(frozen=True)
class StatePlan:
    """A sampled plan: world-frame states plus per-denoise-step norms."""

    states: np.ndarray
    diagnostics: np.ndarray


# ---------------------------------------------------------------------------
# network


class EncoderScale(Module):
    """One vision-conditioned encoder stage.

    A small MLP on (scene context, current state, timestep embedding) emits
    offsets to the neutral modulation alpha=1, beta=0; the modulated sequence
    passes through a residual conv block, residual self-attention, and a
    second residual conv block.  All non-trunk projections start at zero, so
    a fresh stage is the identity.
    """

    def __init__(self, dim: int, cond_dim: int, hidden: int, heads: int,
                 rng: np.random.Generator, name: str):
        self.dim = dim
        self.trunk = Linear(cond_dim, hidden, rng, name=f"{name}.trunk")
        self.alpha_head = Linear(hidden, dim, rng, name=f"{name}.alpha", zero_init=True)
        self.beta_head = Linear(hidden, dim, rng, name=f"{name}.beta", zero_init=True)
        self.res1 = ResBlock(dim, rng, name=f"{name}.res1")
        self.attn = SelfAttention(dim, heads, rng, name=f"{name}.attn")
        self.res2 = ResBlock(dim, rng, name=f"{name}.res2")

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        h = T.gelu(self.trunk(cond))
        b = h.shape[0]
        alpha = T.add(Tensor(1.0), T.reshape(self.alpha_head(h), (b, 1, self.dim)))
        beta = T.reshape(self.beta_head(h), (b, 1, self.dim))
        x = T.add(T.mul(x, alpha), beta)
        x = self.res1(x)
        x = self.attn(x)
        return self.res2(x)


class DecoderScale(Module):
    """One force-conditioned decoder stage: res, self-attention, res, then a
    cross-attention update from the force tokens added in place.  Passing
    force_tokens=None skips the cross-attention term entirely."""

    def __init__(self, dim: int, token_dim: int, heads: int,
                 rng: np.random.Generator, name: str):
        self.res1 = ResBlock(dim, rng, name=f"{name}.res1")
        self.attn = SelfAttention(dim, heads, rng, name=f"{name}.attn")
        self.res2 = ResBlock(dim, rng, name=f"{name}.res2")
        self.cross = CrossAttention(dim, token_dim, heads, rng, name=f"{name}.cross")

    def __call__(self, x: Tensor, force_tokens: Tensor | None) -> Tensor:
        x = self.res2(self.attn(self.res1(x)))
        if force_tokens is not None:
            x = T.add(x, self.cross(x, force_tokens))
        return x


class Denoiser(Module):
    """U-Net over the plan's time axis, predicting the clean sequence.

    Encoder stages downsample time by 2 between scales (mean pooling, plus a
    linear channel projection when widths differ); decoder stages mirror them
    with nearest-neighbor upsampling and skip concatenation merged by a
    linear layer.  The force-token MLP is shared by every decoder scale, and
    its tokens do not depend on the diffusion timestep, so samplers may build
    them once per plan.  The output head starts at zero and the result is
    clamped to the normalized workspace box.
    """

    def __init__(self, config: DiffusionConfig, rng: np.random.Generator):
        self.config = config
        ch = config.channels
        cond_dim = SCENE_CONTEXT_DIM + config.state_dim + config.time_embed_dim
        self.in_proj = Linear(config.state_dim, ch[0], rng, name="in_proj")
        self.encoder = [
            EncoderScale(ch[i], cond_dim, config.film_hidden, config.heads, rng, f"enc{i}")
            for i in range(len(ch))
        ]
        self.down_proj = [
            Linear(ch[i], ch[i + 1], rng, name=f"down{i}") if ch[i] != ch[i + 1] else None
            for i in range(len(ch) - 1)
        ]
        self.decoder = [
            DecoderScale(ch[i], config.token_dim, config.heads, rng, f"dec{i}")
            for i in range(len(ch))
        ]
        self.up_proj = [
            Linear(ch[i + 1], ch[i], rng, name=f"up{i}") if ch[i] != ch[i + 1] else None
            for i in range(len(ch) - 1)
        ]
        self.merge = [
            Linear(2 * ch[i], ch[i], rng, name=f"merge{i}")
            for i in range(len(ch) - 1)
        ]
        self.force_mlp = MLP(
            [2, config.force_hidden, config.force_tokens * config.token_dim],
            rng, name="force_mlp",
        )
        self.out_proj = Linear(ch[0], config.state_dim, rng, name="out_proj", zero_init=True)

    def make_force_tokens(self, force: Tensor) -> Tensor:
        flat = self.force_mlp(force)
        b = flat.shape[0]
        return T.reshape(flat, (b, self.config.force_tokens, self.config.token_dim))

    def __call__(self, x_t: Tensor, t, scene_context: Tensor, current_state: Tensor,
                 force: Tensor | None, force_tokens: Tensor | None = None) -> Tensor:
        cfg = self.config
        if x_t.shape[-2:] != (cfg.horizon, cfg.state_dim):
            raise ShapeError(
                f"x_t must end in ({cfg.horizon}, {cfg.state_dim}), got {x_t.shape}"
            )
        b = x_t.shape[0]
        t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (b,))
        emb = Tensor(timestep_embedding(t, cfg.time_embed_dim))
        cond = T.concatenate([scene_context, current_state, emb], axis=-1)
        if not cfg.vision_only and force_tokens is None:
            if force is None:
                raise ShapeError("force conditioning required unless vision_only is set")
            force_tokens = self.make_force_tokens(force)
        if cfg.vision_only:
            force_tokens = None

        h = self.in_proj(x_t)
        skips = []
        last = len(self.encoder) - 1
        for i, stage in enumerate(self.encoder):
            h = stage(h, cond)
            if i < last:
                skips.append(h)
                h = T.avg_pool_time(h)
                if self.down_proj[i] is not None:
                    h = self.down_proj[i](h)
        for i in range(last, -1, -1):
            h = self.decoder[i](h, force_tokens)
            if i > 0:
                h = T.repeat_time(h)
                if self.up_proj[i - 1] is not None:
                    h = self.up_proj[i - 1](h)
                h = T.concatenate([h, skips[i - 1]], axis=-1)
                h = self.merge[i - 1](h)
        out = self.out_proj(h)
        return T.clamp(out, -cfg.clamp_box, cfg.clamp_box)


# ---------------------------------------------------------------------------
# planner


class DiffusionPlanner:
    """Owns the denoiser, schedule, normalizer, and EMA shadow weights."""

    def __init__(self, config: DiffusionConfig, normalizer: Normalizer):
        self.config = config
        self.normalizer = normalizer
        self.schedule = make_schedule(
            config.diffusion_steps, config.beta_kind, (config.beta_start, config.beta_end)
        )
        rng = np.random.default_rng(config.init_seed)
        self.net = Denoiser(config, rng)
        self.params = self.net.parameters()
        names = [p.name for p in self.params]
        if len(names) != len(set(names)):
            raise ShapeError("duplicate parameter names in denoiser")
        self.ema = EmaTracker(self.params, decay=config.ema_decay)

    @property
    def parameter_count(self) -> int:
        return sum(p.values.size for p in self.params)

    def make_conditions(self, observations: np.ndarray, current_states: np.ndarray,
                        forces: np.ndarray, t=None) -> ConditionBundle:
        """Normalize raw world-unit inputs into a ConditionBundle.

        Also derives the nominal anchor arc from the raw observation, so
        bundles built here are ready for sample().
        """
        return ConditionBundle(
            scene_context=self.normalizer.normalize_observation(observations),
            current_state=self.normalizer.normalize_states(current_states),
            force=self.normalizer.normalize_force(forces),
            t=t,
            nominal=nominal_arc(observations, self.config.horizon),
        )

    @contextmanager
    def _ema_weights(self):
        stash = [p.values.copy() for p in self.params]
        self.ema.copy_to_params()
        try:
            yield
        finally:
            for p, saved in zip(self.params, stash):
                p.values[...] = saved

    def denoise(self, x_t: np.ndarray, cond: ConditionBundle,
                use_ema: bool = False) -> np.ndarray:
        """One clean-sequence prediction in normalized units.

        Accepts (L, 2) or (B, L, 2) input; the output matches.  cond.t names
        the diffusion step (scalar or per-item).
        """
        if cond.t is None:
            raise ValueError("denoise() needs cond.t")
        x = np.asarray(x_t, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        ctx = np.atleast_2d(cond.scene_context)
        cur = np.atleast_2d(cond.current_state)
        frc = np.atleast_2d(cond.force)
        with no_grad():
            runner = self._ema_weights() if use_ema else _null_context()
            with runner:
                out = self.net(Tensor(x), cond.t, Tensor(ctx), Tensor(cur), Tensor(frc)).values
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite denoiser output at t={cond.t}")
        return out[0] if single else out

    def train_step(self, label_states: np.ndarray, cond: ConditionBundle,
                   optimizer: Adam, rng: np.random.Generator) -> float:
        """One diffusion training step on a normalized batch; returns the loss."""
        x0 = np.asarray(label_states, dtype=np.float64)
        if x0.ndim != 3:
            raise ShapeError(f"label_states must be (B, L, {self.config.state_dim})")
        b = x0.shape[0]
        t = rng.integers(1, self.schedule.steps + 1, size=b)
        eps = rng.standard_normal(x0.shape)
        x_t = q_sample(self.schedule, x0, t, eps)
        pred = self.net(
            Tensor(x_t), t,
            Tensor(np.atleast_2d(cond.scene_context)),
            Tensor(np.atleast_2d(cond.current_state)),
            Tensor(np.atleast_2d(cond.force)),
        )
        loss = T.mse_loss(pred, Tensor(x0))
        value = float(loss.values)
        if not math.isfinite(value):
            raise NumericError("non-finite training loss")
        optimizer.zero_grad()
        T.backward(loss)
        optimizer.step()
        self.ema.update()
        return value

    def sample(self, cond: ConditionBundle, rng: np.random.Generator,
               use_ema: bool = True) -> StatePlan:
        """Ancestral sampling from pure noise; returns de-normalized states.

        Force tokens are built once and reused across all T steps.  The
        final step's posterior variance is zero, so the last prediction is
        returned deterministically.
        """
        cfg = self.config
        sched = self.schedule
        if cond.nominal is None:
            raise ShapeError("sampling needs the nominal anchor arc; build the "
                             "bundle with make_conditions")
        ctx = np.atleast_2d(cond.scene_context)
        cur = np.atleast_2d(cond.current_state)
        frc = np.atleast_2d(cond.force)
        nominal = cond.nominal.reshape(-1, cfg.horizon, 2)
        single = np.asarray(cond.scene_context).ndim == 1
        b = ctx.shape[0]
        diagnostics = np.zeros(sched.steps)
        with no_grad():
            runner = self._ema_weights() if use_ema else _null_context()
            with runner:
                ctx_t, cur_t = Tensor(ctx), Tensor(cur)
                tokens = None if cfg.vision_only else self.net.make_force_tokens(Tensor(frc))
                x = rng.standard_normal((b, cfg.horizon, cfg.state_dim))
                for t in range(sched.steps, 0, -1):
                    x0_hat = self.net(Tensor(x), t, ctx_t, cur_t, None, tokens).values
                    mean = (sched.posterior_mean_coef_x0[t - 1] * x0_hat
                            + sched.posterior_mean_coef_xt[t - 1] * x)
                    if t > 1:
                        noise = rng.standard_normal(x.shape)
                        x = mean + math.sqrt(sched.posterior_variance[t - 1]) * noise
                    else:
                        x = mean
                    if not np.all(np.isfinite(x)):
                        raise NumericError(f"non-finite sample state at step t={t}")
                    diagnostics[sched.steps - t] = float(
                        np.sqrt((x * x).sum(axis=-1)).mean()
                    )
        states = nominal + self.normalizer.denormalize_offsets(x)
        if single:
            states = states[0]
        return StatePlan(states=states, diagnostics=diagnostics)

    # persistence ----------------------------------------------------------

    def save(self, path) -> None:
        """Write weights (raw and EMA) plus a JSON sidecar with the config
        and normalization statistics."""
        arrays = {p.name: p.values for p in self.params}
        for name, shadow in self.ema.shadow.items():
            arrays[f"{name}@ema"] = shadow
        meta = {"config": self.config.to_dict(), "normalizer": self.normalizer.to_dict()}
        save_checkpoint(path, arrays, meta)
        sidecar = {"format_version": 1}
        sidecar.update(meta)
        Path(f"{path}.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
        )

    @classmethod
    def load(cls, path) -> "DiffusionPlanner":
        arrays, meta = load_checkpoint(path)
        if "config" not in meta or "normalizer" not in meta:
            raise CheckpointError(f"checkpoint {path}: missing config or normalizer metadata")
        planner = cls(
            DiffusionConfig.from_dict(meta["config"]),
            Normalizer.from_dict(meta["normalizer"]),
        )
        raw = {n: a for n, a in arrays.items() if not n.endswith("@ema")}
        ema = {n[:-len("@ema")]: a for n, a in arrays.items() if n.endswith("@ema")}
        expected = {p.name for p in planner.params}
        if set(raw) != expected or set(ema) != expected:
            raise CheckpointError(f"checkpoint {path}: parameter names do not match config")
        for p in planner.params:
            if raw[p.name].shape != p.values.shape:
                raise CheckpointError(
                    f"checkpoint {path}: shape mismatch for {p.name!r}"
                )
            p.values[...] = raw[p.name]
            planner.ema.shadow[p.name][...] = ema[p.name]
        return planner


@contextmanager
def _null_context():
    yield


# ---------------------------------------------------------------------------
# training loop


def train(planner: DiffusionPlanner, plans: np.ndarray, observations: np.ndarray,
          current_states: np.ndarray, forces: np.ndarray, *,
          epochs: int = 60, batch_size: int = 64, lr: float = 1e-4,
          lr_decay: float = 0.985, groups: list | None = None, per_group: int = 2,
          seed: int = 0, log=None) -> list[float]:
    """Train the planner on raw world-unit examples; returns per-epoch losses.

    plans: (N, L, 2) label sequences; observations: (N, 5); current_states:
    (N, 2); forces: (N, 2).  When ``groups`` lists index arrays (one per
    source episode), each epoch draws ``per_group`` examples from every
    group instead of sweeping all N; that keeps epoch cost independent of
    the recording cadence.
    """
    for name, arr in (("plans", plans), ("observations", observations),
                      ("current_states", current_states), ("forces", forces)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in training array {name!r}")
    norm = planner.normalizer
    anchors = nominal_arc(observations, planner.config.horizon)
    x0 = norm.normalize_offsets(np.asarray(plans, dtype=np.float64) - anchors)
    obs = norm.normalize_observation(observations)
    cur = norm.normalize_states(current_states)
    frc = norm.normalize_force(forces)

    rng = np.random.default_rng(seed)
    optimizer = Adam(planner.params, lr=lr)
    curve: list[float] = []
    n = len(x0)
    for epoch in range(epochs):
        optimizer.lr = lr * (lr_decay ** epoch)
        if groups is None:
            order = rng.permutation(n)
        else:
            picks = [
                g if len(g) <= per_group else rng.choice(g, size=per_group, replace=False)
                for g in groups
            ]
            order = np.concatenate(picks)
            rng.shuffle(order)
        losses = []
        for start in range(0, len(order), batch_size):
            sel = order[start:start + batch_size]
            cond = ConditionBundle(
                scene_context=obs[sel], current_state=cur[sel], force=frc[sel]
            )
            losses.append(planner.train_step(x0[sel], cond, optimizer, rng))
        mean_loss = float(np.mean(losses))
        curve.append(mean_loss)
        if log is not None:
            log(epoch, mean_loss)
    return curve
