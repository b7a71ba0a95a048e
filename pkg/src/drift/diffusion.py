"""DDPM noise schedule, conditional 1-D conv U-Net, training loss and sampler.

The U-Net follows the usual diffusion-policy layout: residual conv blocks
with group norm and Mish, FiLM conditioning from a sinusoidal timestep
embedding concatenated with the flattened observation history, one
down/up level per entry of ``channels`` beyond the first, and a skip
connection from each down level into the matching up level.

Every convolution sits in a ``ConvSlot`` whose implementation can be swapped
between plain, factored (rank modulation) and LoRA without touching the
rest of the network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .lowrank import ConvGeometry, FactoredConv, LoraConv, PlainConv
from .numerics import (
    ContractError,
    Parameter,
    Tensor,
    add,
    concat,
    group_norm,
    linear,
    mish,
    mse_loss,
    mul,
    no_grad,
    reshape,
    upsample_nearest,
)

# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    sigmas: np.ndarray = field(init=False)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size == 0 or np.any(b < 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty 1-D array in [0, 1)")
        self.betas = b
        self.alphas = 1.0 - b
        self.alpha_bars = np.cumprod(self.alphas)
        self.sigmas = np.sqrt(b)

    @property
    def steps(self) -> int:
        return self.betas.size

    @classmethod
    def linear(cls, steps: int = 100, beta_start: float | None = None, beta_end: float | None = None):
        """Linear betas.

        With explicit ``beta_start``/``beta_end`` this is a plain ``linspace``.
        By default the usual 1000-step chain (1e-4 .. 2e-2) is treated as a
        continuous noise rate and integrated over ``steps`` equal intervals,
        so every chain length ends at the same total noise level
        (alpha_bar_T = exp(-10.05)) and no beta ever reaches 1.
        """
        if beta_start is not None or beta_end is not None:
            lo = 1e-4 if beta_start is None else beta_start
            hi = 2e-2 if beta_end is None else beta_end
            return cls(np.linspace(lo, hi, steps))
        lo, hi = 1e-4 * 1000.0, 2e-2 * 1000.0
        s = np.linspace(0.0, 1.0, steps + 1)
        integral = lo * s + 0.5 * (hi - lo) * s**2
        return cls(-np.expm1(-np.diff(integral)))

    @classmethod
    def cosine(cls, steps: int = 100, s: float = 0.008, max_beta: float = 0.999):
        f = lambda t: math.cos((t / steps + s) / (1 + s) * math.pi / 2) ** 2
        b = [min(1 - f(t + 1) / f(t), max_beta) for t in range(steps)]
        return cls(np.array(b))

    def ab(self, t):
        """alpha_bar at 1-based step(s) t."""
        return self.alpha_bars[np.asarray(t) - 1]


def forward_diffuse(x0, t: int, noise, ns: NoiseSchedule) -> np.ndarray:
    """Closed-form q(x_t | x_0)."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    if not 1 <= t <= ns.steps:
        raise ValueError(f"t must be in [1, {ns.steps}], got {t}")
    ab = ns.alpha_bars[t - 1]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def forward_diffuse_stepwise(x0, t: int, ns: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Sample x_t by applying q(x_s | x_{s-1}) t times."""
    x = np.asarray(x0, dtype=np.float64)
    for s in range(1, t + 1):
        beta = ns.betas[s - 1]
        x = math.sqrt(1.0 - beta) * x + math.sqrt(beta) * rng.standard_normal(x.shape)
    return x


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------


@dataclass
class MinMaxScaler:
    """Affine map of each dimension from [low, high] to [-1, 1]."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=np.float64)
        self.high = np.asarray(self.high, dtype=np.float64)
        if np.any(self.high <= self.low):
            raise ValueError("scaler needs high > low in every dimension")

    def scale(self, x):
        return 2.0 * (np.asarray(x) - self.low) / (self.high - self.low) - 1.0

    def unscale(self, y):
        return (np.asarray(y) + 1.0) * 0.5 * (self.high - self.low) + self.low


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class Module:
    """Minimal container: parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())


def _walk(value, path):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")
    elif isinstance(value, (PlainConv, FactoredConv, LoraConv)):
        for k, p in value.parameters().items():
            yield f"{path}.{k}", p


class ConvSlot(Module):
    def __init__(self, geom: ConvGeometry, layer):
        self.geom = geom
        self.layer = layer

    def __call__(self, x: Tensor) -> Tensor:
        return self.layer(x)

    @property
    def mode(self) -> str:
        return self.layer.kind


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (d_in, d_out)).astype(dtype))
        self.bias = Parameter(rng.uniform(-bound, bound, (d_out,)).astype(dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, dtype):
        self.groups = groups
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.weight, self.bias)


class ConvBlock(Module):
    """conv -> group norm -> Mish."""

    def __init__(self, net: "PolicyNet", c_in: int, c_out: int, k: int, groups: int):
        self.conv = net._new_conv(ConvGeometry(c_out, c_in, k, 1, k // 2))
        self.norm = GroupNorm(groups, c_out, net.dtype)

    def __call__(self, x):
        return mish(self.norm(self.conv(x)))


class CondResBlock(Module):
    def __init__(self, net: "PolicyNet", c_in: int, c_out: int, cond_dim: int):
        k, g = net.kernel_size, net.groups
        self.block1 = ConvBlock(net, c_in, c_out, k, g)
        self.block2 = ConvBlock(net, c_out, c_out, k, g)
        self.film = Linear(cond_dim, 2 * c_out, net.rng, net.dtype)
        self.c_out = c_out
        self.residual = net._new_conv(ConvGeometry(c_out, c_in, 1)) if c_in != c_out else None

    def __call__(self, x, cond_act):
        h = self.block1(x)
        film = self.film(cond_act)
        B = film.shape[0]
        scale = reshape(film[:, : self.c_out], (B, self.c_out, 1))
        shift = reshape(film[:, self.c_out :], (B, self.c_out, 1))
        h = add(mul(h, scale), shift)
        h = self.block2(h)
        res = self.residual(x) if self.residual is not None else x
        return add(h, res)


def sinusoidal_embedding(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


@dataclass
class NetConfig:
    action_dim: int = 2
    obs_dim: int = 6
    horizon: int = 8
    obs_horizon: int = 2
    channels: tuple = (32, 64)
    kernel_size: int = 3
    groups: int = 8
    time_embed_dim: int = 32
    obs_embed_dim: int = 32
    mode: str = "plain"
    rank: int | None = None
    lora_alpha: float = 1.0
    dtype: str = "float32"

    @property
    def cond_dim(self) -> int:
        return self.time_embed_dim + self.obs_embed_dim


class PolicyNet(Module):
    """Conditional 1-D U-Net noise predictor: (x_t, t, obs) -> predicted noise."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        if cfg.mode not in ("plain", "factored", "lora"):
            raise ValueError(f"unknown block mode {cfg.mode!r}")
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.kernel_size = cfg.kernel_size
        self.groups = cfg.groups
        self._slots: list[ConvSlot] = []
        self.rng = np.random.default_rng(seed)
        # layers are first built plain so every mode starts from identical weights
        self._build_mode = "plain"

        dsed = cfg.time_embed_dim
        self.time_mlp1 = Linear(dsed, 4 * dsed, self.rng, self.dtype)
        self.time_mlp2 = Linear(4 * dsed, dsed, self.rng, self.dtype)
        obs_in = cfg.obs_dim * cfg.obs_horizon
        self.obs_mlp1 = Linear(obs_in, 2 * cfg.obs_embed_dim, self.rng, self.dtype)
        self.obs_mlp2 = Linear(2 * cfg.obs_embed_dim, cfg.obs_embed_dim, self.rng, self.dtype)
        cond_dim = cfg.cond_dim

        dims = [cfg.action_dim, *cfg.channels]
        in_out = list(zip(dims[:-1], dims[1:]))
        self.down = []
        for i, (d_in, d_out) in enumerate(in_out):
            last = i == len(in_out) - 1
            level = [CondResBlock(self, d_in, d_out, cond_dim), CondResBlock(self, d_out, d_out, cond_dim)]
            level.append(None if last else self._new_conv(ConvGeometry(d_out, d_out, 3, 2, 1)))
            self.down.append(level)
        mid = cfg.channels[-1]
        self.mid = [CondResBlock(self, mid, mid, cond_dim), CondResBlock(self, mid, mid, cond_dim)]
        self.up = []
        for d_in, d_out in reversed(in_out[1:]):
            level = [CondResBlock(self, 2 * d_out, d_in, cond_dim), CondResBlock(self, d_in, d_in, cond_dim)]
            level.append(self._new_conv(ConvGeometry(d_in, d_in, 3, 1, 1)))
            self.up.append(level)
        self.final_block = ConvBlock(self, cfg.channels[0], cfg.channels[0], cfg.kernel_size, cfg.groups)
        self.final_conv = self._new_conv(ConvGeometry(cfg.action_dim, cfg.channels[0], 1))
        del self.rng

        self.mode = "plain"
        if cfg.mode == "factored":
            to_factored(self, cfg.rank if cfg.rank is not None else self.max_rank)
        elif cfg.mode == "lora":
            to_lora(self, cfg.rank if cfg.rank is not None else 1, np.random.default_rng(seed + 1), cfg.lora_alpha)

    def _new_conv(self, geom: ConvGeometry) -> ConvSlot:
        slot = ConvSlot(geom, PlainConv.init(geom, self.rng, self.dtype))
        self._slots.append(slot)
        return slot

    @property
    def slots(self) -> list[ConvSlot]:
        return self._slots

    @property
    def max_rank(self) -> int:
        return max(s.geom.r_max for s in self._slots)

    def ranks(self) -> list[int]:
        return [s.layer.rank for s in self._slots]

    def __call__(self, x, t, obs) -> Tensor:
        """x: (B, A, H) noisy actions; t: (B,) int steps; obs: (B, O*obs_dim)."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        temb = Tensor(sinusoidal_embedding(np.asarray(t), self.cfg.time_embed_dim, self.dtype))
        temb = self.time_mlp2(mish(self.time_mlp1(temb)))
        obs_t = obs if isinstance(obs, Tensor) else Tensor(np.asarray(obs, dtype=self.dtype))
        oemb = self.obs_mlp2(mish(self.obs_mlp1(obs_t)))
        cond = mish(concat([temb, oemb], axis=1))

        h = x
        skips = []
        for res1, res2, down in self.down:
            h = res2(res1(h, cond), cond)
            skips.append(h)
            if down is not None:
                h = down(h)
        for blk in self.mid:
            h = blk(h, cond)
        # each up level consumes the skip at its own resolution, deepest first;
        # the outermost skip is left unused, as in the reference diffusion-policy U-Net
        for res1, res2, upconv in self.up:
            h = concat([h, skips.pop()], axis=1)
            h = res2(res1(h, cond), cond)
            h = upconv(upsample_nearest(h, 2))
        h = self.final_block(h)
        return self.final_conv(h)


# ---------------------------------------------------------------------------
# mode switches
# ---------------------------------------------------------------------------


def _layer_weight_bias(layer):
    return layer.effective_weight().copy(), layer.bias


def to_factored(net: PolicyNet, r: int) -> None:
    for slot in net.slots:
        w, b = _layer_weight_bias(slot.layer)
        slot.layer = FactoredConv.from_weight(slot.geom, w, b, min(r, slot.geom.r_max))
    net.mode = "factored"


def to_lora(net: PolicyNet, r: int, rng: np.random.Generator, alpha: float = 1.0) -> None:
    """Freeze the current effective weights and attach fresh adapters of rank r."""
    for slot in net.slots:
        w, b = _layer_weight_bias(slot.layer)
        slot.layer = LoraConv.wrap(slot.geom, w, b, min(r, slot.geom.lora_r_max), rng, alpha)
    net.mode = "lora"


def to_plain(net: PolicyNet) -> None:
    for slot in net.slots:
        w, b = _layer_weight_bias(slot.layer)
        slot.layer = PlainConv(slot.geom, w, b.data)
        slot.layer.bias = b
    net.mode = "plain"


def set_policy_rank(net: PolicyNet, r: int, rng: np.random.Generator | None = None) -> None:
    """Rank reduction: re-partition factored blocks, or merge and re-inject LoRA adapters."""
    if net.mode == "factored":
        for slot in net.slots:
            slot.layer.set_rank(min(r, slot.geom.r_max))
    elif net.mode == "lora":
        if rng is None:
            raise ContractError("re-injecting LoRA adapters needs an rng")
        alpha = net.slots[0].layer.alpha if net.slots else 1.0
        to_lora(net, r, rng, alpha)
    else:
        raise ContractError("set_policy_rank needs factored or LoRA blocks, net is plain")


# ---------------------------------------------------------------------------
# loss and sampling
# ---------------------------------------------------------------------------

NoiseNet = Callable[[Tensor, np.ndarray, np.ndarray], Tensor]


def ddpm_loss(net: NoiseNet, x0, obs, ns: NoiseSchedule, rng: np.random.Generator, dtype=None) -> Tensor:
    """Noise-prediction MSE at uniformly drawn steps. ``x0``: (B, A, H) scaled actions."""
    x0 = np.asarray(x0)
    if dtype is None:
        dtype = getattr(net, "dtype", x0.dtype)
    dtype = np.dtype(dtype)
    B = x0.shape[0]
    t = rng.integers(1, ns.steps + 1, size=B)
    noise = rng.standard_normal(x0.shape)
    ab = ns.ab(t)[:, None, None]
    x_t = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(dtype)
    pred = net(Tensor(x_t), t, obs)
    return mse_loss(pred, noise.astype(dtype))


def sample_actions(net: NoiseNet, obs, ns: NoiseSchedule, rng, shape, clip: bool = True, dtype=np.float32) -> np.ndarray:
    """Run the reverse chain from pure noise; returns (B, A, H) in scaled units.

    The mean at each step is the DDPM posterior mean given the predicted
    noise. With ``clip`` the implied x_0 estimate is clipped to [-1, 1]
    before forming that mean.
    """
    B = shape[0]
    x = rng.standard_normal(shape)
    with no_grad():
        for t in range(ns.steps, 0, -1):
            eps = net(Tensor(x.astype(dtype)), np.full(B, t), obs).data.astype(np.float64)
            beta = ns.betas[t - 1]
            alpha = ns.alphas[t - 1]
            ab = ns.alpha_bars[t - 1]
            ab_prev = ns.alpha_bars[t - 2] if t > 1 else 1.0
            if clip:
                x0_hat = np.clip((x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab), -1.0, 1.0)
                mean = (math.sqrt(ab_prev) * beta / (1.0 - ab)) * x0_hat + (
                    math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
                ) * x
            else:
                mean = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
            if t > 1:
                x = mean + ns.sigmas[t - 1] * rng.standard_normal(shape)
            else:
                x = mean
    return np.clip(x, -1.0, 1.0) if clip else x


class DiffusionPolicy:
    """Noise-prediction net plus everything needed to act: schedule, scalers, horizons."""

    def __init__(self, net: PolicyNet, ns: NoiseSchedule, action_low, action_high, exec_horizon: int = 1, clip: bool = True):
        self.net = net
        self.ns = ns
        self.scaler = MinMaxScaler(action_low, action_high)
        self.exec_horizon = exec_horizon
        self.clip = clip

    @property
    def cfg(self) -> NetConfig:
        return self.net.cfg

    def cond(self, obs_hist) -> np.ndarray:
        obs_hist = np.asarray(obs_hist)
        return obs_hist.reshape(obs_hist.shape[0], -1).astype(self.net.dtype)

    def loss(self, actions, obs_hist, rng) -> Tensor:
        """actions: (B, H, A) env units; obs_hist: (B, O, obs_dim)."""
        x0 = self.scaler.scale(actions).transpose(0, 2, 1)
        return ddpm_loss(self.net, x0, self.cond(obs_hist), self.ns, rng, dtype=self.net.dtype)

    def predict(self, obs_hist, rng) -> np.ndarray:
        """(B, O, obs_dim) -> (B, H, A) env-unit action chunk."""
        B = np.asarray(obs_hist).shape[0]
        shape = (B, self.cfg.action_dim, self.cfg.horizon)
        x = sample_actions(self.net, self.cond(obs_hist), self.ns, rng, shape, self.clip, self.net.dtype)
        return self.scaler.unscale(x.transpose(0, 2, 1))

    def parameters(self) -> dict[str, Parameter]:
        return self.net.parameters()
