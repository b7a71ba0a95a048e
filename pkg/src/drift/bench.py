"""Counted FLOPs, trainable-parameter counts and wall-clock timings per rank.

Timings follow one protocol everywhere: the first ``warmup`` batches are
discarded (JIT compilation, allocator and cache warmup) and the remaining
ones are summarised by median and inter-quartile range. Ranks are measured
interleaved, batch by batch, so slow drifts of the machine (frequency
scaling, noisy neighbours) hit every rank alike instead of whichever rank
happened to run during the slow stretch.
"""

from __future__ import annotations

import gc
import time
from dataclasses import asdict, dataclass

import numpy as np

from .diffusion import NetConfig, NoiseSchedule, PolicyNet, ddpm_loss, to_factored, to_lora
from .lowrank import layer_forward_flops, trainable_param_count
from .numerics import backward, no_grad


def default_ranks(p: int) -> list[int]:
    """p, p/2, p/4, p/8 (at least 1)."""
    return [max(1, p // d) for d in (1, 2, 4, 8)]


def build_fraction_net(divisor: int, net_cfg: NetConfig | None = None, seed: int = 0) -> PolicyNet:
    """Factored net where every conv layer trains ``max(1, p // divisor)`` ranks of its own p = min(m, n)."""
    net = build_net("factored", None, net_cfg, seed)
    for s in net.slots:
        s.layer.set_rank(max(1, s.layer.factors.p // divisor))
    return net


def build_net(mode: str, rank: int | None, net_cfg: NetConfig | None = None, seed: int = 0) -> PolicyNet:
    cfg = net_cfg or NetConfig()
    net = PolicyNet(NetConfig(**{**asdict(cfg), "mode": "plain", "rank": None}), seed=seed)
    if mode == "factored":
        to_factored(net, rank if rank is not None else net.max_rank)
    elif mode == "lora":
        to_lora(net, rank if rank is not None else 1, np.random.default_rng(seed + 1), cfg.lora_alpha)
    elif mode != "plain":
        raise ValueError(f"unknown mode {mode!r}")
    return net


def counted_forward_flops(net: PolicyNet, batch: int = 1) -> dict[str, int]:
    """Conv and adapter multiply-accumulates of one forward pass of the whole net."""
    lengths = _slot_lengths(net)
    tot = {"conv": 0, "adapter": 0, "total": 0}
    for slot in net.slots:
        f = layer_forward_flops(slot.layer, lengths[id(slot)], batch)
        for k in tot:
            tot[k] += f[k]
    return tot


def _slot_lengths(net: PolicyNet) -> dict[int, int]:
    """Input length seen by every conv slot for horizon H (traced from the U-Net layout)."""
    H = net.cfg.horizon
    out = {}
    L = H
    for level in net.down:
        for blk in level[:2]:
            for s in _block_slots(blk):
                out[id(s)] = L
        if level[2] is not None:
            out[id(level[2])] = L
            L = level[2].geom.out_length(L)
    for blk in net.mid:
        for s in _block_slots(blk):
            out[id(s)] = L
    for level in net.up:
        for blk in level[:2]:
            for s in _block_slots(blk):
                out[id(s)] = L
        L = L * 2
        out[id(level[2])] = L
    for s in _block_slots(net.final_block):
        out[id(s)] = L
    out[id(net.final_conv)] = L
    return out


def _block_slots(block):
    from .diffusion import ConvSlot, Module

    found = []

    def walk(v):
        if isinstance(v, ConvSlot):
            found.append(v)
        elif isinstance(v, Module):
            for name, x in vars(v).items():
                if not name.startswith("_"):
                    walk(x)
        elif isinstance(v, (list, tuple)):
            for x in v:
                walk(x)

    walk(block)
    return found


def conv_trainable_params(net: PolicyNet) -> int:
    """Trainable scalars of the conv slots: r(m+n+1) + bias per factored layer."""
    return sum(trainable_param_count(s.layer) for s in net.slots)


def total_trainable_params(net: PolicyNet) -> int:
    return sum(p.data.size for p in net.parameters().values() if p.requires_grad)


def _batch(cfg: NetConfig, batch_size: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    x0 = rng.uniform(-1, 1, (batch_size, cfg.action_dim, cfg.horizon)).astype(dtype)
    obs = rng.standard_normal((batch_size, cfg.obs_dim * cfg.obs_horizon)).astype(dtype)
    return x0, obs


def _q(v) -> tuple[float, float]:
    v = np.asarray(v)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(med), float(q3 - q1)


@dataclass
class BenchRow:
    mode: str
    rank: int
    fwd_flops: int
    adapter_flops: int
    conv_trainable_params: int
    trainable_params: int
    fwd_ms_median: float
    fwd_ms_iqr: float
    bwd_ms_median: float
    bwd_ms_iqr: float
    n_batches: int


def time_ranks(mode: str, ranks, net_cfg: NetConfig | None = None, batches: int = 50, warmup: int = 5,
               batch_size: int = 64, repeats: int = 1, diffusion_steps: int = 100, seed: int = 0):
    """Per-rank forward/backward wall times in ms, ``batches`` warm samples each.

    Each sample is the minimum over ``repeats`` back-to-back runs of the same
    batch (the minimum is the least noise-contaminated estimate of a fixed
    amount of work). Garbage collection is paused inside the timed regions.
    """
    cfg = net_cfg or NetConfig()
    nets = {r: build_net(mode, r, cfg, seed) for r in ranks}
    return time_nets(nets, cfg, batches, warmup, batch_size, repeats, diffusion_steps, seed)


def time_nets(nets: dict, net_cfg: NetConfig | None = None, batches: int = 50, warmup: int = 5,
              batch_size: int = 64, repeats: int = 1, diffusion_steps: int = 100, seed: int = 0):
    """Same protocol as :func:`time_ranks` for arbitrary prebuilt nets keyed by label."""
    cfg = net_cfg or NetConfig()
    ns = NoiseSchedule.linear(diffusion_steps)
    x0, obs = _batch(cfg, batch_size, seed)
    fwd = {r: [] for r in nets}
    bwd = {r: [] for r in nets}
    for b in range(warmup + batches):
        for r, net in nets.items():
            params = list(net.parameters().values())
            best_f = best_b = float("inf")
            for _ in range(max(1, repeats)):
                rng = np.random.default_rng(b)
                for p in params:
                    p.grad = None
                gc_was = gc.isenabled()
                gc.disable()
                try:
                    t0 = time.perf_counter()
                    loss = ddpm_loss(net, x0, obs, ns, rng)
                    t1 = time.perf_counter()
                    backward(loss)
                    t2 = time.perf_counter()
                finally:
                    if gc_was:
                        gc.enable()
                best_f = min(best_f, t1 - t0)
                best_b = min(best_b, t2 - t1)
            if b >= warmup:
                fwd[r].append(best_f * 1e3)
                bwd[r].append(best_b * 1e3)
    return fwd, bwd


def bench_table(mode: str = "factored", ranks=None, net_cfg: NetConfig | None = None, batches: int = 50,
                warmup: int = 5, batch_size: int = 64, repeats: int = 1) -> list[BenchRow]:
    cfg = net_cfg or NetConfig()
    if ranks is None:
        ranks = default_ranks(build_net("plain", None, cfg).max_rank)
    ranks = list(ranks)
    fwd, bwd = time_ranks(mode, ranks, cfg, batches, warmup, batch_size, repeats)
    rows = []
    for r in ranks:
        net = build_net(mode, r, cfg)
        flops = counted_forward_flops(net, batch_size)
        fm, fi = _q(fwd[r])
        bm, bi = _q(bwd[r])
        rows.append(BenchRow(mode, r, flops["total"], flops["adapter"], conv_trainable_params(net),
                             total_trainable_params(net), fm, fi, bm, bi, len(fwd[r])))
    return rows


def inference_ms(net: PolicyNet, batch_size: int = 64, batches: int = 50, warmup: int = 5) -> tuple[float, float]:
    """Median/IQR of a no-grad forward pass."""
    cfg = net.cfg
    x0, obs = _batch(cfg, batch_size)
    t = np.full(batch_size, 1)
    out = []
    with no_grad():
        for b in range(warmup + batches):
            t0 = time.perf_counter()
            net(x0, t, obs)
            if b >= warmup:
                out.append((time.perf_counter() - t0) * 1e3)
    return _q(out)

