"""Diffusion over spatial tokens: noise schedule, closed-form forward noising,
attention denoiser, ancestral sampling of the backdoor token set and the
noise-prediction loss used in the first training stage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from causaltraj.exceptions import NumericalError


class DiffusionSchedule:
    """Cumulative signal coefficients ``alpha_bar[1..m]``.

    Stored 0-based: ``alpha_bar[j - 1]`` is the coefficient of step ``j``.
    """

    def __init__(self, alpha_bar):
        ab = np.asarray(alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 1:
            raise ValueError("alpha_bar must be a non-empty 1-D sequence")
        if not (np.all(ab > 0) and np.all(ab < 1)):
            raise ValueError("alpha_bar entries must lie strictly inside (0, 1)")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        self.alpha_bar = ab
        prev = np.concatenate([[1.0], ab[:-1]])
        self.alphas = ab / prev
        self.betas = 1.0 - self.alphas
        # posterior variance of q(S_{j-1} | S_j, S_0); zero at j = 1
        self.posterior_variance = self.betas * (1.0 - prev) / (1.0 - ab)

    @property
    def m(self) -> int:
        return len(self.alpha_bar)

    def check_step(self, j) -> None:
        arr = np.asarray(j.cpu() if isinstance(j, torch.Tensor) else j)
        if arr.size and (arr.min() < 1 or arr.max() > self.m):
            raise ValueError(f"step index must lie in [1, {self.m}], got {j}")

    def coef(self, name: str, j, like: torch.Tensor) -> torch.Tensor:
        """Gather a per-step coefficient, broadcastable against ``like``."""
        table = torch.as_tensor(getattr(self, name), dtype=like.dtype)
        if isinstance(j, torch.Tensor) and j.dim() > 0:
            vals = table[j.long() - 1]
            return vals.reshape(-1, *([1] * (like.dim() - 1)))
        return table[int(j) - 1]

    def to_dict(self) -> dict:
        return {"alpha_bar": self.alpha_bar.tolist()}


def cosine_schedule(m: int, s: float = 0.008, max_beta: float = 0.99) -> DiffusionSchedule:
    t = np.arange(m + 1) / m
    f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
    betas = np.clip(1 - f[1:] / f[:-1], 0.0, max_beta)
    return DiffusionSchedule(np.cumprod(1 - betas))


def linear_schedule(m: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    scale = 1000.0 / m
    betas = np.linspace(scale * beta_start, min(scale * beta_end, 0.999), m)
    return DiffusionSchedule(np.cumprod(1 - betas))


def make_schedule(kind: str, m: int) -> DiffusionSchedule:
    if kind == "cosine":
        return cosine_schedule(m)
    if kind == "linear":
        return linear_schedule(m)
    raise ValueError(f"unknown schedule {kind!r}")


def forward_noise(s0: torch.Tensor, j, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """Closed-form jump ``sqrt(ab_j) * s0 + sqrt(1 - ab_j) * eps``."""
    sched.check_step(j)
    if eps.shape != s0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != token shape {tuple(s0.shape)}")
    ab = sched.coef("alpha_bar", j, s0)
    return torch.sqrt(ab) * s0 + torch.sqrt(1 - ab) * eps


def forward_step(s_prev: torch.Tensor, j, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """One incremental noising step from ``j - 1`` to ``j``."""
    sched.check_step(j)
    a = sched.coef("alphas", j, s_prev)
    return torch.sqrt(a) * s_prev + torch.sqrt(1 - a) * eps


def predict_start(sj: torch.Tensor, j, eps_hat: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """Invert the closed-form jump given a noise estimate."""
    ab = sched.coef("alpha_bar", j, sj)
    return (sj - torch.sqrt(1 - ab) * eps_hat) / torch.sqrt(ab)


# -------------------------------------------------------------------- model


def step_embedding(j: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = j.double()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class _Block(nn.Module):
    def __init__(self, width: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.ffn = nn.Sequential(nn.Linear(width, 2 * width), nn.SiLU(), nn.Linear(2 * width, width))

    def forward(self, x, mask):
        b, n, w = x.shape
        hd = w // self.heads
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        q, k, v = (t.reshape(b, n, self.heads, hd).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        att = torch.softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, w)
        x = x + self.proj(y)
        return x + self.ffn(self.norm2(x))


class Denoiser(nn.Module):
    """Attention encoder over token rows predicting the injected noise."""

    def __init__(self, d_model: int = 32, hidden: int = 64, blocks: int = 2, heads: int = 1):
        super().__init__()
        self.hidden = hidden
        self.inp = nn.Linear(d_model, hidden)
        self.step_mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.blocks = nn.ModuleList(_Block(hidden, heads) for _ in range(blocks))
        self.norm = nn.LayerNorm(hidden)
        self.out = nn.Linear(hidden, d_model)

    def forward(self, sj: torch.Tensor, j, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, _ = sj.shape
        if mask is None:
            mask = torch.ones(b, n, dtype=torch.bool)
        if not isinstance(j, torch.Tensor) or j.dim() == 0:
            j = torch.full((b,), int(j), dtype=torch.long)
        temb = self.step_mlp(step_embedding(j, self.hidden).to(sj.dtype))
        x = self.inp(sj) + temb[:, None, :]
        for blk in self.blocks:
            x = blk(x, mask)
        return self.out(self.norm(x)) * mask[..., None]


NoisePredictor = Callable[..., torch.Tensor]


def _randn(shape, generator, dtype, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Standard normal draws; a list of generators draws each leading row separately.

    With per-scene generators and a row mask (rows, N_m), each scene draws only
    for its valid rows so its stream does not depend on the batch's padding.
    """
    if not isinstance(generator, (list, tuple)):
        return torch.randn(shape, generator=generator, dtype=dtype)
    per = shape[0] // len(generator)
    if mask is None or len(shape) != 3:
        return torch.cat([torch.randn((per, *shape[1:]), generator=g, dtype=dtype) for g in generator])
    out = torch.zeros(shape, dtype=dtype)
    for i, g in enumerate(generator):
        keep = mask[i * per].bool()
        out[i * per : (i + 1) * per, keep] = torch.randn((per, int(keep.sum()), shape[2]), generator=g, dtype=dtype)
    return out


def denoise_step(sj: torch.Tensor, j: int, model: NoisePredictor, sched: DiffusionSchedule,
                 generator=None, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Ancestral update from step ``j`` to ``j - 1`` with fixed posterior variance."""
    sched.check_step(j)
    eps_hat = model(sj, j, mask)
    if not torch.all(torch.isfinite(eps_hat)):
        raise NumericalError(f"denoiser produced non-finite output at step {j}")
    a = sched.coef("alphas", j, sj)
    ab = sched.coef("alpha_bar", j, sj)
    mean = (sj - (1 - a) / torch.sqrt(1 - ab) * eps_hat) / torch.sqrt(a)
    if j > 1:
        var = float(sched.posterior_variance[j - 1])
        mean = mean + math.sqrt(var) * _randn(sj.shape, generator, sj.dtype, mask)
    return mean


@dataclass
class BackdoorSet:
    samples: torch.Tensor  # (n, N_m, D)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    def __iter__(self):
        return iter(self.samples)


def _generator(seed_or_gen) -> torch.Generator:
    if isinstance(seed_or_gen, torch.Generator):
        return seed_or_gen
    g = torch.Generator()
    g.manual_seed(int(seed_or_gen or 0))
    return g


def sample_chains(sh: torch.Tensor, n: int, model: NoisePredictor, sched: DiffusionSchedule,
                  generator, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Batched reverse chains: (B, N_m, D) -> (B, n, N_m, D).

    ``generator`` is one torch.Generator, or a list with one per scene so
    that each scene's samples do not depend on the rest of the batch.
    """
    if n < 1:
        raise ValueError(f"backdoor set size must be >= 1, got {n}")
    b, n_m, d = sh.shape
    x0 = sh[:, None].expand(b, n, n_m, d).reshape(b * n, n_m, d)
    m_flat = None if mask is None else mask[:, None].expand(b, n, n_m).reshape(b * n, n_m)
    eps = _randn(x0.shape, generator, sh.dtype, m_flat)
    x = forward_noise(x0, sched.m, eps, sched)
    for j in range(sched.m, 0, -1):
        x = denoise_step(x, j, model, sched, generator, m_flat)
    if m_flat is not None:
        x = x * m_flat[..., None]
    return x.reshape(b, n, n_m, d)


def sample_backdoor_set(sh, n: int, model: NoisePredictor, sched: DiffusionSchedule, seed=0,
                        mask: torch.Tensor | None = None) -> BackdoorSet:
    """Draw ``n`` reverse-chain samples started from ``sh`` noised to step m."""
    values = sh if isinstance(sh, torch.Tensor) else sh.values
    if n < 1:
        raise ValueError(f"backdoor set size must be >= 1, got {n}")
    g = _generator(seed)
    m = None if mask is None else mask[None]
    return BackdoorSet(sample_chains(values[None], n, model, sched, g, m)[0])


def diffusion_loss(s0: torch.Tensor, model: NoisePredictor, sched: DiffusionSchedule, seed=0,
                   mask: torch.Tensor | None = None, norm: str = "squared_l2") -> torch.Tensor:
    """Mean over the batch of ``||eps - eps_hat||`` (squared by default)."""
    if s0.dim() == 2:
        s0 = s0[None]
    if s0.shape[0] == 0:
        raise ValueError("diffusion loss needs a non-empty batch")
    if norm not in ("squared_l2", "l2"):
        raise ValueError(f"unknown norm {norm!r}")
    g = _generator(seed)
    b = s0.shape[0]
    j = torch.randint(1, sched.m + 1, (b,), generator=g)
    eps = torch.randn(s0.shape, generator=g, dtype=s0.dtype)
    if mask is not None:
        eps = eps * mask[..., None]
    sj = forward_noise(s0, j, eps, sched)
    eps_hat = model(sj, j, mask)
    diff = eps - eps_hat
    if mask is not None:
        diff = diff * mask[..., None]
    sq = diff.pow(2).flatten(1).sum(dim=1)
    per = sq if norm == "squared_l2" else torch.sqrt(sq)
    return per.mean()


class OracleDenoiser:
    """Returns the exact noise that maps ``s0`` to the given noised tokens."""

    def __init__(self, s0: torch.Tensor, sched: DiffusionSchedule):
        self.s0 = s0
        self.sched = sched

    def __call__(self, sj, j, mask=None):
        ab = self.sched.coef("alpha_bar", j, sj)
        return (sj - torch.sqrt(ab) * self.s0) / torch.sqrt(1 - ab)
