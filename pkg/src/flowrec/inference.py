"""Deterministic reverse sampling and catalog ranking."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from flowrec.config import SamplerConfig, substream_seed
from flowrec.dataset import pad_sequences
from flowrec.flowcore import reverse_step
from flowrec.seqmodel import FlowRecModel, FusionParams


def integrate(
    predict: Callable,
    x_n,
    steps: int,
    trajectory: str = "straight",
    time_convention: str = "noise_level",
):
    """Euler-integrate from the noise draw ``x_n`` back to a clean point.

    ``predict(z, t)`` returns the predicted clean point for state ``z`` shown
    to the model at time ``t``. Step ``j`` starts at noise level
    ``1 - j / steps``; with ``time_convention="literal"`` the model is shown
    ``j / steps`` instead. ``x_n`` is reused at every step.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    dt = 1.0 / steps
    z = x_n
    for j in range(steps):
        level = 1.0 - j / steps
        shown = level if time_convention == "noise_level" else j / steps
        f = predict(z, shown)
        z = reverse_step(trajectory, z, f, x_n, level, dt)
    return z


def encode_prefixes(prefixes, max_len: int, num_items: int) -> torch.Tensor:
    for p in prefixes:
        if len(p) == 0:
            raise ValueError("cannot sample for an empty prefix")
    return torch.from_numpy(pad_sequences(prefixes, max_len, num_items))


@torch.no_grad()
def reverse_sample(
    model: FlowRecModel,
    item_ids: torch.Tensor,
    cfg: SamplerConfig = SamplerConfig(),
    rng: np.random.Generator | None = None,
    loss_target: str = "x_prediction",
    trajectory: str = "straight",
    delta: float = 0.001,
) -> torch.Tensor:
    """Generate denoised target embeddings ``[B, d]`` for padded histories.

    One standard-normal draw of shape ``[B, d]`` is taken from ``rng`` (a
    fresh generator seeded with ``cfg.seed`` if omitted); no other randomness
    is used unless ``cfg.fusion == "sample"``. A model trained on velocities
    is converted to a clean-point prediction via ``x_n - v``.
    """
    if cfg.steps < 1:
        raise ValueError(f"sampler steps must be >= 1, got {cfg.steps}")
    model.eval()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    dtype = model.item_emb.weight.dtype
    b = item_ids.shape[0]
    x_n = torch.as_tensor(rng.standard_normal((b, model.cfg.dim)), dtype=dtype)
    fusion = FusionParams(delta, cfg.fusion)
    gen = None
    if cfg.fusion == "sample":
        gen = torch.Generator().manual_seed(substream_seed(cfg.seed, "fusion"))

    def predict(z, shown):
        t = torch.full((b,), shown, dtype=dtype)
        f = model(item_ids, z, t, fusion, gen).f_theta
        return x_n - f if loss_target == "v_prediction" else f

    return integrate(predict, x_n, cfg.steps, trajectory, cfg.time_convention)


def item_scores(x_hat, emb) -> np.ndarray:
    """Dot-product scores against every catalog item, float64."""
    x = x_hat.detach().cpu().numpy() if isinstance(x_hat, torch.Tensor) else np.asarray(x_hat)
    e = emb.detach().cpu().numpy() if isinstance(emb, torch.Tensor) else np.asarray(emb)
    return x.astype(np.float64) @ e.astype(np.float64).T


def rank_items(x_hat, emb, k: int) -> list[tuple[int, float]]:
    """Top-``k`` items by descending score; equal scores favour the lower index."""
    scores = item_scores(x_hat, emb)
    if scores.ndim != 1:
        raise ValueError("rank_items expects a single embedding")
    if not 0 <= k <= len(scores):
        raise ValueError(f"k={k} outside [0, {len(scores)}]")
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    return [(int(i), float(scores[i])) for i in order]


def softmax_scores(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)
