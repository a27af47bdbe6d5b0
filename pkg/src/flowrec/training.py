"""Loss composition, the training loop, and a finite-difference gradient check."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from flowrec.config import RunConfig, TrainConfig, substream_seed
from flowrec.dataset import Batch, Split, build_batch
from flowrec.flowcore import TimestepSampler, interpolate, sample_timesteps
from flowrec.seqmodel import FlowRecModel, ForwardOutput, FusionParams, gradients, save_checkpoint

logger = logging.getLogger(__name__)

LOG_HEADER = "epoch\tl_fm\tl_ce\tl_mse\tl_total\tval_hr10"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossBreakdown:
    """Batch-mean loss terms; tensors while training, floats once logged."""

    l_fm: torch.Tensor | float
    l_ce: torch.Tensor | float
    l_mse: torch.Tensor | float
    l_total: torch.Tensor | float

    def detach(self) -> LossBreakdown:
        vals = (self.l_fm, self.l_ce, self.l_mse, self.l_total)
        return LossBreakdown(*(v.item() if isinstance(v, torch.Tensor) else float(v) for v in vals))


def compute_losses(
    out: ForwardOutput,
    x_c: torch.Tensor,
    x_n: torch.Tensor,
    targets: torch.Tensor,
    r: torch.Tensor,
    emb: torch.Tensor,
    cfg: TrainConfig,
) -> LossBreakdown:
    """Flow-matching, cross-entropy and reconstruction losses.

    With ``x_prediction`` the network output is regressed onto the clean
    embedding. With ``v_prediction`` the same output is regressed onto the
    straight-path velocity ``x_n - x_c``. The flow term sums (or, with
    ``fm_reduction = mean``, averages) over the embedding dimension; every
    term averages over the batch.
    """
    f = out.f_theta
    target = x_c if cfg.loss_target == "x_prediction" else x_n - x_c
    sq = (f - target).pow(2)
    l_fm = (sq.sum(dim=-1) if cfg.fm_reduction == "sum" else sq.mean(dim=-1)).mean()
    l_ce = F.cross_entropy(f @ emb.T, targets)
    l_mse = (out.d_hat - r).pow(2).mean()
    total = l_fm + cfg.alpha * l_ce + cfg.beta * l_mse
    for name, value in (("l_fm", l_fm), ("l_ce", l_ce), ("l_mse", l_mse), ("l_total", total)):
        if not bool(torch.isfinite(value)):
            raise FloatingPointError(f"non-finite loss component {name}")
    return LossBreakdown(l_fm, l_ce, l_mse, total)


def batch_losses(
    model: FlowRecModel,
    batch: Batch,
    x_n: torch.Tensor,
    t: np.ndarray,
    lam: torch.Tensor | None,
    cfg: TrainConfig,
    trajectory: str = "straight",
    fusion: FusionParams | None = None,
    generator: torch.Generator | None = None,
) -> LossBreakdown:
    """Noise the target embeddings, run the model and score the batch."""
    dtype = model.item_emb.weight.dtype
    item_ids = torch.from_numpy(batch.item_ids)
    targets = torch.from_numpy(batch.target_ids)
    emb = model.item_embeddings()
    x_c = emb[targets]
    z = interpolate(x_c, x_n, t, trajectory)
    fusion = fusion if fusion is not None else FusionParams(0.0, "deterministic")
    out = model(item_ids, z, torch.as_tensor(t, dtype=dtype), fusion, generator, lam)
    r = torch.from_numpy(batch.interaction_vectors).to(dtype)
    return compute_losses(out, x_c, x_n, targets, r, emb, cfg)


def build_model(num_items: int, cfg: RunConfig) -> FlowRecModel:
    model = FlowRecModel(num_items, cfg.model)
    gen = torch.Generator().manual_seed(substream_seed(cfg.seed, "init"))
    model.reset_parameters(gen)
    return model


@dataclass
class EpochLog:
    epoch: int
    losses: LossBreakdown
    val_hr10: float | None
    seconds: float

    def line(self) -> str:
        lb = self.losses
        val = "nan" if self.val_hr10 is None else f"{self.val_hr10:.6f}"
        return f"{self.epoch}\t{lb.l_fm:.6f}\t{lb.l_ce:.6f}\t{lb.l_mse:.6f}\t{lb.l_total:.6f}\t{val}"


@dataclass
class FitResult:
    model: FlowRecModel
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_hr10: float | None = None


def fit(
    model: FlowRecModel,
    split: Split,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> FitResult:
    """Train with noised targets and return the best-validation parameters.

    Each batch draws one noise level per row from the configured timestep
    sampler and one Gaussian endpoint per row, noises the target embedding
    along the configured path, fuses it into the history, and takes one Adam
    step on the combined loss. Validation HR@10 is measured every
    ``eval_every`` epochs and drives checkpoint selection and early stopping.
    """
    from flowrec.evaluation import evaluate_split

    tc = cfg.train
    train = split.train
    if len(train) == 0:
        raise ValueError("training view is empty")
    out_dir = Path(out_dir) if out_dir is not None else None

    torch.manual_seed(substream_seed(cfg.seed, "dropout"))
    shuffle_rng = np.random.default_rng(substream_seed(cfg.seed, "shuffle"))
    time_rng = np.random.default_rng(substream_seed(cfg.seed, "timestep"))
    noise_gen = torch.Generator().manual_seed(substream_seed(cfg.seed, "noise"))
    fusion_gen = torch.Generator().manual_seed(substream_seed(cfg.seed, "fusion"))
    sampler = TimestepSampler(cfg.flow.timestep, cfg.flow.s, cfg.flow.logit_loc, cfg.flow.logit_scale)
    fusion = FusionParams(cfg.flow.delta, "sample")
    dtype = model.item_emb.weight.dtype
    dim = model.cfg.dim

    opt = torch.optim.Adam(model.parameters(), lr=tc.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    result = FitResult(model)
    best_state = copy.deepcopy(model.state_dict())
    last_good = best_state
    stale = 0
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.tsv", "w")
        log_fh.write(LOG_HEADER + "\n")

    try:
        for epoch in range(1, tc.epochs + 1):
            start = time.perf_counter()
            model.train()
            order = shuffle_rng.permutation(len(train))
            sums = np.zeros(4)
            for lo in range(0, len(order), tc.batch_size):
                idx = order[lo : lo + tc.batch_size]
                batch = build_batch(train, idx, model.cfg.max_len)
                t = sample_timesteps(sampler, time_rng, len(idx))
                x_n = torch.randn(len(idx), dim, generator=noise_gen, dtype=dtype)
                try:
                    losses = batch_losses(model, batch, x_n, t, None, tc, cfg.flow.trajectory,
                                          fusion, fusion_gen)
                except FloatingPointError as exc:
                    model.load_state_dict(last_good)
                    raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
                opt.zero_grad(set_to_none=True)
                losses.l_total.backward()
                opt.step()
                lb = losses.detach()
                sums += len(idx) * np.array([lb.l_fm, lb.l_ce, lb.l_mse, lb.l_total])
            mean = LossBreakdown(*(sums / len(order)))

            val_hr10 = None
            if len(split.valid) and (epoch % tc.eval_every == 0 or epoch == tc.epochs):
                report = evaluate_split(model, split.valid, cfg.sampler, ks=(10,),
                                        loss_target=tc.loss_target,
                                        trajectory=cfg.flow.trajectory, delta=cfg.flow.delta)
                val_hr10 = report.hr[10]
            log = EpochLog(epoch, mean, val_hr10, time.perf_counter() - start)
            result.history.append(log)
            last_good = copy.deepcopy(model.state_dict())
            if log_fh is not None:
                log_fh.write(log.line() + "\n")
                log_fh.flush()
                save_checkpoint(out_dir / "last.ckpt", model, cfg, {"epoch": epoch})
            if on_epoch is not None:
                on_epoch(log)
            logger.info("%s  (%.1fs)", log.line(), log.seconds)

            if val_hr10 is not None:
                if result.best_val_hr10 is None or val_hr10 > result.best_val_hr10:
                    result.best_val_hr10, result.best_epoch = val_hr10, epoch
                    best_state = copy.deepcopy(model.state_dict())
                    stale = 0
                    if out_dir is not None:
                        save_checkpoint(out_dir / "best.ckpt", model, cfg,
                                        {"epoch": epoch, "val_hr10": val_hr10})
                else:
                    stale += tc.eval_every
                    if stale >= tc.patience:
                        logger.info("early stop at epoch %d (best %s)", epoch, result.best_epoch)
                        break
    finally:
        if log_fh is not None:
            log_fh.close()

    if result.best_epoch is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


def gradient_check(
    model: FlowRecModel,
    batch: Batch,
    cfg: TrainConfig,
    x_n: torch.Tensor,
    t: np.ndarray,
    lam: torch.Tensor,
    trajectory: str = "straight",
    eps: float = 1e-4,
    per_tensor: dict[str, float] | None = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Meant for toy models in float64: every scalar parameter is perturbed.
    The relative error of one entry is ``|a - n| / max(|a|, |n|, 1e-6)``; the
    floor sits well above the ~1e-12 roundoff of a central difference, so
    entries whose true gradient is exactly zero do not read as failures.
    """
    model.eval()
    analytic = gradients(model, batch, x_n, t, lam, cfg, trajectory)

    def loss() -> float:
        with torch.no_grad():
            return float(batch_losses(model, batch, x_n, t, lam, cfg, trajectory).l_total)

    worst = 0.0
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        grad = analytic[name].view(-1)
        tensor_worst = 0.0
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            down = loss()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(grad[i])
            denom = max(abs(a), abs(numeric), 1e-6)
            err = abs(a - numeric) / denom if a != numeric else 0.0
            tensor_worst = max(tensor_worst, err)
        if per_tensor is not None:
            per_tensor[name] = tensor_worst
        worst = max(worst, tensor_worst)
    return worst


def train_log_lines(history: list[EpochLog]) -> list[str]:
    return [LOG_HEADER] + [h.line() for h in history]
