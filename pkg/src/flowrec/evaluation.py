"""Full-catalog leave-one-out ranking metrics."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from flowrec.config import SamplerConfig
from flowrec.dataset import SplitView
from flowrec.inference import encode_prefixes, item_scores, reverse_sample

logger = logging.getLogger(__name__)

DEFAULT_KS = (5, 10, 20)


def ranking_metrics(rank: int, ks=DEFAULT_KS) -> dict[int, tuple[float, float]]:
    """Per-cutoff ``(hit, ndcg)`` for a single relevant item at 1-based ``rank``."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    return {k: (1.0, 1.0 / math.log2(rank + 1)) if rank <= k else (0.0, 0.0) for k in ks}


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target among all items; ties go to the lower index."""
    rows = np.arange(len(targets))
    own = scores[rows, targets][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > own) | ((scores == own) & (cols < targets[:, None]))
    return 1 + ahead.sum(axis=1)


@dataclass
class MetricsReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    num_users: int
    fingerprint: str = ""
    ranks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)

    @classmethod
    def from_ranks(cls, ranks: np.ndarray, ks=DEFAULT_KS, fingerprint: str = "") -> MetricsReport:
        ranks = np.asarray(ranks, dtype=np.int64)
        n = max(len(ranks), 1)
        hr, ndcg = {}, {}
        for k in ks:
            inside = (ranks >= 1) & (ranks <= k)
            hr[k] = float(inside.sum() / n)
            gains = np.where(inside, 1.0 / np.log2(np.maximum(ranks, 1) + 1.0), 0.0)
            ndcg[k] = float(gains.sum() / n)
        return cls(hr, ndcg, len(ranks), fingerprint, ranks)

    def violations(self) -> list[str]:
        out = []
        ks = sorted(self.hr)
        for a, b in zip(ks, ks[1:]):
            if self.hr[b] < self.hr[a]:
                out.append(f"HR@{b} < HR@{a}")
            if self.ndcg[b] < self.ndcg[a]:
                out.append(f"NDCG@{b} < NDCG@{a}")
        for k in ks:
            if self.ndcg[k] > self.hr[k] + 1e-12:
                out.append(f"NDCG@{k} > HR@{k}")
        return out

    def rows(self) -> list[tuple[str, float]]:
        ks = sorted(self.hr)
        return [(f"HR@{k}", 100 * self.hr[k]) for k in ks] + [
            (f"NDCG@{k}", 100 * self.ndcg[k]) for k in ks
        ]

    def to_table(self) -> str:
        lines = ["metric\tvalue_pct"] + [f"{name}\t{value:.4f}" for name, value in self.rows()]
        return "\n".join(lines) + "\n"

    def to_kv(self, dataset: str = "") -> str:
        lines = [f"dataset={dataset}", f"users={self.num_users}", f"fingerprint={self.fingerprint}"]
        lines += [f"{name}={value:.4f}" for name, value in self.rows()]
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_kv(text: str) -> dict[str, str]:
        return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def evaluate_split(
    model,
    view: SplitView,
    sampler_cfg: SamplerConfig = SamplerConfig(),
    ks=DEFAULT_KS,
    loss_target: str = "x_prediction",
    trajectory: str = "straight",
    delta: float = 0.001,
    batch_size: int = 1024,
    fingerprint: str = "",
) -> MetricsReport:
    """Reverse-sample every user in ``view`` and rank the whole catalog."""
    rng = np.random.default_rng(sampler_cfg.seed)
    emb = model.item_embeddings()
    ranks = np.zeros(len(view), dtype=np.int64)
    for lo in range(0, len(view), batch_size):
        hi = min(lo + batch_size, len(view))
        ids = encode_prefixes(view.prefixes[lo:hi], model.cfg.max_len, model.num_items)
        x_hat = reverse_sample(model, ids, sampler_cfg, rng, loss_target, trajectory, delta)
        scores = item_scores(x_hat, emb)
        targets = view.targets[lo:hi]
        known = (targets >= 0) & (targets < scores.shape[1])
        if not known.all():
            logger.warning("%d users with unknown target index counted as misses", int((~known).sum()))
        r = np.zeros(hi - lo, dtype=np.int64)  # rank 0 marks a miss at every cutoff
        if known.any():
            r[known] = target_ranks(scores[known], targets[known])
        ranks[lo:hi] = r
    return MetricsReport.from_ranks(ranks, ks, fingerprint)


def config_fingerprint(text: str) -> str:
    return hashlib.sha1(text.encode()).hexdigest()[:12]
