"""The learned vector field: fused history encoder, two causal decoders, recon head."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from flowrec.config import FUSION_MODES, ModelConfig, RunConfig

CHECKPOINT_MAGIC = b"FLOWREC-CKPT 1\n"


@dataclass(frozen=True)
class FusionParams:
    delta: float
    mode: str = "sample"

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError(f"fusion delta must be >= 0, got {self.delta}")
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")


def fusion_weights(shape, fusion: FusionParams, rng=None, like=None):
    """Elementwise weights drawn from Normal(mean=delta, variance=delta).

    ``rng`` is a numpy Generator for array inputs or a torch Generator when
    ``like`` is a tensor.
    """
    if fusion.mode == "deterministic" or fusion.delta == 0:
        if like is not None:
            return torch.full(shape, fusion.delta, dtype=like.dtype, device=like.device)
        return np.full(shape, fusion.delta)
    std = math.sqrt(fusion.delta)
    if like is not None:
        eps = torch.randn(shape, generator=rng, dtype=like.dtype, device=like.device)
        return fusion.delta + std * eps
    rng = rng if rng is not None else np.random.default_rng()
    return rng.normal(fusion.delta, std, shape)


def fuse(e, z, t, fusion: FusionParams, rng=None, lam=None):
    """``e + lam * (z + t)``, with ``t`` added to every coordinate of ``z``."""
    if lam is None:
        if isinstance(e, torch.Tensor):
            lam = fusion_weights(tuple(e.shape), fusion, rng, like=e)
        else:
            e = np.asarray(e, dtype=np.float64)
            lam = fusion_weights(e.shape, fusion, rng)
    if not isinstance(e, torch.Tensor):
        e, z = np.asarray(e, dtype=np.float64), np.asarray(z, dtype=np.float64)
    return e + lam * (z + t)


@dataclass
class ForwardOutput:
    f_theta: torch.Tensor  # [B, d] predicted clean target embedding
    h_last: torch.Tensor  # [B, d] first decoder state at the newest item
    d_hat: torch.Tensor  # [B, num_items] reconstruction of the interaction vector


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.dropout = dropout

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(
            q, k, v, attn_mask=allowed, dropout_p=self.dropout if self.training else 0.0
        )
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class DecoderBlock(nn.Module):
    """Pre-norm transformer block with unidirectional attention."""

    def __init__(self, dim: int, heads: int, ff_mult: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, heads, dropout)
        self.ln2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_mult * dim),
            nn.GELU(),
            nn.Linear(ff_mult * dim, dim),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x, allowed):
        x = x + self.drop(self.attn(self.ln1(x), allowed))
        return x + self.drop(self.ff(self.ln2(x)))


class Decoder(nn.Module):
    def __init__(self, layers: int, dim: int, heads: int, ff_mult: int, dropout: float, out_norm: bool):
        super().__init__()
        self.blocks = nn.ModuleList(DecoderBlock(dim, heads, ff_mult, dropout) for _ in range(layers))
        self.ln_out = nn.LayerNorm(dim) if out_norm else nn.Identity()

    def forward(self, x, allowed):
        for block in self.blocks:
            x = block(x, allowed)
        return self.ln_out(x)


class FlowRecModel(nn.Module):
    """Predicts the clean next-item embedding from a history fused with ``(z_t, t)``."""

    def __init__(self, num_items: int, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.num_items = num_items
        self.cfg = cfg
        d = cfg.dim
        self.pad = num_items
        self.item_emb = nn.Embedding(num_items + 1, d, padding_idx=num_items)
        self.pos_emb = nn.Embedding(cfg.max_len, d)
        self.emb_drop = nn.Dropout(cfg.dropout)
        self.decoder1 = Decoder(cfg.decoder1_layers, d, cfg.heads, cfg.ff_mult, cfg.dropout, cfg.output_norm)
        self.decoder2 = Decoder(cfg.decoder2_layers, d, cfg.heads, cfg.ff_mult, cfg.dropout, cfg.output_norm)
        sizes = (d, *cfg.recon_hidden, num_items)
        layers: list[nn.Module] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            layers.append(nn.Linear(n_in, n_out))
            if i < len(sizes) - 2:
                layers.append(nn.Tanh())
        self.recon_head = nn.Sequential(*layers)
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        std = self.cfg.init_std
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Linear, nn.Embedding)):
                    module.weight.normal_(0.0, std, generator=generator)
                    if getattr(module, "bias", None) is not None:
                        module.bias.zero_()
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.zero_()
            self.item_emb.weight[self.pad].zero_()

    def item_embeddings(self) -> torch.Tensor:
        """Catalog embeddings without the padding row, ``[num_items, d]``."""
        return self.item_emb.weight[: self.num_items]

    def forward(
        self,
        item_ids: torch.Tensor,
        z: torch.Tensor,
        t: torch.Tensor,
        fusion: FusionParams,
        generator: torch.Generator | None = None,
        lam: torch.Tensor | None = None,
    ) -> ForwardOutput:
        b, n = item_ids.shape
        if n > self.cfg.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        valid = item_ids != self.pad
        if not bool(valid.any(dim=1).all()):
            raise ValueError("batch contains a row with no items")
        positions = torch.arange(self.cfg.max_len - n, self.cfg.max_len, device=item_ids.device)
        e = self.item_emb(item_ids) + self.pos_emb(positions)
        x = fuse(e, z[:, None, :], t.to(e.dtype)[:, None, None], fusion, generator, lam)
        x = self.emb_drop(x * valid[..., None].to(x.dtype))

        causal = torch.ones(n, n, dtype=torch.bool, device=item_ids.device).tril()
        eye = torch.eye(n, dtype=torch.bool, device=item_ids.device)
        # a padding query sees only itself, which keeps its softmax finite
        allowed = (causal & (valid[:, None, :] | eye))[:, None]

        last = (valid * torch.arange(n, device=item_ids.device)).argmax(dim=1)
        rows = torch.arange(b, device=item_ids.device)
        h = self.decoder1(x, allowed)
        h_last = h[rows, last]
        g = self.decoder2(h, allowed)
        return ForwardOutput(f_theta=g[rows, last], h_last=h_last, d_hat=self.recon_head(h_last))


def gradients(model: FlowRecModel, batch, x_n, t, lam, train_cfg, trajectory: str = "straight"):
    """Gradients of the total training loss for every trainable tensor.

    ``x_n``, ``t`` and ``lam`` are fixed inputs; no gradient flows through
    their sampling. Raises ``FloatingPointError`` naming the first tensor with
    a non-finite gradient.
    """
    from flowrec.training import batch_losses

    model.zero_grad(set_to_none=True)
    losses = batch_losses(model, batch, x_n, t, lam, train_cfg, trajectory)
    losses.l_total.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not bool(torch.isfinite(g).all()):
            raise FloatingPointError(f"non-finite gradient in {name}")
        grads[name] = g.detach().clone()
    return grads


def save_checkpoint(path: str | Path, model: FlowRecModel, config: RunConfig, meta: dict | None = None) -> None:
    """Write a text manifest followed by little-endian float32 tensor buffers."""
    tensors, offset, blobs = [], 0, []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        blob = np.ascontiguousarray(arr).tobytes()
        tensors.append({
            "name": name,
            "dtype": "float32",
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "num_items": model.num_items,
        "config": config.to_flat(),
        "config_ini": config.to_ini(),
        "meta": meta or {},
        "tensors": tensors,
    }
    text = json.dumps(manifest, indent=1).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(f"manifest {len(text)}\n".encode())
        fh.write(text)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a flowrec checkpoint")
        header = fh.readline().decode().split()
        if len(header) != 2 or header[0] != "manifest":
            raise ValueError(f"{path}: malformed manifest header")
        manifest = json.loads(fh.read(int(header[1])).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in manifest["tensors"]:
        start = entry["offset"]
        buf = payload[start : start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).copy()
    return manifest, arrays


def load_checkpoint(path: str | Path) -> tuple[FlowRecModel, RunConfig, dict]:
    manifest, arrays = read_checkpoint(path)
    config = RunConfig.from_ini(manifest["config_ini"])
    model = FlowRecModel(manifest["num_items"], config.model)
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    model.load_state_dict(state)
    model.eval()
    return model, config, manifest["meta"]
