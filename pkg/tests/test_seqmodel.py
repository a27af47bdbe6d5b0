import numpy as np
import pytest
import torch

from flowrec.config import ModelConfig, RunConfig, TrainConfig
from flowrec.dataset import Batch
from flowrec.seqmodel import (
    FlowRecModel,
    FusionParams,
    fuse,
    fusion_weights,
    gradients,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)

from conftest import toy_model_config


def test_fuse_examples():
    e = np.array([0.3, -1.2])
    for mode in ("sample", "deterministic"):
        np.testing.assert_array_equal(fuse(e, [5.0, 5.0], 0.7, FusionParams(0.0, mode)), e)
    out = fuse([0.0, 0.0], [1.0, 1.0], 0.5, FusionParams(1.0, "deterministic"))
    np.testing.assert_array_equal(out, [1.5, 1.5])
    out = fuse([1.0, 0.0], [0.0, 0.0], 1.0, FusionParams(0.001, "deterministic"))
    np.testing.assert_allclose(out, [1.001, 0.001], rtol=0, atol=1e-15)


def test_fusion_weights_mean_and_variance():
    lam = fusion_weights((200_000,), FusionParams(0.25, "sample"), np.random.default_rng(0))
    assert lam.mean() == pytest.approx(0.25, abs=0.01)
    assert lam.var() == pytest.approx(0.25, rel=0.02)


def test_negative_delta_rejected():
    with pytest.raises(ValueError):
        FusionParams(-0.1)


def _inputs(model, b=2, n=None, seed=0):
    g = torch.Generator().manual_seed(seed)
    n = n or model.cfg.max_len
    ids = torch.randint(0, model.num_items, (b, n), generator=g)
    z = torch.randn(b, model.cfg.dim, generator=g)
    t = torch.rand(b, generator=g)
    return ids, z, t


def test_forward_shapes_full_size():
    model = FlowRecModel(1682, ModelConfig()).eval()
    ids, z, t = _inputs(model)
    out = model(ids, z, t, FusionParams(0.001, "deterministic"))
    assert out.f_theta.shape == (2, 128)
    assert out.h_last.shape == (2, 128)
    assert out.d_hat.shape == (2, 1682)
    assert all(torch.isfinite(x).all() for x in (out.f_theta, out.h_last, out.d_hat))


def test_all_pad_row_rejected():
    model = FlowRecModel(5, toy_model_config()).eval()
    ids = torch.full((1, 3), 5)
    with pytest.raises(ValueError):
        model(ids, torch.zeros(1, 8), torch.zeros(1), FusionParams(0.0))


def test_causal_mask_hidden_states():
    torch.manual_seed(1)
    model = FlowRecModel(10, toy_model_config(max_len=6, dim=8)).double().eval()
    fusion = FusionParams(0.1, "deterministic")
    ids, z, t = _inputs(model, b=1, n=6)
    z, t = z.double(), t.double()
    captured = []
    hook = model.decoder1.register_forward_hook(lambda m, i, o: captured.append(o.detach()))
    changed = ids.clone()
    changed[0, 4] = (ids[0, 4] + 1) % 10
    model(ids, z, t, fusion)
    model(changed, z, t, fusion)
    hook.remove()
    before, after = captured
    assert (before[0, :4] - after[0, :4]).abs().max() < 1e-12
    assert (before[0, 4:] - after[0, 4:]).abs().max() > 1e-6


def test_padding_is_inert():
    model = FlowRecModel(10, toy_model_config(max_len=5)).double().eval()
    fusion = FusionParams(0.1, "deterministic")
    z, t = torch.randn(1, 8, dtype=torch.float64), torch.rand(1, dtype=torch.float64)
    short = torch.tensor([[10, 10, 3, 4, 5]])
    out1 = model(short, z, t, fusion)
    with torch.no_grad():
        model.item_emb.weight[10] = 7.0  # even a corrupted pad row changes nothing
    out2 = model(short, z, t, fusion)
    assert torch.equal(out1.f_theta, out2.f_theta)


def test_zero_delta_ignores_noise_and_time():
    model = FlowRecModel(10, toy_model_config()).eval()
    ids, z, t = _inputs(model)
    fusion = FusionParams(0.0, "sample")
    a = model(ids, z, t, fusion).f_theta
    b = model(ids, 3 * z + 1, 1 - t, fusion).f_theta
    assert torch.equal(a, b)


def test_deterministic_fusion_is_bitwise_reproducible():
    torch.manual_seed(3)
    model = FlowRecModel(10, toy_model_config()).eval()
    ids, z, t = _inputs(model)
    fusion = FusionParams(0.5, "deterministic")
    a, b = model(ids, z, t, fusion), model(ids, z, t, fusion)
    assert torch.equal(a.f_theta, b.f_theta) and torch.equal(a.d_hat, b.d_hat)


def test_permutation_changes_output():
    torch.manual_seed(4)
    model = FlowRecModel(20, toy_model_config(max_len=6)).eval()
    ids = torch.tensor([[1, 2, 3, 4, 5, 6]])
    z, t = torch.randn(1, 8), torch.rand(1)
    fusion = FusionParams(0.001, "deterministic")
    a = model(ids, z, t, fusion).f_theta
    b = model(ids.flip(1), z, t, fusion).f_theta
    assert (a - b).abs().max() > 1e-6


def _toy_batch(n_items=4):
    ids = np.array([[0, 1, 2], [n_items, 3, 1]])
    r = np.zeros((2, n_items), dtype=np.float32)
    r[0, [0, 1, 2]] = 1
    r[1, [3, 1]] = 1
    return Batch(ids, np.array([3, 0]), np.array([3, 2]), r)


def _grad_setup(seed=0):
    torch.manual_seed(seed)
    model = FlowRecModel(4, toy_model_config()).double()
    x_n = torch.randn(2, 8, dtype=torch.float64)
    t = np.array([0.3, 0.8])
    lam = fusion_weights((2, 3, 8), FusionParams(0.5), torch.Generator().manual_seed(1),
                         like=torch.zeros((), dtype=torch.float64))
    return model, x_n, t, lam


def test_zero_weight_head_gets_zero_gradient():
    model, x_n, t, lam = _grad_setup()
    grads = gradients(model, _toy_batch(), x_n, t, lam, TrainConfig(alpha=0.2, beta=0.0))
    recon = [g for name, g in grads.items() if name.startswith("recon_head")]
    assert recon and all(torch.count_nonzero(g) == 0 for g in recon)
    assert torch.count_nonzero(grads["decoder2.blocks.0.ln1.weight"]) > 0


def test_pad_row_gradient_is_zero():
    model, x_n, t, lam = _grad_setup()
    grads = gradients(model, _toy_batch(), x_n, t, lam, TrainConfig())
    assert torch.count_nonzero(grads["item_emb.weight"][4]) == 0
    assert torch.count_nonzero(grads["item_emb.weight"][:4]) > 0


def test_nonfinite_gradient_names_tensor():
    model, x_n, t, lam = _grad_setup()
    with torch.no_grad():
        model.decoder1.blocks[0].attn.qkv.weight[0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        gradients(model, _toy_batch(), x_n, t, lam, TrainConfig())


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(5)
    cfg = RunConfig(model=toy_model_config(), seed=9)
    model = FlowRecModel(4, cfg.model)
    save_checkpoint(tmp_path / "m.ckpt", model, cfg, {"epoch": 3})
    manifest, arrays = read_checkpoint(tmp_path / "m.ckpt")
    assert manifest["num_items"] == 4 and manifest["meta"] == {"epoch": 3}
    first = manifest["tensors"][0]
    assert set(first) == {"name", "dtype", "shape", "offset", "nbytes"} and first["offset"] == 0
    offsets = [e["offset"] for e in manifest["tensors"]]
    assert offsets == sorted(offsets)
    loaded, loaded_cfg, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded_cfg == cfg and meta["epoch"] == 3
    for (name, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), name


def test_checkpoint_payload_is_little_endian_float32(tmp_path):
    cfg = RunConfig(model=toy_model_config())
    model = FlowRecModel(4, cfg.model)
    save_checkpoint(tmp_path / "m.ckpt", model, cfg)
    raw = (tmp_path / "m.ckpt").read_bytes()
    manifest, _ = read_checkpoint(tmp_path / "m.ckpt")
    entry = next(e for e in manifest["tensors"] if e["name"] == "item_emb.weight")
    header_end = raw.index(b"\n", len(b"FLOWREC-CKPT 1\n")) + 1
    payload = raw[header_end + int(raw[len(b"FLOWREC-CKPT 1\n"):header_end].split()[1]):]
    vals = np.frombuffer(payload[entry["offset"]:entry["offset"] + entry["nbytes"]], dtype="<f4")
    np.testing.assert_array_equal(vals.reshape(entry["shape"]), model.item_emb.weight.detach().numpy())


def test_bad_checkpoint_rejected(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"nope\n")
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "x.ckpt")
