import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fovtrack.vit import (
    CheckpointError,
    GazeViT,
    ModelConfig,
    TokenSet,
    block_macs,
    flops_estimate,
    load_checkpoint,
    patchify,
    prune_tokens,
    save_checkpoint,
    select_tokens,
    truncate,
)

TOY = ModelConfig(image_side=32, patch_side=8, depth=4, heads=2, embed_dim=16, exit_blocks=(2, 3, 4))
FULL_SIZE = dict(image_side=224, patch_side=16, depth=8, heads=6, embed_dim=384, exit_blocks=tuple(range(3, 9)))


def images(n=3, side=32, seed=0):
    return np.random.default_rng(seed).normal(size=(n, side, side))


# --- independent straight-line reference --------------------------------------


def ref_layernorm(v, g, b):
    mu = sum(v) / len(v)
    var = sum((a - mu) ** 2 for a in v) / len(v)
    return np.array([(a - mu) / math.sqrt(var + 1e-6) * gi + bi for a, gi, bi in zip(v, g, b)])


def ref_gelu(u):
    return 0.5 * u * (1 + math.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u**3)))


def ref_forward(model, img):
    """Single image, token by token, head by head."""
    c, p = model.config, model.params
    P, g = c.patch_side, c.grid
    toks = [p["summary"].copy()]
    for r in range(g):
        for q in range(g):
            patch = img[r * P:(r + 1) * P, q * P:(q + 1) * P].reshape(-1)
            toks.append(patch @ p["embed.w"] + p["embed.b"])
    toks = [t + p["pos"][k] for k, t in enumerate(toks)]
    ids = list(range(len(toks)))
    dh = c.embed_dim // c.heads
    out = {}
    for i in range(1, c.depth + 1):
        pre = f"block{i}."
        normed = [ref_layernorm(t, p[pre + "ln1.g"], p[pre + "ln1.b"]) for t in toks]
        qkv = [t @ p[pre + "qkv.w"] + p[pre + "qkv.b"] for t in normed]
        D = c.embed_dim
        mixed = [np.zeros(D) for _ in toks]
        summary_row = np.zeros(len(toks))
        for h in range(c.heads):
            sl = slice(h * dh, (h + 1) * dh)
            for a in range(len(toks)):
                logits = [qkv[a][:D][sl] @ qkv[b][D:2 * D][sl] / math.sqrt(dh) for b in range(len(toks))]
                mx = max(logits)
                w = [math.exp(x - mx) for x in logits]
                s = sum(w)
                w = [x / s for x in w]
                if a == 0:
                    summary_row += np.array(w) / c.heads
                for b in range(len(toks)):
                    mixed[a][sl] += w[b] * qkv[b][2 * D:][sl]
        toks = [t + m @ p[pre + "proj.w"] + p[pre + "proj.b"] for t, m in zip(toks, mixed)]
        new = []
        for t in toks:
            hdn = ref_layernorm(t, p[pre + "ln2.g"], p[pre + "ln2.b"]) @ p[pre + "fc1.w"] + p[pre + "fc1.b"]
            hdn = np.array([ref_gelu(u) for u in hdn])
            new.append(t + hdn @ p[pre + "fc2.w"] + p[pre + "fc2.b"])
        toks = new
        if c.prune_ratio > 0 and i == c.prune_after_block and i < c.depth:
            n = len(toks) - 1
            k = math.ceil((1 - c.prune_ratio) * n - 1e-9)
            ranked = sorted(range(1, len(toks)), key=lambda j: (-summary_row[j], ids[j]))
            keep = [0] + sorted(ranked[:k])
            toks = [toks[j] for j in keep]
            ids = [ids[j] for j in keep]
        if i in c.exit_blocks:
            pre = f"exit{i}."
            hdn = ref_layernorm(toks[0], p[pre + "ln.g"], p[pre + "ln.b"]) @ p[pre + "fc1.w"] + p[pre + "fc1.b"]
            hdn = np.array([ref_gelu(u) for u in hdn])
            out[i] = hdn @ p[pre + "fc2.w"] + p[pre + "fc2.b"]
    return out


# --- config and patching ------------------------------------------------------


def test_config_defaults_final_exit():
    assert ModelConfig(depth=3).exit_blocks == (3,)


@pytest.mark.parametrize("kw", [
    dict(image_side=30, patch_side=8),
    dict(exit_blocks=(1,), depth=2),
    dict(exit_blocks=(3,), depth=2),
    dict(prune_ratio=1.0),
    dict(embed_dim=15, heads=2),
])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_token_counts():
    assert ModelConfig(**FULL_SIZE).n_patches + 1 == 197
    assert ModelConfig(image_side=32, patch_side=8).n_patches + 1 == 17


def test_patchify_wrong_size():
    with pytest.raises(ValueError):
        patchify(np.zeros((30, 30)), ModelConfig(image_side=32, patch_side=8))


def test_patchify_raster_order():
    c = ModelConfig(image_side=4, patch_side=2, embed_dim=4, heads=1, depth=1)
    img = np.arange(16.0).reshape(4, 4)
    rows = patchify(img, c)[0]
    assert rows[1].tolist() == [2, 3, 6, 7]
    assert rows[2].tolist() == [8, 9, 12, 13]


def test_embedding_has_summary_plus_patches():
    m = GazeViT(ModelConfig(), seed=0)
    z, _ = m.embed(images(2))
    assert z.shape == (2, 17, 16)


# --- pruning -------------------------------------------------------------------


def test_select_tokens_example():
    assert select_tokens([0.5, 0.1, 0.3, 0.1], 0.75).tolist() == [0, 1, 2]


def test_prune_tokens_identity_at_full_keep():
    ts = TokenSet(np.arange(20.0).reshape(5, 4), np.arange(5))
    out = prune_tokens(ts, [0.1, 0.4, 0.2, 0.3], 1.0)
    assert np.array_equal(out.vectors, ts.vectors)
    assert out.indices.tolist() == [0, 1, 2, 3, 4]


def test_prune_tokens_keeps_summary_and_order():
    ts = TokenSet(np.arange(20.0).reshape(5, 4), np.arange(5))
    out = prune_tokens(ts, [0.5, 0.1, 0.3, 0.1], 0.75)
    assert out.indices.tolist() == [0, 1, 2, 3]
    out = prune_tokens(ts, [0.0, 0.9, 0.1, 0.8], 0.5)
    assert out.indices.tolist() == [0, 2, 4]
    assert np.array_equal(out.vectors[0], ts.vectors[0])


def test_select_tokens_matches_sort_oracle():
    rng = np.random.default_rng(7)
    for _ in range(500):
        n = int(rng.integers(1, 40))
        scores = rng.integers(0, 6, n) / 5.0  # many ties
        keep = float(rng.uniform(0.05, 1.0))
        k = math.ceil(keep * n - 1e-9)
        want = sorted(sorted(range(n), key=lambda j: (-scores[j], j))[:k])
        assert select_tokens(scores, keep).tolist() == want


# --- forward -------------------------------------------------------------------


def test_prediction_per_exit():
    m = GazeViT(TOY, seed=1)
    out = m.forward(images(5))
    assert sorted(out) == [2, 3, 4]
    assert all(v.shape == (5, 2) for v in out.values())


def test_no_pruning_independent_of_prune_block():
    a = GazeViT(ModelConfig(depth=3, prune_after_block=1), seed=2)
    b = GazeViT(ModelConfig(depth=3, prune_after_block=2), params=a.params)
    x = images(4)
    assert np.array_equal(a.predict(x), b.predict(x))


@pytest.mark.parametrize("cfg", [
    ModelConfig(depth=2, embed_dim=16, heads=2),
    ModelConfig(depth=3, embed_dim=16, heads=2, prune_ratio=0.3, prune_after_block=1, exit_blocks=(1, 2, 3)),
])
def test_forward_matches_reference(cfg):
    m = GazeViT(cfg, seed=3)
    x = images(2, seed=4)
    batch = m.forward(x)
    for k in range(2):
        ref = ref_forward(m, x[k])
        assert sorted(ref) == sorted(batch)
        for l in ref:
            np.testing.assert_allclose(batch[l][k], ref[l], rtol=0, atol=1e-10)


def test_attention_rows_sum_to_one():
    m = GazeViT(TOY, seed=5)
    z, _ = m.embed(images(3))
    _, att, _ = m._block(1, z)
    np.testing.assert_allclose(att.sum(-1), 1.0, atol=1e-9)


def test_summary_survives_pruning():
    m = GazeViT(ModelConfig(depth=3, prune_ratio=0.5, prune_after_block=1), seed=6)
    _, cache = m.forward(images(4), return_cache=True)
    assert np.all(cache["tokens"][:, 0] == 0)
    assert cache["tokens"].shape[1] == 1 + 8


def test_keep_ratio_one_equals_unpruned():
    # prune_ratio=0 is the keep_ratio=1 case: forward must equal a run that never prunes
    base = GazeViT(ModelConfig(depth=3, prune_after_block=1), seed=7)
    same = GazeViT(ModelConfig(depth=3, prune_after_block=3), params=base.params)
    x = images(3)
    assert np.array_equal(base.predict(x), same.predict(x))


def test_non_finite_activation_reported():
    m = GazeViT(ModelConfig(depth=2), seed=0)
    m.params["block2.fc2.b"][0] = np.inf
    with pytest.raises(FloatingPointError, match="block 2"):
        m.forward(images(1))


# --- truncation ----------------------------------------------------------------


def test_truncate_matches_exits_exactly():
    m = GazeViT(ModelConfig(depth=8, exit_blocks=range(3, 9), prune_ratio=0.25, prune_after_block=2), seed=8)
    x = images(4)
    full = m.forward(x)
    for l in range(3, 9):
        t = truncate(m, l)
        assert np.array_equal(t.predict(x), full[l])
        if l < 8:
            assert t.n_params() < m.n_params()
    assert truncate(m, 8).n_params() < m.n_params()  # other heads excluded


def test_truncate_rejects_non_exit():
    with pytest.raises(ValueError):
        truncate(GazeViT(TOY), 1)


def test_truncate_shares_parameters():
    m = GazeViT(TOY, seed=9)
    t = truncate(m, 3)
    x = images(2)
    before = t.predict(x)
    m.params["exit3.fc2.b"] += 1.0
    np.testing.assert_allclose(t.predict(x), before + 1.0)


# --- backward ------------------------------------------------------------------


def fd_check(model, x, target, weights, step=1e-5):
    def loss():
        out = model.forward(x)
        return sum(weights[l] * ((out[l] - target) ** 2).sum() for l in weights)

    preds, cache = model.forward(x, return_cache=True)
    grads = model.backward(cache, {l: 2 * weights[l] * (preds[l] - target) for l in weights})
    worst = 0.0
    for name, v in model.params.items():
        flat = v.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            a = loss()
            flat[i] = old - step
            b = loss()
            flat[i] = old
            fd = (a - b) / (2 * step)
            g = grads[name].reshape(-1)[i]
            denom = max(abs(fd), abs(g), 1e-6)
            worst = max(worst, abs(fd - g) / denom)
    return worst, grads


def test_zero_loss_gradient_gives_zero_grads():
    m = GazeViT(TOY, seed=1)
    preds, cache = m.forward(images(2), return_cache=True)
    grads = m.backward(cache, {l: np.zeros_like(p) for l, p in preds.items()})
    assert all(not g.any() for g in grads.values())


def test_unused_exit_heads_get_zero_gradient():
    m = GazeViT(TOY, seed=1)
    preds, cache = m.forward(images(2), return_cache=True)
    grads = m.backward(cache, {4: np.ones((2, 2))})
    for name in grads:
        if name.startswith(("exit2.", "exit3.")):
            assert not grads[name].any(), name
    assert grads["exit4.fc2.w"].any()


@pytest.mark.parametrize("cfg", [
    ModelConfig(depth=2, embed_dim=8, heads=2, patch_side=16, exit_blocks=(1, 2)),
    ModelConfig(depth=2, embed_dim=8, heads=2, patch_side=8, prune_ratio=0.25, prune_after_block=1, exit_blocks=(1, 2)),
])
def test_gradients_match_finite_differences(cfg):
    m = GazeViT(cfg, seed=11)
    x = images(2, seed=12)
    target = np.random.default_rng(13).normal(size=(2, 2)) * 0.2
    worst, _ = fd_check(m, x, target, {1: 0.5, 2: 1.0})
    assert worst < 1e-4


def test_backward_deterministic():
    m = GazeViT(TOY, seed=1)
    x = images(3)
    preds, cache = m.forward(x, return_cache=True)
    d = {l: np.ones_like(p) for l, p in preds.items()}
    g1 = m.backward(cache, d)
    g2 = m.backward(m.forward(x, return_cache=True)[1], d)
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


# --- FLOPs ---------------------------------------------------------------------


def test_block_macs_hand_count():
    # one block, 5 tokens, width 4, MLP ratio 4:
    # qkv 3*5*4*4=240, QK^T 5*5*4=100, AV 100, proj 5*4*4=80, MLP 2*5*4*16=640
    assert block_macs(5, 4, 4) == 1160
    c = ModelConfig(image_side=4, patch_side=2, depth=1, heads=1, embed_dim=4)
    # embed 4 patches * 4 px * 4 = 64; head 4*4 + 4*2 = 24
    assert flops_estimate(c, 1) == 64 + 1160 + 24


def test_full_size_depth_ratio():
    c = ModelConfig(**FULL_SIZE)
    ratio = flops_estimate(c, 3) / flops_estimate(c, 8)
    assert ratio == pytest.approx(1.06 / 2.80, abs=0.03)


def test_flops_monotone_in_depth_and_prune():
    c = ModelConfig(**FULL_SIZE)
    f = [flops_estimate(c, l) for l in range(1, 9)]
    assert all(a < b for a, b in zip(f, f[1:]))
    pruned = [flops_estimate(ModelConfig(**FULL_SIZE, prune_ratio=r, prune_after_block=2), 8)
              for r in (0.0, 0.1, 0.2, 0.5)]
    assert all(a > b for a, b in zip(pruned, pruned[1:]))


# --- checkpoints ---------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    m = GazeViT(ModelConfig(depth=3, exit_blocks=(2, 3), prune_ratio=0.2), seed=4)
    path = tmp_path / "m.fvt"
    save_checkpoint(m, path, extra={"norm": {"mean": 0.5, "std": 0.2}})
    m2, extra = load_checkpoint(path, return_extra=True)
    assert m2.config == m.config
    assert extra["norm"]["std"] == 0.2
    x = images(2)
    assert np.array_equal(m.predict(x), m2.predict(x))


def test_checkpoint_layout(tmp_path):
    import json
    import struct

    m = GazeViT(ModelConfig(depth=1, embed_dim=4, heads=1, image_side=8, patch_side=4), seed=0)
    path = tmp_path / "m.fvt"
    save_checkpoint(m, path)
    raw = path.read_bytes()
    assert raw[:8] == b"FVTCKPT1"
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    t = next(t for t in header["tensors"] if t["name"] == "embed.w")
    data = raw[16 + n + t["offset"]:16 + n + t["offset"] + t["nbytes"]]
    assert np.array_equal(np.frombuffer(data, "<f8").reshape(t["shape"]), m.params["embed.w"])


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"notackpt" + bytes(16))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
