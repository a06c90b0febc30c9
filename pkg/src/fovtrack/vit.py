"""Numpy vision transformer for gaze regression with token pruning and early exits.

The network is a pre-norm ViT over grayscale patches.  A learnable summary
token is prepended to the patch tokens; after block ``prune_after_block``
the patch tokens that the summary token attends to least (head-averaged) are
dropped.  Every block listed in ``exit_blocks`` carries a small head mapping
the summary token to (pitch, yaw).

Forward and backward passes are written out by hand and operate on a batch
``(B, side, side)`` at once.  Pruning indices are held fixed in the backward
pass.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

__all__ = [
    "ModelConfig",
    "GazeViT",
    "TokenSet",
    "TruncatedModel",
    "patchify",
    "select_tokens",
    "prune_tokens",
    "truncate",
    "flops_estimate",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 32
    patch_side: int = 8
    depth: int = 2
    heads: int = 2
    embed_dim: int = 16
    mlp_ratio: int = 4
    prune_ratio: float = 0.0
    prune_after_block: int = 2
    exit_blocks: tuple[int, ...] = ()
    head_hidden: int = 0  # 0 -> embed_dim

    def __post_init__(self):
        if not self.exit_blocks:
            object.__setattr__(self, "exit_blocks", (self.depth,))
        object.__setattr__(self, "exit_blocks", tuple(sorted(set(int(b) for b in self.exit_blocks))))
        if self.image_side % self.patch_side:
            raise ValueError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not set(self.exit_blocks) <= set(range(1, self.depth + 1)):
            raise ValueError(f"exit_blocks {self.exit_blocks} must lie in 1..{self.depth}")
        if self.depth not in self.exit_blocks:
            raise ValueError("the final block must carry an exit head")
        if not 0.0 <= self.prune_ratio < 1.0:
            raise ValueError("prune_ratio must lie in [0, 1)")
        if self.prune_after_block < 1:
            raise ValueError("prune_after_block must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def n_patches(self) -> int:
        return self.grid**2

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.embed_dim

    @property
    def kept_patches(self) -> int:
        return kept_count(self.n_patches, 1.0 - self.prune_ratio)

    def tokens_at_block(self, block: int) -> int:
        """Token count entering ``block`` (1-based), summary token included."""
        if self.prune_ratio > 0 and block > self.prune_after_block:
            return 1 + self.kept_patches
        return 1 + self.n_patches

    def to_dict(self) -> dict:
        d = asdict(self)
        d["exit_blocks"] = list(self.exit_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "exit_blocks" in d:
            d["exit_blocks"] = tuple(d["exit_blocks"])
        return cls(**d)


# --- tokens and pruning ----------------------------------------------------


@dataclass
class TokenSet:
    vectors: np.ndarray  # (n, D); row 0 is the summary token
    indices: np.ndarray  # (n,) original token index, 0 = summary

    def __post_init__(self):
        if self.vectors.shape[0] != self.indices.shape[0] or self.vectors.shape[0] < 1:
            raise ValueError("token vectors and indices disagree or are empty")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


def kept_count(n_patches: int, keep_ratio: float) -> int:
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError("keep_ratio must lie in (0, 1]")
    # Small slack so that e.g. 0.7 * 10 does not round up to 8.
    return min(n_patches, math.ceil(keep_ratio * n_patches - 1e-9))


def select_tokens(scores, keep_ratio: float, order=None) -> np.ndarray:
    """Positions of the patch tokens to keep, ascending.

    Highest scores win; equal scores go to the lower ``order`` value (the
    original token index, defaulting to position).
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[-1]
    k = kept_count(n, keep_ratio)
    if order is None:
        order = np.broadcast_to(np.arange(n), scores.shape)
    rank = np.lexsort((order, -scores), axis=-1) if scores.ndim == 1 else _batched_rank(scores, order)
    return np.sort(rank[..., :k], axis=-1)


def _batched_rank(scores, order):
    return np.stack([np.lexsort((o, -s)) for s, o in zip(scores, order)])


def prune_tokens(tokens: TokenSet, scores, keep_ratio: float) -> TokenSet:
    """Keep the summary token plus the top-scoring patch tokens, in their original order."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (tokens.count - 1,):
        raise ValueError("need one score per patch token")
    keep = select_tokens(scores, keep_ratio, order=tokens.indices[1:]) + 1
    rows = np.concatenate([[0], keep])
    return TokenSet(tokens.vectors[rows], tokens.indices[rows])


# --- elementwise helpers ---------------------------------------------------


def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(red), dy.sum(red)


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(dy, u, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return dy * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dt)


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def _linear_back(dy, x, w, grads, wname, bname):
    grads[wname] += x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    grads[bname] += dy.reshape(-1, dy.shape[-1]).sum(0)
    return dy @ w.T


# --- model -----------------------------------------------------------------


def patchify(images, config: ModelConfig) -> np.ndarray:
    """``(B, side, side)`` images -> ``(B, n_patches, patch_side**2)`` rows, raster order."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    s, p = config.image_side, config.patch_side
    if x.shape[1:] != (s, s):
        raise ValueError(f"expected {s}x{s} input, got {x.shape[2]}x{x.shape[1]}")
    g = s // p
    return x.reshape(x.shape[0], g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(x.shape[0], g * g, p * p)


class GazeViT:
    """Early-exit gaze regressor; ``params`` maps names to float64 arrays."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else self.init_params(config, seed)
        self._check_shapes()

    # parameters

    @staticmethod
    def param_shapes(c: ModelConfig) -> dict[str, tuple[int, ...]]:
        D, P2, H, M = c.embed_dim, c.patch_side**2, c.hidden, c.mlp_ratio * c.embed_dim
        shapes = {
            "embed.w": (P2, D),
            "embed.b": (D,),
            "summary": (D,),
            "pos": (c.n_patches + 1, D),
        }
        for i in range(1, c.depth + 1):
            p = f"block{i}."
            shapes.update({
                p + "ln1.g": (D,), p + "ln1.b": (D,),
                p + "qkv.w": (D, 3 * D), p + "qkv.b": (3 * D,),
                p + "proj.w": (D, D), p + "proj.b": (D,),
                p + "ln2.g": (D,), p + "ln2.b": (D,),
                p + "fc1.w": (D, M), p + "fc1.b": (M,),
                p + "fc2.w": (M, D), p + "fc2.b": (D,),
            })
        for l in c.exit_blocks:
            p = f"exit{l}."
            shapes.update({
                p + "ln.g": (D,), p + "ln.b": (D,),
                p + "fc1.w": (D, H), p + "fc1.b": (H,),
                p + "fc2.w": (H, 2), p + "fc2.b": (2,),
            })
        return shapes

    @classmethod
    def init_params(cls, c: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in cls.param_shapes(c).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                params[name] = np.ones(shape)
            elif leaf == "b":
                params[name] = np.zeros(shape)
            elif leaf == "w":
                params[name] = rng.normal(0.0, shape[0] ** -0.5, size=shape)
            else:  # summary token and positional table
                params[name] = rng.normal(0.0, 0.02, size=shape)
        for l in c.exit_blocks:
            params[f"exit{l}.fc2.w"] *= 0.1
        return params

    def _check_shapes(self):
        want = self.param_shapes(self.config)
        if set(want) != set(self.params):
            missing = set(want) - set(self.params)
            extra = set(self.params) - set(want)
            raise ValueError(f"parameter names mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        for k, shape in want.items():
            if self.params[k].shape != shape:
                raise ValueError(f"{k}: shape {self.params[k].shape} != {shape}")
            if not np.all(np.isfinite(self.params[k])):
                raise ValueError(f"{k}: non-finite values")

    def n_params(self, depth: int | None = None) -> int:
        return sum(self.params[k].size for k in self._names_for_depth(depth))

    def _names_for_depth(self, depth: int | None) -> list[str]:
        if depth is None:
            return list(self.params)
        keep = []
        for k in self.params:
            if k.startswith("block"):
                if int(k[5:].split(".")[0]) > depth:
                    continue
            elif k.startswith("exit"):
                if int(k[4:].split(".")[0]) != depth:
                    continue
            keep.append(k)
        return keep

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # forward

    def embed(self, images) -> np.ndarray:
        p = self.params
        x = patchify(images, self.config)
        tok = x @ p["embed.w"] + p["embed.b"]
        summ = np.broadcast_to(p["summary"], (tok.shape[0], 1, tok.shape[2]))
        return np.concatenate([summ, tok], axis=1) + p["pos"], x

    def _block(self, i: int, z: np.ndarray):
        p, c = self.params, self.config
        pre = f"block{i}."
        B, n, D = z.shape
        nh, dh = c.heads, D // c.heads
        h1, ln1 = _layernorm(z, p[pre + "ln1.g"], p[pre + "ln1.b"])
        qkv = h1 @ p[pre + "qkv.w"] + p[pre + "qkv.b"]
        q, k, v = qkv.reshape(B, n, 3, nh, dh).transpose(2, 0, 3, 1, 4)
        att = _softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh))
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, D)
        z1 = z + o @ p[pre + "proj.w"] + p[pre + "proj.b"]
        h2, ln2 = _layernorm(z1, p[pre + "ln2.g"], p[pre + "ln2.b"])
        u = h2 @ p[pre + "fc1.w"] + p[pre + "fc1.b"]
        gu, t = _gelu(u)
        z2 = z1 + gu @ p[pre + "fc2.w"] + p[pre + "fc2.b"]
        cache = (h1, ln1, q, k, v, att, o, h2, ln2, u, gu, t)
        return z2, att, cache

    def _head(self, l: int, s: np.ndarray):
        p = self.params
        pre = f"exit{l}."
        hn, ln = _layernorm(s, p[pre + "ln.g"], p[pre + "ln.b"])
        u = hn @ p[pre + "fc1.w"] + p[pre + "fc1.b"]
        gu, t = _gelu(u)
        return gu @ p[pre + "fc2.w"] + p[pre + "fc2.b"], (s, hn, ln, u, gu, t)

    def forward(self, images, depth: int | None = None, return_cache: bool = False):
        """Predictions ``{exit_block: (B, 2)}`` for every exit up to ``depth``."""
        c = self.config
        depth = c.depth if depth is None else depth
        z, patches = self.embed(images)
        B = z.shape[0]
        idx = np.broadcast_to(np.arange(z.shape[1]), (B, z.shape[1]))
        preds, blocks, heads, prunes = {}, [], {}, {}
        for i in range(1, depth + 1):
            z_in = z
            z, att, bc = self._block(i, z)
            blocks.append((z_in, bc))
            if not np.all(np.isfinite(z)):
                raise FloatingPointError(f"non-finite activations in block {i}")
            if c.prune_ratio > 0 and i == c.prune_after_block and i < c.depth:
                scores = att[:, :, 0, 1:].mean(axis=1)
                keep = select_tokens(scores, 1.0 - c.prune_ratio, order=idx[:, 1:]) + 1
                rows = np.concatenate([np.zeros((B, 1), dtype=int), keep], axis=1)
                prunes[i] = (rows, z.shape[1])
                z = np.take_along_axis(z, rows[:, :, None], axis=1)
                idx = np.take_along_axis(idx, rows, axis=1)
            if i in c.exit_blocks:
                preds[i], heads[i] = self._head(i, z[:, 0])
        if return_cache:
            cache = {"patches": patches, "blocks": blocks, "heads": heads, "prunes": prunes,
                     "depth": depth, "tokens": idx}
            return preds, cache
        return preds

    def predict(self, images, depth: int | None = None) -> np.ndarray:
        depth = self.config.depth if depth is None else depth
        if depth not in self.config.exit_blocks:
            raise ValueError(f"depth {depth} has no exit head")
        return self.forward(images, depth)[depth]

    # backward

    def backward(self, cache: dict, dpreds: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        """Parameter gradients given ``d loss / d prediction`` per exit."""
        p, c = self.params, self.config
        grads = self.zero_grads()
        depth = cache["depth"]
        for l in dpreds:
            if l not in cache["heads"]:
                raise ValueError(f"no cached exit {l}")
        dz = None
        for i in range(depth, 0, -1):
            z_in, bc = cache["blocks"][i - 1]
            if dz is None:
                n_out = cache["prunes"][i][0].shape[1] if i in cache["prunes"] else z_in.shape[1]
                dz = np.zeros((z_in.shape[0], n_out, z_in.shape[2]))
            if i in dpreds:
                dz[:, 0] += self._head_back(i, dpreds[i], cache["heads"][i], grads)
            if i in cache["prunes"]:
                rows, n_full = cache["prunes"][i]
                full = np.zeros((dz.shape[0], n_full, dz.shape[2]))
                np.put_along_axis(full, rows[:, :, None], dz, axis=1)
                dz = full
            dz = self._block_back(i, dz, z_in, bc, grads)
        grads["pos"] += dz.sum(0)
        grads["summary"] += dz[:, 0].sum(0)
        _linear_back(dz[:, 1:], cache["patches"], p["embed.w"], grads, "embed.w", "embed.b")
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k}")
        return grads

    def _head_back(self, l, dy, hc, grads):
        p = self.params
        pre = f"exit{l}."
        s, hn, ln, u, gu, t = hc
        dgu = _linear_back(dy, gu, p[pre + "fc2.w"], grads, pre + "fc2.w", pre + "fc2.b")
        du = _gelu_back(dgu, u, t)
        dhn = _linear_back(du, hn, p[pre + "fc1.w"], grads, pre + "fc1.w", pre + "fc1.b")
        ds, dg, db = _layernorm_back(dhn, p[pre + "ln.g"], ln)
        grads[pre + "ln.g"] += dg
        grads[pre + "ln.b"] += db
        return ds

    def _block_back(self, i, dz2, z, bc, grads):
        p, c = self.params, self.config
        pre = f"block{i}."
        h1, ln1, q, k, v, att, o, h2, ln2, u, gu, t = bc
        B, n, D = z.shape
        nh, dh = c.heads, D // c.heads
        # MLP branch
        dgu = _linear_back(dz2, gu, p[pre + "fc2.w"], grads, pre + "fc2.w", pre + "fc2.b")
        du = _gelu_back(dgu, u, t)
        dh2 = _linear_back(du, h2, p[pre + "fc1.w"], grads, pre + "fc1.w", pre + "fc1.b")
        dx, dg, db = _layernorm_back(dh2, p[pre + "ln2.g"], ln2)
        grads[pre + "ln2.g"] += dg
        grads[pre + "ln2.b"] += db
        dz1 = dz2 + dx
        # attention branch
        do = _linear_back(dz1, o, p[pre + "proj.w"], grads, pre + "proj.w", pre + "proj.b")
        do = do.reshape(B, n, nh, dh).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) / math.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, n, 3 * D)
        dh1 = _linear_back(dqkv, h1, p[pre + "qkv.w"], grads, pre + "qkv.w", pre + "qkv.b")
        dx, dg, db = _layernorm_back(dh1, p[pre + "ln1.g"], ln1)
        grads[pre + "ln1.g"] += dg
        grads[pre + "ln1.b"] += db
        return dz1 + dx

    def copy(self) -> "GazeViT":
        return GazeViT(self.config, {k: v.copy() for k, v in self.params.items()})


class TruncatedModel:
    """Depth-``l`` view of a :class:`GazeViT`; shares its parameters."""

    def __init__(self, model: GazeViT, depth: int):
        if depth not in model.config.exit_blocks:
            raise ValueError(f"depth {depth} is not an exit block {model.config.exit_blocks}")
        self.model = model
        self.depth = depth
        self.config = model.config

    def forward(self, images) -> dict[int, np.ndarray]:
        return {self.depth: self.model.forward(images, self.depth)[self.depth]}

    def predict(self, images) -> np.ndarray:
        return self.forward(images)[self.depth]

    def n_params(self) -> int:
        return self.model.n_params(self.depth)


def truncate(model: GazeViT, depth: int) -> TruncatedModel:
    return TruncatedModel(model, depth)


# --- cost model ------------------------------------------------------------


def block_macs(n: int, dim: int, mlp_ratio: int) -> int:
    """Multiply-accumulates of one block on ``n`` tokens (norms and softmax excluded)."""
    qkv = 3 * n * dim * dim
    scores = n * n * dim
    mix = n * n * dim
    proj = n * dim * dim
    mlp = 2 * n * dim * mlp_ratio * dim
    return qkv + scores + mix + proj + mlp


def flops_estimate(config: ModelConfig, depth: int | None = None) -> int:
    """MAC count of a forward pass through ``depth`` blocks and that exit's head."""
    depth = config.depth if depth is None else depth
    if not 1 <= depth <= config.depth:
        raise ValueError(f"depth must lie in 1..{config.depth}")
    D = config.embed_dim
    total = config.n_patches * config.patch_side**2 * D
    for i in range(1, depth + 1):
        total += block_macs(config.tokens_at_block(i), D, config.mlp_ratio)
    total += D * config.hidden + config.hidden * 2
    return total


# --- checkpoints -----------------------------------------------------------

MAGIC = b"FVTCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: GazeViT, path: str | Path, extra: dict | None = None) -> None:
    """Write ``model`` to ``path``.

    Layout: 8-byte magic ``FVTCKPT1``; uint64 little-endian header length;
    UTF-8 JSON header ``{"config": ..., "extra": ..., "tensors": [{"name",
    "shape", "offset", "nbytes"}]}``; then the tensors back to back as
    little-endian float64 in C order.  Offsets count from the first data byte.
    """
    tensors, blobs, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"config": model.config.to_dict(), "extra": extra or {}, "tensors": tensors},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path, return_extra: bool = False):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    data = raw[16 + hlen :]
    params = {}
    for t in header["tensors"]:
        chunk = data[t["offset"] : t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        params[t["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    model = GazeViT(ModelConfig.from_dict(header["config"]), params)
    if return_extra:
        return model, header.get("extra", {})
    return model
