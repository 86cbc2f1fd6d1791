"""Patch-transformer segmenter with one static-memory module per block.

Images are cut into non-overlapping ``p×p`` patches, linearly embedded,
run through pre-norm transformer blocks and decoded per patch back to
``p×p×classes`` scores. With ``use_memory`` each block's output tokens are
projected to queries and the static-memory retrieval is added back:

    x ← block(x) + dam_forward(mem_i, block(x) · W_query_i)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from .. import numerics as nx
from ..dam import StaticMemory, dam_forward
from ..errors import DimensionError, ParameterError
from ..numerics import Tensor, make_rng

Params = Dict[str, Tensor]


@dataclass(frozen=True)
class SegConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    blocks: int = 4
    heads: int = 4
    classes: int = 4
    memory_slots: int = 8
    use_memory: bool = True
    mlp_ratio: int = 2

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "blocks", "heads", "classes", "memory_slots", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.image_size % self.patch_size:
            raise ParameterError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ParameterError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.classes < 2:
            raise ParameterError("need at least 2 classes")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid**2

    def to_dict(self) -> dict:
        return asdict(self)


def _dense(rng, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    return gain * rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)


def init_params(cfg: SegConfig, seed: int) -> Params:
    """Backbone and memory weights come from separate streams of ``seed``.

    The backbone is therefore identical with and without memory, which is
    what makes the on/off ablation a paired comparison.
    """
    d, p2, hidden = cfg.embed_dim, cfg.patch_size**2, cfg.embed_dim * cfg.mlp_ratio
    rng = make_rng(seed, "backbone")
    resid_gain = 1.0 / math.sqrt(2 * cfg.blocks)
    arr = {
        "embed.W": _dense(rng, p2, d),
        "embed.b": np.zeros(d),
        "pos": 0.1 * rng.standard_normal((cfg.tokens, d)),
    }
    for i in range(cfg.blocks):
        pre = f"block{i}."
        arr.update({
            pre + "ln1.g": np.ones(d), pre + "ln1.b": np.zeros(d),
            pre + "attn.Wq": _dense(rng, d, d), pre + "attn.Wk": _dense(rng, d, d),
            pre + "attn.Wv": _dense(rng, d, d), pre + "attn.Wo": _dense(rng, d, d, resid_gain),
            pre + "attn.bo": np.zeros(d),
            pre + "ln2.g": np.ones(d), pre + "ln2.b": np.zeros(d),
            pre + "mlp.W1": _dense(rng, d, hidden), pre + "mlp.b1": np.zeros(hidden),
            pre + "mlp.W2": _dense(rng, hidden, d, resid_gain), pre + "mlp.b2": np.zeros(d),
        })
    arr.update({
        "head.ln.g": np.ones(d), "head.ln.b": np.zeros(d),
        "head.W": _dense(rng, d, p2 * cfg.classes), "head.b": np.zeros(p2 * cfg.classes),
    })
    if cfg.use_memory:
        for i in range(cfg.blocks):
            mrng = make_rng(seed, "memory", i)
            arr[f"mem{i}.xi"] = mrng.standard_normal((cfg.memory_slots, d)) / math.sqrt(d)
            arr[f"mem{i}.W_k"] = np.eye(d) + 0.01 * mrng.standard_normal((d, d)) / math.sqrt(d)
            arr[f"mem{i}.W_query"] = _dense(mrng, d, d)
    return {k: Tensor(v, requires_grad=True) for k, v in arr.items()}


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(B, H, W) -> (B·T, p²) in row-major patch order."""
    B, H, W = images.shape
    g_h, g_w = H // p, W // p
    x = images.reshape(B, g_h, p, g_w, p).transpose(0, 1, 3, 2, 4)
    return x.reshape(B * g_h * g_w, p * p)


def memory_of(params: Params, i: int) -> StaticMemory:
    return StaticMemory(params[f"mem{i}.xi"], params[f"mem{i}.W_k"])


def _attention(cfg: SegConfig, params: Params, pre: str, h: Tensor, B: int) -> Tensor:
    T, d, H = cfg.tokens, cfg.embed_dim, cfg.heads
    dh = d // H

    def heads(w: str) -> Tensor:
        t = nx.reshape(nx.matmul(h, params[pre + w]), (B, T, H, dh))
        return nx.reshape(nx.transpose(t, (0, 2, 1, 3)), (B * H, T, dh))

    q, k, v = heads("attn.Wq"), heads("attn.Wk"), heads("attn.Wv")
    att = nx.softmax_rows(nx.scale(nx.bmm(q, nx.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh)))
    out = nx.reshape(nx.bmm(att, v), (B, H, T, dh))
    out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (B * T, d))
    return nx.add_bias(nx.matmul(out, params[pre + "attn.Wo"]), params[pre + "attn.bo"])


def forward_seg(cfg: SegConfig, params: Params, images, trace: Optional[dict] = None) -> Tensor:
    """Per-pixel class scores, shape (B, H, W, classes) or (H, W, classes).

    If ``trace`` is a dict it receives the keys and values each memory
    module used, under ``"mem{i}.K"`` / ``"mem{i}.V"``.
    """
    imgs = np.asarray(images, dtype=np.float64)
    single = imgs.ndim == 2
    if single:
        imgs = imgs[None]
    if imgs.ndim != 3 or imgs.shape[1:] != (cfg.image_size, cfg.image_size):
        raise DimensionError(f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}), got {imgs.shape}")
    B, T, d, p = imgs.shape[0], cfg.tokens, cfg.embed_dim, cfg.patch_size

    x = nx.add_bias(nx.matmul(Tensor(patchify(imgs, p)), params["embed.W"]), params["embed.b"])
    x = nx.add_bias(nx.reshape(x, (B, T, d)), params["pos"])
    x = nx.reshape(x, (B * T, d))
    for i in range(cfg.blocks):
        pre = f"block{i}."
        h = nx.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        x = nx.add(x, _attention(cfg, params, pre, h, B))
        h = nx.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        h = nx.gelu(nx.add_bias(nx.matmul(h, params[pre + "mlp.W1"]), params[pre + "mlp.b1"]))
        x = nx.add(x, nx.add_bias(nx.matmul(h, params[pre + "mlp.W2"]), params[pre + "mlp.b2"]))
        if cfg.use_memory:
            mem = memory_of(params, i)
            if trace is not None:
                trace[f"mem{i}.K"] = mem.keys().data.copy()
                trace[f"mem{i}.V"] = mem.values().data.copy()
            q = nx.matmul(x, params[f"mem{i}.W_query"])
            x = nx.add(x, dam_forward(mem, q))

    h = nx.layer_norm(x, params["head.ln.g"], params["head.ln.b"])
    s = nx.add_bias(nx.matmul(h, params["head.W"]), params["head.b"])
    g, C = cfg.grid, cfg.classes
    s = nx.transpose(nx.reshape(s, (B, g, g, p, p, C)), (0, 1, 3, 2, 4, 5))
    s = nx.reshape(s, (B, cfg.image_size, cfg.image_size, C))
    if single:
        s = nx.reshape(s, (cfg.image_size, cfg.image_size, C))
    return s


def seg_loss(scores: Tensor, masks: np.ndarray, smooth: float = 1.0) -> Tensor:
    """Mean per-pixel cross-entropy plus ``1 - mean soft Dice`` over all classes."""
    C = scores.shape[-1]
    masks = np.asarray(masks)
    if scores.shape[:-1] != masks.shape:
        raise DimensionError(f"scores {scores.shape} do not match masks {masks.shape}")
    if masks.min() < 0 or masks.max() >= C:
        raise ParameterError(f"mask labels must lie in [0, {C})")
    P = masks.size
    logits = nx.reshape(scores, (P, C))
    onehot = np.zeros((P, C))
    onehot[np.arange(P), masks.ravel()] = 1.0
    y = Tensor(onehot)
    logp = nx.log_softmax_rows(logits)
    ce = nx.scale(nx.sum(nx.mul(y, logp)), -1.0 / P)
    probs = nx.exp(logp)
    inter = nx.sum(nx.mul(probs, y), axis=0)
    denom = nx.add(nx.sum(probs, axis=0), Tensor(onehot.sum(axis=0) + smooth))
    dice = nx.div(nx.add(nx.scale(inter, 2.0), Tensor(np.full(C, smooth))), denom)
    return nx.add(ce, nx.scale(nx.sum(dice), -1.0 / C) + 1.0)


def predict(cfg: SegConfig, params: Params, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Arg-max labels, evaluated in batches without building a graph."""
    imgs = np.asarray(images, dtype=np.float64)
    frozen = {k: Tensor(v.data) for k, v in params.items()}
    out = []
    for start in range(0, imgs.shape[0], batch_size):
        out.append(np.argmax(forward_seg(cfg, frozen, imgs[start:start + batch_size]).data, axis=-1))
    return np.concatenate(out)
