"""Small pre-norm transformer encoder with hand-written reverse mode.

Everything runs in float64 on padded ``(batch, time)`` id matrices.  Padded
key positions are masked out of attention, so the states of real tokens never
depend on padding.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import erf

log = logging.getLogger(__name__)

LN_EPS = 1e-5
MASK_FILL = -1e9
GELU_FORM = "erf"  # exact 0.5*x*(1+erf(x/sqrt(2))); no tanh approximation

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 32
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 64
    max_positions: int = 64
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass
class HiddenStack:
    """Embedding output followed by every layer's output, each (T, d)."""

    states: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.states[k]


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm_backward(dy: np.ndarray, cache, gain: np.ndarray):
    """Returns (dx, dgain, dbias) with parameter grads summed over leading axes."""
    xhat, inv = cache
    lead = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=lead)
    dbias = dy.sum(axis=lead)
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def layer_prefix(layer: int) -> str:
    return f"layers.{layer}."


def init_params(config: EncoderConfig) -> Params:
    """Seeded init: variance-1/fan_in uniform weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(config.seed)
    d, f = config.hidden_dim, config.ffn_dim
    p: Params = {
        "tok_emb": rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=(config.vocab_size, d)),
        "pos_emb": rng.uniform(-0.5, 0.5, size=(config.max_positions, d)),
    }
    for layer in range(config.num_layers):
        pre = layer_prefix(layer)
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = _uniform(rng, (d, d), d)
            p[pre + "b" + name[1]] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "w1"] = _uniform(rng, (d, f), d)
        p[pre + "b1"] = np.zeros(f)
        p[pre + "w2"] = _uniform(rng, (f, d), f)
        p[pre + "b2"] = np.zeros(d)
    return p


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(ids, mask) matrices of shape (B, max_len)."""
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for b, s in enumerate(sequences):
        ids[b, :len(s)] = s
        mask[b, :len(s)] = True
    return ids, mask


class Encoder:
    def __init__(self, config: EncoderConfig, params: Params | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    def copy(self) -> "Encoder":
        return Encoder(self.config, {k: v.copy() for k, v in self.params.items()})

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.shape[1] > self.config.max_positions:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_positions {self.config.max_positions}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError("token id out of range")

    def forward_batch(self, ids: np.ndarray, mask: np.ndarray | None = None, keep_cache: bool = True):
        """Returns (states, cache); states has shape (L+1, B, T, d)."""
        ids = np.asarray(ids)
        if mask is None:
            mask = np.ones(ids.shape, dtype=bool)
        self._check_ids(ids)
        cfg, p = self.config, self.params
        B, T = ids.shape
        H, dh = cfg.num_heads, cfg.head_dim
        scale = 1.0 / np.sqrt(dh)
        key_bias = np.where(mask, 0.0, MASK_FILL)[:, None, None, :]

        x = p["tok_emb"][ids] + p["pos_emb"][:T]
        states = np.empty((cfg.num_layers + 1, B, T, cfg.hidden_dim))
        states[0] = x
        layers = []
        for layer in range(cfg.num_layers):
            pre = layer_prefix(layer)
            a, ln1 = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = (a @ p[pre + "wq"] + p[pre + "bq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = (a @ p[pre + "wk"] + p[pre + "bk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            v = (a @ p[pre + "wv"] + p[pre + "bv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            s = q @ k.transpose(0, 1, 3, 2) * scale + key_bias
            s -= s.max(axis=-1, keepdims=True)
            e = np.exp(s)
            attn = e / e.sum(axis=-1, keepdims=True)
            ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.hidden_dim)
            x1 = x + ctx @ p[pre + "wo"] + p[pre + "bo"]
            f, ln2 = layer_norm(x1, p[pre + "ln2.g"], p[pre + "ln2.b"])
            u = f @ p[pre + "w1"] + p[pre + "b1"]
            hid = gelu(u)
            x = x1 + hid @ p[pre + "w2"] + p[pre + "b2"]
            states[layer + 1] = x
            if keep_cache:
                layers.append((a, ln1, q, k, v, attn, ctx, f, ln2, u, hid))
        cache = (ids, mask, layers) if keep_cache else None
        return states, cache

    def backward_batch(self, cache, upstream: Mapping[int, np.ndarray]) -> Params:
        """Exact gradients of sum(upstream[k] * states[k]) for every parameter.

        ``upstream`` maps stack index (0..L) to an array shaped (B, T, d).
        """
        ids, mask, layers = cache
        cfg, p = self.config, self.params
        B, T = ids.shape
        H, dh, d = cfg.num_heads, cfg.head_dim, cfg.hidden_dim
        scale = 1.0 / np.sqrt(dh)
        for k, g in upstream.items():
            if not 0 <= k <= cfg.num_layers:
                raise ValueError(f"no hidden state {k}")
            if g.shape != (B, T, d):
                raise ValueError(f"upstream gradient for state {k} has shape {g.shape}, expected {(B, T, d)}")

        grads: Params = {}
        dx = np.zeros((B, T, d))
        if cfg.num_layers in upstream:
            dx += upstream[cfg.num_layers]
        for layer in reversed(range(cfg.num_layers)):
            pre = layer_prefix(layer)
            a, ln1, q, k, v, attn, ctx, f, ln2, u, hid = layers[layer]
            # feed-forward block
            grads[pre + "w2"] = hid.reshape(-1, cfg.ffn_dim).T @ dx.reshape(-1, d)
            grads[pre + "b2"] = dx.sum(axis=(0, 1))
            du = (dx @ p[pre + "w2"].T) * gelu_grad(u)
            grads[pre + "w1"] = f.reshape(-1, d).T @ du.reshape(-1, cfg.ffn_dim)
            grads[pre + "b1"] = du.sum(axis=(0, 1))
            dln, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = layer_norm_backward(
                du @ p[pre + "w1"].T, ln2, p[pre + "ln2.g"]
            )
            dx = dx + dln
            # attention block
            grads[pre + "wo"] = ctx.reshape(-1, d).T @ dx.reshape(-1, d)
            grads[pre + "bo"] = dx.sum(axis=(0, 1))
            dctx = (dx @ p[pre + "wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            dattn = dctx @ v.transpose(0, 1, 3, 2)
            dv = attn.transpose(0, 1, 3, 2) @ dctx
            ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            dq = (ds @ k) * scale
            dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
            a2 = a.reshape(-1, d)
            da = np.zeros((B, T, d))
            for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
                flat = dproj.transpose(0, 2, 1, 3).reshape(B, T, d)
                grads[pre + "w" + name] = a2.T @ flat.reshape(-1, d)
                grads[pre + "b" + name] = flat.sum(axis=(0, 1))
                da += flat @ p[pre + "w" + name].T
            dln, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = layer_norm_backward(da, ln1, p[pre + "ln1.g"])
            dx = dx + dln
            if layer in upstream:
                dx = dx + upstream[layer]
        dx = dx * mask[..., None]
        tok = np.zeros_like(p["tok_emb"])
        np.add.at(tok, ids.ravel(), dx.reshape(-1, d))
        grads["tok_emb"] = tok
        pos = np.zeros_like(p["pos_emb"])
        pos[:T] = dx.sum(axis=0)
        grads["pos_emb"] = pos
        return grads

    def forward(self, token_ids: Sequence[int]) -> HiddenStack:
        states, _ = self.forward_batch(np.asarray([token_ids]), keep_cache=False)
        return HiddenStack([s[0] for s in states])

    def backward(self, token_ids: Sequence[int], upstream: Mapping[int, np.ndarray]) -> Params:
        """Single-sequence convenience wrapper; upstream arrays are (T, d)."""
        _, cache = self.forward_batch(np.asarray([token_ids]))
        return self.backward_batch(cache, {k: np.asarray(g)[None] for k, g in upstream.items()})


def mean_pool(stack: HiddenStack, layer: int) -> np.ndarray:
    """Average over every position, special tokens included."""
    return stack[layer].mean(axis=0)


def clamp_trainable_layers(config: EncoderConfig, k: int) -> int:
    """Blocks are numbered embeddings=0, layer l=l+1; at most L+1 can train."""
    limit = config.num_layers + 1
    if k > limit:
        log.warning("trainable_layers=%d exceeds the %d blocks of this encoder; clamping", k, limit)
        return limit
    return max(k, 0)


def trainable_names(config: EncoderConfig, k: int) -> set[str]:
    """Parameter names in the top ``k`` blocks (the embedding block is the lowest)."""
    k = clamp_trainable_layers(config, k)
    first_layer = config.num_layers - k
    names = set()
    for name in init_param_names(config):
        if name.startswith("layers."):
            if int(name.split(".")[1]) >= first_layer:
                names.add(name)
        elif k > config.num_layers:
            names.add(name)
    return names


def init_param_names(config: EncoderConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for layer in range(config.num_layers):
        pre = layer_prefix(layer)
        names += [pre + n for n in (
            "ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
            "ln2.g", "ln2.b", "w1", "b1", "w2", "b2",
        )]
    return names


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = "ENCCKPT"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, config: EncoderConfig, params: Params,
                    sections: Mapping[str, Params] | None = None) -> None:
    """Text header (config + manifests) followed by little-endian float32 data.

    Extra named sections (e.g. projection heads) get their own manifest.
    """
    all_sections = {"params": params}
    if sections:
        all_sections.update(sections)
    header = [f"{CKPT_MAGIC} {CKPT_VERSION}", "[config]"]
    header += [f"{k}={v}" for k, v in asdict(config).items()]
    blobs = []
    offset = 0
    for sec, arrays in all_sections.items():
        header.append(f"[{sec}]")
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            shape = ",".join(str(s) for s in arr.shape)
            header.append(f"{name} {shape} {offset}")
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header.append("[end]")
    text = ("\n".join(header) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> tuple[EncoderConfig, Params, dict[str, Params]]:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    lines = raw[8:8 + n].decode("utf-8").rstrip("\n").split("\n")
    body = raw[8 + n:]
    magic, version = lines[0].split()
    if magic != CKPT_MAGIC or int(version) != CKPT_VERSION:
        raise ValueError(f"{path}: not an encoder checkpoint")
    cfg_kv: dict[str, int] = {}
    sections: dict[str, Params] = {}
    current = None
    for line in lines[1:]:
        if line.startswith("["):
            current = line[1:-1]
            if current not in ("config", "end"):
                sections[current] = {}
            continue
        if current == "config":
            key, value = line.split("=", 1)
            cfg_kv[key] = int(value)
        elif current not in (None, "end"):
            name, shape, offset = line.split(" ")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            count = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=int(offset))
            sections[current][name] = arr.reshape(dims).astype(np.float64)
    config = EncoderConfig(**cfg_kv)
    params = sections.pop("params")
    return config, params, sections
