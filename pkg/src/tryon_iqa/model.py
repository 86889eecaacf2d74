"""Three-branch transformer with interleaved cross-attention.

The garment (G), person (P) and try-on (V) images are patch-embedded and run
through ``depth`` pre-norm transformer blocks. The first half are ordinary
blocks applied to each branch on its own. In the second half, after
self-attention, the try-on branch attends to both the garment and the person
branches while each of those attends only to the try-on branch; there is no
garment-person path. The final class tokens are compared by cosine
similarity and squashed into (-1, 1).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

BRANCHES = ("G", "P", "V")
# (target, source) pairs that receive cross-attention
DIRECTIONS = (("V", "G"), ("G", "V"), ("V", "P"), ("P", "V"))


@dataclass
class ModelConfig:
    image_height: int = 64
    image_width: int = 48
    patch_size: int = 16
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 8
    mlp_ratio: float = 4.0
    frozen_prefix: int = 0
    use_ica: bool = True
    shared_cross_attention: bool = False
    share_branch_weights: bool = True
    dtype: str = "float64"
    init_std: float = 0.1
    ln_eps: float = 1e-5
    cos_eps: float = 1e-8

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        p = self.patch_size
        if p <= 0 or self.image_height % p or self.image_width % p:
            raise ConfigError(f"image {self.image_height}x{self.image_width} not divisible by patch {p}")
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.depth <= 0 or self.depth % 2:
            raise ConfigError(f"depth must be even and positive, got {self.depth}")
        if not 0 <= self.frozen_prefix <= self.depth:
            raise ConfigError(f"frozen_prefix {self.frozen_prefix} outside [0, {self.depth}]")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype}")

    @property
    def num_tokens(self) -> int:
        return 1 + (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def is_ica_block(self, index: int) -> bool:
        return self.use_ica and index >= self.depth // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ForwardOutput(NamedTuple):
    score: Tensor       # (B,) in (-1, 1)
    relational: Tensor  # (B,) pre-head cosine mix
    c_g: Tensor         # (B, d)
    c_p: Tensor
    c_v: Tensor


def _branch_prefix(cfg: ModelConfig, branch: str) -> str:
    return "" if cfg.share_branch_weights else f"branch.{branch}."


def _cross_keys(cfg: ModelConfig) -> list[str]:
    if cfg.shared_cross_attention:
        return ["shared"]
    return [f"{t.lower()}{s.lower()}" for t, s in DIRECTIONS]


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table implied by a config."""
    d, hid = cfg.embed_dim, cfg.hidden_dim
    p3 = cfg.patch_size * cfg.patch_size * 3
    shapes: dict[str, tuple[int, ...]] = {}

    def attn(pre: str) -> None:
        for proj in "qkvo":
            shapes[f"{pre}{proj}.weight"] = (d, d)
            # a key bias shifts every logit of a query equally; softmax ignores it
            if proj != "k":
                shapes[f"{pre}{proj}.bias"] = (d,)

    def norm(pre: str) -> None:
        shapes[f"{pre}gain"] = (d,)
        shapes[f"{pre}bias"] = (d,)

    branch_sets = [""] if cfg.share_branch_weights else [f"branch.{b}." for b in BRANCHES]
    for bp in branch_sets:
        shapes[f"{bp}patch.weight"] = (p3, d)
        shapes[f"{bp}patch.bias"] = (d,)
        shapes[f"{bp}cls"] = (d,)
        shapes[f"{bp}pos"] = (cfg.num_tokens, d)
    for layer in range(cfg.depth):
        for bp in branch_sets:
            pre = f"{bp}blocks.{layer}."
            norm(pre + "norm1.")
            attn(pre + "attn.")
            norm(pre + "norm2.")
            shapes[pre + "mlp.fc1.weight"] = (d, hid)
            shapes[pre + "mlp.fc1.bias"] = (hid,)
            shapes[pre + "mlp.fc2.weight"] = (hid, d)
            shapes[pre + "mlp.fc2.bias"] = (d,)
        if cfg.is_ica_block(layer):
            for key in _cross_keys(cfg):
                pre = f"blocks.{layer}.cross.{key}."
                norm(pre + "norm_q.")
                norm(pre + "norm_kv.")
                attn(pre)
    for bp in branch_sets:
        norm(f"{bp}final_norm.")
    shapes["head.alpha_raw"] = ()
    shapes["head.a"] = ()
    shapes["head.b"] = ()
    return shapes


def block_index(name: str) -> int | None:
    """Block number a parameter belongs to, or None for embedding/head params."""
    parts = name.split(".")
    if "blocks" in parts:
        return int(parts[parts.index("blocks") + 1])
    return None


class IcaModel:
    """Parameter set plus forward pass. Parameters are plain tensors in ``params``."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        for name, p in params.items():
            p.requires_grad = self.is_trainable(name)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "IcaModel":
        rng = T.make_rng(seed)
        dtype = np.dtype(config.dtype)
        params = {}
        for name, shape in parameter_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                data = np.ones(shape)
            elif leaf == "a":
                data = np.ones(shape)
            elif leaf in ("bias", "alpha_raw", "b"):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, config.init_std, size=shape)
            params[name] = Tensor(data.astype(dtype), name=name)
        return cls(config, params)

    # ---------------------------------------------------------------- params

    def is_trainable(self, name: str) -> bool:
        k = self.config.frozen_prefix
        if k == 0:
            return True
        idx = block_index(name)
        if idx is None:
            # embeddings sit upstream of the frozen blocks; head and final norm do not
            return not any(name.endswith(s) or f"{s}." in name for s in ("patch", "cls", "pos"))
        return idx >= k

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if self.is_trainable(n)]

    def copy(self) -> "IcaModel":
        return IcaModel(self.config, {n: Tensor(p.data.copy(), name=n) for n, p in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            p.data = state[n].copy()

    def alpha(self) -> float:
        return float(T.sigmoid(self.params["head.alpha_raw"]).data)

    # --------------------------------------------------------------- forward

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def embed(self, images: np.ndarray, branch: str) -> Tensor:
        """(B, H, W, 3) images in [0, 1] -> (B, N, d) token sequences."""
        cfg = self.config
        if images.ndim == 3:
            images = images[None]
        b, h, w, c = images.shape
        if (h, w, c) != (cfg.image_height, cfg.image_width, 3):
            raise DimensionError(
                f"image {h}x{w}x{c} does not match config {cfg.image_height}x{cfg.image_width}x3")
        p = cfg.patch_size
        patches = images.reshape(b, h // p, p, w // p, p, 3).transpose(0, 1, 3, 2, 4, 5)
        patches = Tensor(patches.reshape(b, -1, p * p * 3).astype(cfg.dtype))
        bp = _branch_prefix(cfg, branch)
        tok = T.linear(patches, self._p(bp + "patch.weight"), self._p(bp + "patch.bias"))
        cls_tok = T.reshape(T.repeat(self._p(bp + "cls"), b), (b, 1, cfg.embed_dim))
        x = T.concat([cls_tok, tok], axis=1)
        return x + T.repeat(self._p(bp + "pos"), b)

    def _norm(self, x: Tensor, pre: str) -> Tensor:
        return T.layernorm(x, self._p(pre + "gain"), self._p(pre + "bias"), self.config.ln_eps)

    def attention(self, xq: Tensor, xkv: Tensor, pre: str, probe: list | None = None) -> Tensor:
        """Multi-head attention with queries from ``xq`` and keys/values from ``xkv``."""
        cfg = self.config
        s, n, d = xq.shape
        m = xkv.shape[1]
        h = cfg.num_heads
        dh = d // h

        def heads(x: Tensor, proj: str, length: int) -> Tensor:
            y = T.linear(x, self._p(f"{pre}{proj}.weight"), self.params.get(f"{pre}{proj}.bias"))
            return T.transpose(T.reshape(y, (s, length, h, dh)), (0, 2, 1, 3))

        q = heads(xq, "q", n)
        k = heads(xkv, "k", m)
        v = heads(xkv, "v", m)
        logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        weights = T.softmax(logits, axis=-1)
        if probe is not None:
            probe.append((pre, weights.data.copy()))
        out = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
        out = T.reshape(out, (s, n, d))
        return T.linear(out, self._p(pre + "o.weight"), self._p(pre + "o.bias"))

    def self_attention(self, x: Tensor, pre: str, probe: list | None = None) -> Tensor:
        xn = self._norm(x, pre + "norm1.")
        return self.attention(xn, xn, pre + "attn.", probe)

    def mlp(self, x: Tensor, pre: str) -> Tensor:
        y = self._norm(x, pre + "norm2.")
        y = T.gelu(T.linear(y, self._p(pre + "mlp.fc1.weight"), self._p(pre + "mlp.fc1.bias")))
        return T.linear(y, self._p(pre + "mlp.fc2.weight"), self._p(pre + "mlp.fc2.bias"))

    def cross_attention(self, target: Tensor, source: Tensor, layer: int, direction: tuple[str, str],
                        probe: list | None = None) -> Tensor:
        """Contribution to ``target`` (queries) from ``source`` (keys/values)."""
        if direction not in DIRECTIONS:
            raise ValueError(f"invalid cross-attention direction {direction!r}")
        if not self.config.is_ica_block(layer):
            raise ValueError(f"block {layer} has no cross-attention")
        key = "shared" if self.config.shared_cross_attention else "".join(direction).lower()
        pre = f"blocks.{layer}.cross.{key}."
        return self.attention(self._norm(target, pre + "norm_q."), self._norm(source, pre + "norm_kv."),
                              pre, probe)

    def _per_branch(self, xs: dict[str, Tensor], fn) -> dict[str, Tensor]:
        """Apply ``fn(x, prefix)`` to every branch, stacking when weights are shared."""
        if self.config.share_branch_weights:
            sizes = [xs[b].shape[0] for b in BRANCHES]
            out = T.split(fn(T.concat([xs[b] for b in BRANCHES], axis=0), ""), sizes, axis=0)
            return dict(zip(BRANCHES, out))
        return {b: fn(xs[b], f"branch.{b}.") for b in BRANCHES}

    def standard_block(self, xs: dict[str, Tensor], layer: int, probe: list | None = None) -> dict[str, Tensor]:
        def run(x, bp):
            pre = f"{bp}blocks.{layer}."
            x = x + self.self_attention(x, pre, probe)
            return x + self.mlp(x, pre)

        return self._per_branch(xs, run)

    def ica_block(self, xs: dict[str, Tensor], layer: int, probe: list | None = None) -> dict[str, Tensor]:
        tilde = self._per_branch(xs, lambda x, bp: x + self.self_attention(x, f"{bp}blocks.{layer}.", probe))
        contrib = {d: self.cross_attention(tilde[d[0]], tilde[d[1]], layer, d, probe) for d in DIRECTIONS}
        hat = {
            "V": tilde["V"] + contrib[("V", "G")] + contrib[("V", "P")],
            "G": tilde["G"] + contrib[("G", "V")],
            "P": tilde["P"] + contrib[("P", "V")],
        }
        return self._per_branch(hat, lambda x, bp: x + self.mlp(x, f"{bp}blocks.{layer}."))

    def encode(self, garment: np.ndarray, person: np.ndarray, tryon: np.ndarray,
               probe: list | None = None, upto: int | None = None) -> dict[str, Tensor]:
        """Token sequences per branch after ``upto`` blocks (all blocks by default)."""
        images = {"G": garment, "P": person, "V": tryon}
        xs = {b: self.embed(np.asarray(images[b]), b) for b in BRANCHES}
        depth = self.config.depth if upto is None else upto
        for layer in range(depth):
            if self.config.is_ica_block(layer):
                xs = self.ica_block(xs, layer, probe)
            else:
                xs = self.standard_block(xs, layer, probe)
        return xs

    def forward(self, garment: np.ndarray, person: np.ndarray, tryon: np.ndarray,
                probe: list | None = None) -> ForwardOutput:
        xs = self.encode(garment, person, tryon, probe)
        cls = {b: self._norm(xs[b], _branch_prefix(self.config, b) + "final_norm.")[:, 0, :] for b in BRANCHES}
        rel = relational_score(cls["G"], cls["P"], cls["V"], T.sigmoid(self._p("head.alpha_raw")),
                               self.config.cos_eps)
        score = score_head(rel, self._p("head.a"), self._p("head.b"))
        return ForwardOutput(score, rel, cls["G"], cls["P"], cls["V"])

    def score(self, garment, person, tryon) -> np.ndarray:
        """Scores as a plain array, no tape recorded."""
        tape = T.active_tape()
        if tape is not None:
            tape.mode = "frozen"
        try:
            return self.forward(garment, person, tryon).score.data.copy()
        finally:
            if tape is not None:
                tape.mode = "recording"


def relational_score(c_g: Tensor, c_p: Tensor, c_v: Tensor, alpha, eps: float = 1e-8) -> Tensor:
    """alpha * cos(c_g, c_v) + (1 - alpha) * cos(c_p, c_v)."""
    alpha = T.as_tensor(alpha, like=c_v)
    cos_g = T.cosine_similarity(c_g, c_v, eps)
    cos_p = T.cosine_similarity(c_p, c_v, eps)
    return alpha * cos_g + T.sub(1.0, alpha) * cos_p


def score_head(rel: Tensor, a, b) -> Tensor:
    rel = T.as_tensor(rel)
    return T.tanh(T.as_tensor(a, like=rel) * rel + T.as_tensor(b, like=rel))


def preprocess(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize to (height, width) and scale 8-bit values to [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected an H x W x 3 image, got shape {img.shape}")
    h, w = img.shape[:2]
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    out = img[rows][:, cols]
    if np.issubdtype(out.dtype, np.integer):
        return out.astype(np.float64) / 255.0
    return out.astype(np.float64)
