"""PE-Transformer, vanilla transformer and SH-CNN estimators.

Every model maps a batch of 3x3x3 patches to a free-water fraction in (0, 1)
and 45 FOD coefficients for each patch's center voxel. Parameters are plain
dicts of arrays (ordered, so checkpoints are deterministic); forward passes
build an autodiff graph over them.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import IcosaScheme, SchemeLevel
from .shbasis import N_COEFFS

MODEL_TYPES = ("pe", "vanilla", "shcnn")
PATCH_VOXELS = 27
VANILLA_TOKEN = PATCH_VOXELS + 3


@dataclass
class ModelConfig:
    model_type: str = "pe"
    scheme_level: str = "ICOSA21"
    embed_dim: int = 256
    n_layers: int = 6
    n_heads: int = 8
    ffn_dim: int = 1024
    mlp_hidden: int = 256
    max_seq_len: int = 200
    sh_channels: int = N_COEFFS
    seed: int = 0

    def __post_init__(self):
        if self.model_type not in MODEL_TYPES:
            raise ValueError(f"model_type must be one of {MODEL_TYPES}, got {self.model_type!r}")
        self.scheme_level = SchemeLevel.parse(self.scheme_level).name
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even for sinusoidal encoding")
        for name in ("embed_dim", "n_layers", "n_heads", "ffn_dim", "mlp_hidden", "max_seq_len",
                     "sh_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def level(self) -> SchemeLevel:
        return SchemeLevel[self.scheme_level]

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# -- parameters -------------------------------------------------------------------

def _linear(rng, params, name, n_in, n_out, dtype):
    limit = np.sqrt(6.0 / (n_in + n_out))
    params[f"{name}.weight"] = rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)
    params[f"{name}.bias"] = np.zeros(n_out, dtype=dtype)


def _heads(rng, params, n_in, hidden, dtype):
    _linear(rng, params, "fwf_head.hidden", n_in, hidden, dtype)
    _linear(rng, params, "fwf_head.out", hidden, 1, dtype)
    _linear(rng, params, "fod_head.hidden", n_in, hidden, dtype)
    _linear(rng, params, "fod_head.out", hidden, N_COEFFS, dtype)


def init_params(cfg: ModelConfig, dtype=np.float32) -> dict:
    """Seeded initialization: Xavier-uniform linears, He-normal convolutions."""
    rng = np.random.default_rng(cfg.seed)
    p: dict = {}
    if cfg.model_type == "shcnn":
        c = cfg.sh_channels
        for name, k in (("conv1", 1), ("conv2", 3), ("conv3", 3)):
            std = np.sqrt(2.0 / (k ** 3 * c))
            p[f"{name}.weight"] = (rng.standard_normal((k, k, k, c, c)) * std).astype(dtype)
            p[f"{name}.bias"] = np.zeros(c, dtype=dtype)
        _heads(rng, p, c, cfg.mlp_hidden, dtype)
        return p
    d, f = cfg.embed_dim, cfg.ffn_dim
    n_in = PATCH_VOXELS if cfg.model_type == "pe" else VANILLA_TOKEN
    _linear(rng, p, "embed", n_in, d, dtype)
    for i in range(cfg.n_layers):
        for proj in ("q", "k", "v", "o"):
            _linear(rng, p, f"layer{i}.attn.{proj}", d, d, dtype)
        p[f"layer{i}.norm1.gain"] = np.ones(d, dtype=dtype)
        p[f"layer{i}.norm1.bias"] = np.zeros(d, dtype=dtype)
        _linear(rng, p, f"layer{i}.ffn.in", d, f, dtype)
        _linear(rng, p, f"layer{i}.ffn.out", f, d, dtype)
        p[f"layer{i}.norm2.gain"] = np.ones(d, dtype=dtype)
        p[f"layer{i}.norm2.bias"] = np.zeros(d, dtype=dtype)
    _heads(rng, p, d, cfg.mlp_hidden, dtype)
    return p


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    Transformer: in*E + E + L*(4(E^2+E) + 4E + 2EF + F + E) + heads(E);
    SH-CNN: 55C^2 + 3C + heads(C); heads(n) = 2(nH + H) + (H + 1) + (45H + 45).
    """
    h = cfg.mlp_hidden

    def heads(n):
        return 2 * (n * h + h) + (h + 1) + (N_COEFFS * h + N_COEFFS)

    if cfg.model_type == "shcnn":
        c = cfg.sh_channels
        return 55 * c * c + 3 * c + heads(c)
    e, f, n_layers = cfg.embed_dim, cfg.ffn_dim, cfg.n_layers
    n_in = PATCH_VOXELS if cfg.model_type == "pe" else VANILLA_TOKEN
    per_layer = 4 * (e * e + e) + 4 * e + 2 * e * f + f + e
    return n_in * e + e + n_layers * per_layer + heads(e)


def expected_input_channels(cfg: ModelConfig) -> int | None:
    if cfg.model_type == "pe":
        return cfg.level.token_count
    if cfg.model_type == "shcnn":
        return cfg.sh_channels
    return None


# -- tokens and encodings -----------------------------------------------------------

@lru_cache(maxsize=16)
def _pe_table(seq_len: int, dim: int) -> np.ndarray:
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / dim)
    pe = np.empty((seq_len, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.flags.writeable = False
    return pe


def sinusoidal_pe(seq_len: int, dim: int = 256) -> np.ndarray:
    if dim % 2:
        raise ValueError("sinusoidal encoding needs an even dimension")
    return _pe_table(int(seq_len), int(dim)).copy()


def _as_batch(patch) -> np.ndarray:
    patch = np.asarray(patch)
    if patch.ndim == 4:
        patch = patch[None]
    if patch.ndim != 5 or patch.shape[1:4] != (3, 3, 3):
        raise ad.ShapeError(f"patches must be (B,) 3x3x3xC, got shape {patch.shape}")
    return patch


def _channel_tokens(patch: np.ndarray) -> np.ndarray:
    # (B, x, y, z, C) -> (B, C, 27) with dz slowest and dx fastest
    b, c = patch.shape[0], patch.shape[-1]
    return np.transpose(patch, (0, 4, 3, 2, 1)).reshape(b, c, PATCH_VOXELS)


def pe_tokenize(patch, scheme: IcosaScheme | int | None = None) -> np.ndarray:
    """One 27-value token per resampling direction, in centroid order."""
    patch = _as_batch(patch)
    if scheme is not None:
        n = scheme if isinstance(scheme, int) else scheme.token_count
        if patch.shape[-1] != n:
            raise ad.ShapeError(f"patch has {patch.shape[-1]} channels but the scheme has {n} tokens")
    return _channel_tokens(patch)


def vanilla_tokenize(patch, dirs, max_seq_len: int = 200) -> np.ndarray:
    """27 patch values along a direction followed by that direction's 3 components."""
    patch = _as_batch(patch)
    dirs = np.asarray(dirs, dtype=patch.dtype).reshape(-1, 3)
    if len(dirs) != patch.shape[-1]:
        raise ad.ShapeError(f"{patch.shape[-1]} channels but {len(dirs)} directions")
    if len(dirs) > max_seq_len:
        raise ad.ShapeError(f"sequence of {len(dirs)} tokens exceeds max_seq_len={max_seq_len}")
    tok = _channel_tokens(patch)
    d = np.broadcast_to(dirs, (patch.shape[0],) + dirs.shape)
    return np.concatenate([tok, d], axis=-1)


# -- forward passes ------------------------------------------------------------------

def _P(params, name) -> Tensor:
    p = params[name]
    return p if isinstance(p, Tensor) else Tensor(p)


def _dense(params, name, x):
    return ad.add(ad.matmul(x, _P(params, f"{name}.weight")), _P(params, f"{name}.bias"))


def _mlp_heads(params, h):
    fwf = _dense(params, "fwf_head.out", ad.gelu(_dense(params, "fwf_head.hidden", h)))
    fod = _dense(params, "fod_head.out", ad.gelu(_dense(params, "fod_head.hidden", h)))
    fwf = ad.sigmoid(ad.reshape(fwf, (fwf.shape[0],)))
    return fwf, fod


def encode(params, cfg: ModelConfig, tokens, use_pe: bool = True, trace: list | None = None):
    """Token embedding, positional encoding and the post-norm encoder stack.

    Returns the mean-pooled (B, E) representation. Attention weights of each
    layer are appended to ``trace`` when given.
    """
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    b, t, _ = tokens.shape
    e, nh, dh = cfg.embed_dim, cfg.n_heads, cfg.head_dim
    x = _dense(params, "embed", tokens)
    if use_pe:
        x = ad.add(x, Tensor(_pe_table(t, e).astype(x.dtype)))
    scale = x.dtype.type(1.0 / np.sqrt(dh))

    def heads(y):
        return ad.transpose(ad.reshape(y, (b, t, nh, dh)), (0, 2, 1, 3))

    for i in range(cfg.n_layers):
        pre = f"layer{i}"
        q = heads(ad.mul(_dense(params, f"{pre}.attn.q", x), scale))
        k = heads(_dense(params, f"{pre}.attn.k", x))
        v = heads(_dense(params, f"{pre}.attn.v", x))
        attn = ad.softmax(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), axis=-1)
        if trace is not None:
            trace.append(attn.data)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, e))
        x = ad.layer_norm(ad.add(x, _dense(params, f"{pre}.attn.o", ctx)),
                          _P(params, f"{pre}.norm1.gain"), _P(params, f"{pre}.norm1.bias"))
        ff = _dense(params, f"{pre}.ffn.out", ad.gelu(_dense(params, f"{pre}.ffn.in", x)))
        x = ad.layer_norm(ad.add(x, ff),
                          _P(params, f"{pre}.norm2.gain"), _P(params, f"{pre}.norm2.bias"))
    return ad.mean(x, axes=1)


def pe_forward(params, patch, cfg: ModelConfig, scheme: IcosaScheme | None = None,
               use_pe: bool = True, trace: list | None = None):
    patch = _as_batch(patch)
    n = scheme.token_count if scheme is not None else cfg.level.token_count
    tokens = pe_tokenize(patch, n)
    return _mlp_heads(params, encode(params, cfg, tokens, use_pe, trace))


def vanilla_forward(params, patch, dirs, cfg: ModelConfig, use_pe: bool = True,
                    trace: list | None = None):
    tokens = vanilla_tokenize(patch, dirs, cfg.max_seq_len)
    return _mlp_heads(params, encode(params, cfg, tokens, use_pe, trace))


def shcnn_forward(params, sh_patch, cfg: ModelConfig, trace: list | None = None):
    sh_patch = _as_batch(sh_patch)
    c = cfg.sh_channels
    if sh_patch.shape[-1] != c:
        raise ad.ShapeError(f"SH-CNN expects {c} coefficient channels, got {sh_patch.shape[-1]}")
    b = sh_patch.shape[0]
    x = Tensor(sh_patch)
    h = ad.relu(ad.conv3d(x, _P(params, "conv1.weight"), _P(params, "conv1.bias"), padding=0))
    h = ad.relu(ad.conv3d(h, _P(params, "conv2.weight"), _P(params, "conv2.bias"), padding=1))
    h = ad.conv3d(h, _P(params, "conv3.weight"), _P(params, "conv3.bias"), padding=0)
    if trace is not None:
        trace.append(h.data)
    h = ad.add(ad.reshape(h, (b, c)), Tensor(sh_patch[:, 1, 1, 1, :]))
    return _mlp_heads(params, h)


def forward(params, cfg: ModelConfig, patch, dirs=None, **kw):
    """Dispatch on ``cfg.model_type``; ``dirs`` is required for the vanilla model."""
    if cfg.model_type == "pe":
        return pe_forward(params, patch, cfg, **kw)
    if cfg.model_type == "vanilla":
        if dirs is None:
            raise ValueError("vanilla transformer needs the symmetrized direction list")
        return vanilla_forward(params, patch, dirs, cfg, **kw)
    return shcnn_forward(params, patch, cfg, **kw)


def toy_config(model_type: str, **kw) -> ModelConfig:
    """Small widths for gradient checks: embed 8, 2 heads, 1 layer; 5 SH-CNN filters."""
    base = dict(model_type=model_type, scheme_level="ICOSA6", embed_dim=8, n_layers=1, n_heads=2,
                ffn_dim=16, mlp_hidden=8, sh_channels=5)
    base.update(kw)
    return ModelConfig(**base)
