"""Time-series transformer encoder with reconstruction and classifier heads.

Tokens are time points: a window of shape (T, R) is projected to (T, d_m),
summed with a sinusoidal positional code, and passed through post-norm
encoder layers. Every function also accepts a leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ParameterError
from .rng import Rng


@dataclass(frozen=True)
class ModelConfig:
    num_rois: int = 116
    window_len: int = 64
    hidden_dim: int = 128
    num_heads: int = 8
    num_layers: int = 6
    ffn_dim: int = 512
    dropout_p: float = 0.1
    recon_hidden: int = 128
    clf_hidden: int = 64
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("num_rois", "window_len", "hidden_dim", "num_heads", "ffn_dim", "recon_hidden", "clf_hidden"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ParameterError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.hidden_dim % self.num_heads:
            raise ParameterError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def scratch(self) -> "ModelConfig":
        """The smaller from-scratch baseline: 2 layers, 4 heads."""
        return replace(self, num_layers=2, num_heads=4)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every learned array."""
    d, f, r = cfg.hidden_dim, cfg.ffn_dim, cfg.num_rois
    shapes = {"embed.weight": (r, d), "embed.bias": (d,)}
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn.wq": (d, d),
            p + "attn.wk": (d, d),
            p + "attn.wv": (d, d),
            p + "attn.wo": (d, d),
            p + "ln1.gain": (d,),
            p + "ln1.bias": (d,),
            p + "ffn.w1": (d, f),
            p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d),
            p + "ffn.b2": (d,),
            p + "ln2.gain": (d,),
            p + "ln2.bias": (d,),
        })
    shapes.update({
        "recon.w1": (d, cfg.recon_hidden),
        "recon.b1": (cfg.recon_hidden,),
        "recon.w2": (cfg.recon_hidden, r),
        "recon.b2": (r,),
        "clf.w1": (d, cfg.clf_hidden),
        "clf.b1": (cfg.clf_hidden,),
        "clf.w2": (cfg.clf_hidden, 1),
        "clf.b2": (1,),
    })
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    d, f, r = cfg.hidden_dim, cfg.ffn_dim, cfg.num_rois
    layer = 4 * d * d + 2 * d * f + f + d + 4 * d
    recon = d * cfg.recon_hidden + cfg.recon_hidden + cfg.recon_hidden * r + r
    clf = d * cfg.clf_hidden + cfg.clf_hidden + cfg.clf_hidden + 1
    return r * d + d + cfg.num_layers * layer + recon + clf


def _init_array(name: str, shape: tuple, rng: Rng) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    lim = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-lim, lim, shape)


def init_params(cfg: ModelConfig, rng: Rng, prefix: str = "") -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, unit layer-norm gains.

    ``prefix`` restricts initialisation to names starting with it. Each
    array draws from its own named stream so re-initialising one head does
    not shift any other.
    """
    return {
        name: Tensor(_init_array(name, shape, rng.spawn(name)), requires_grad=True)
        for name, shape in parameter_shapes(cfg).items()
        if name.startswith(prefix)
    }


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    even = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, even / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _pe(length: int, dim: int) -> np.ndarray:
    key = (length, dim)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = positional_encoding(length, dim)
    return _PE_CACHE[key]


def embed(x, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim < 2 or x.shape[-2:] != (cfg.window_len, cfg.num_rois):
        raise DimensionError(
            f"embed: expected (..., {cfg.window_len}, {cfg.num_rois}) input, got {x.shape}"
        )
    h = ad.add(ad.matmul(x, params["embed.weight"]), params["embed.bias"])
    pe = _pe(cfg.window_len, cfg.hidden_dim)
    if h.ndim > 2:
        pe = np.broadcast_to(pe, h.shape)
    return ad.add(h, Tensor(pe))


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(Q Kᵀ / sqrt(d_k)) V over the token axis, unmasked."""
    if q.shape[-1] != k.shape[-1] or q.shape[-2] != k.shape[-2] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: Q {q.shape}, K {k.shape}, V {v.shape} do not align")
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    w = ad.softmax(scores, axis=-1)
    out = ad.matmul(w, v)
    return (out, w) if return_weights else out


def _heads(x: Tensor, h: int) -> Tensor:
    # (..., T, d) -> (..., h, T, d/h)
    *lead, t, d = x.shape
    x = ad.reshape(x, (*lead, t, h, d // h))
    n = len(lead)
    return ad.transpose(x, (*range(n), n + 1, n, n + 2))


def _merge(x: Tensor) -> Tensor:
    *lead, h, t, dk = x.shape
    n = len(lead)
    x = ad.transpose(x, (*range(n), n + 1, n, n + 2))
    return ad.reshape(x, (*lead, t, h * dk))


def multi_head(x: Tensor, params: dict[str, Tensor], prefix: str, num_heads: int, weights_out: list | None = None):
    q = _heads(ad.matmul(x, params[prefix + "wq"]), num_heads)
    k = _heads(ad.matmul(x, params[prefix + "wk"]), num_heads)
    v = _heads(ad.matmul(x, params[prefix + "wv"]), num_heads)
    out, w = attention(q, k, v, return_weights=True)
    if weights_out is not None:
        weights_out.append(w.data)
    return ad.matmul(_merge(out), params[prefix + "wo"])


def encoder_forward(x, params, cfg: ModelConfig, training: bool = False, rng: Rng | None = None,
                    weights_out: list | None = None) -> Tensor:
    p = cfg.dropout_p
    h = ad.dropout(embed(x, params, cfg), p, training, rng)
    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        a = multi_head(h, params, pre + "attn.", cfg.num_heads, weights_out)
        h = ad.layer_norm(ad.add(h, ad.dropout(a, p, training, rng)),
                          params[pre + "ln1.gain"], params[pre + "ln1.bias"], cfg.ln_eps)
        f = ad.relu(ad.add(ad.matmul(h, params[pre + "ffn.w1"]), params[pre + "ffn.b1"]))
        f = ad.add(ad.matmul(f, params[pre + "ffn.w2"]), params[pre + "ffn.b2"])
        h = ad.layer_norm(ad.add(h, ad.dropout(f, p, training, rng)),
                          params[pre + "ln2.gain"], params[pre + "ln2.bias"], cfg.ln_eps)
    return h


def reconstruct(z: Tensor, params: dict[str, Tensor]) -> Tensor:
    hid = ad.relu(ad.add(ad.matmul(z, params["recon.w1"]), params["recon.b1"]))
    return ad.add(ad.matmul(hid, params["recon.w2"]), params["recon.b2"])


def classify(z: Tensor, params: dict[str, Tensor], dropout_p: float = 0.0, training: bool = False,
             rng: Rng | None = None) -> Tensor:
    """Per-token MLP, mean over time, sigmoid. Returns shape z.shape[:-2]."""
    z = ad.as_tensor(z)
    hid = ad.relu(ad.add(ad.matmul(z, params["clf.w1"]), params["clf.b1"]))
    hid = ad.dropout(hid, dropout_p, training, rng)
    logit = ad.add(ad.matmul(hid, params["clf.w2"]), params["clf.b2"])  # (..., T, 1)
    pooled = ad.mean(ad.reshape(logit, logit.shape[:-1]), axis=-1)
    return ad.sigmoid(pooled)


class TransformerModel:
    """Parameters plus config; the two heads share one encoder."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(cfg)
        if list(params) != list(expected):
            missing = set(expected) ^ set(params)
            raise DimensionError(f"parameter names do not match config: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "TransformerModel":
        return cls(cfg, init_params(cfg, Rng.derive(seed, "init")))

    def reinit_head(self, prefix: str, seed: int):
        self.params.update(init_params(self.cfg, Rng.derive(seed, "init", prefix), prefix))

    def encoder_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(("embed.", "layers."))]

    def head_names(self, head: str) -> list[str]:
        return [n for n in self.params if n.startswith(head + ".")]

    def set_trainable(self, names):
        names = set(names)
        for n, t in self.params.items():
            t.requires_grad = n in names
            t.grad = None

    def encode(self, x, training: bool = False, rng: Rng | None = None) -> Tensor:
        return encoder_forward(x, self.params, self.cfg, training, rng)

    def reconstruct(self, x, training: bool = False, rng: Rng | None = None) -> Tensor:
        return reconstruct(self.encode(x, training, rng), self.params)

    def classify(self, x, training: bool = False, rng: Rng | None = None) -> Tensor:
        z = self.encode(x, training, rng)
        return classify(z, self.params, self.cfg.dropout_p, training, rng)

    def predict_proba(self, windows: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Inference-mode probabilities for a stack of (T, R) windows."""
        windows = np.asarray(windows, dtype=np.float64)
        out = [self.classify(windows[i:i + chunk]).data for i in range(0, len(windows), chunk)]
        return np.concatenate(out) if out else np.empty(0)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}
