"""The two-branch image+tabular network with feature-wise modulation fusion.

Layout of a built model (fixed order)::

    img.fc      Linear d_img_in -> 64      img.ln   LayerNorm 64
    tab.fc1     Linear d_tab_in -> 64      tab.ln1  LayerNorm 64
    tab.fc2     Linear 64 -> 64            tab.ln2  LayerNorm 64
    tab.skip    Linear d_tab_in -> 64      (only with skip and d_tab_in != 64)
    fusion      Linear 64 -> 128           (gamma || beta, only with fusion)
    head.fc1    Linear 128 -> 64           head.ln  LayerNorm 64
    head.fc2    Linear 64 -> out

The skip connection carries the (projected) tabular input into the second
linear's output, ahead of the branch's final layer norm.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DataError, DimensionError
from .nn import LayerNormLayer, LinearLayer, ParameterSet
from .rng import stream

CLASSIFICATION = "classification"
REGRESSION = "regression"
TASKS = (CLASSIFICATION, REGRESSION)
MODALITIES = ("both", "image", "tabular")


@dataclass(frozen=True)
class ModelConfig:
    d_tab_in: int
    d_img_in: int = 1280
    d_emb: int = 64
    d_fused: int = 128
    task: str = CLASSIFICATION
    num_classes: int = 6
    dropout_p: float = nn.DEFAULT_DROPOUT
    use_skip: bool = True
    use_film_fusion: bool = True
    # "image" / "tabular" drop the other branch entirely (single-branch baselines)
    modalities: str = "both"
    # Regression head predicts (y - target_mean) / target_std.
    target_mean: float = 0.0
    target_std: float = 1.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        for name in ("d_tab_in", "d_img_in", "d_emb", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_fused != 2 * self.d_emb:
            raise ConfigError(f"d_fused ({self.d_fused}) must equal 2 * d_emb ({2 * self.d_emb})")
        if self.task == CLASSIFICATION and self.num_classes < 2:
            raise ConfigError("classification needs at least 2 classes")
        if not self.target_std > 0:
            raise ConfigError(f"target_std must be > 0, got {self.target_std}")
        if self.modalities not in MODALITIES:
            raise ConfigError(f"unknown modalities {self.modalities!r}; expected one of {MODALITIES}")
        nn.check_dropout_rate(self.dropout_p)

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == CLASSIFICATION else 1

    @property
    def uses_image(self) -> bool:
        return self.modalities in ("both", "image")

    @property
    def uses_tabular(self) -> bool:
        return self.modalities in ("both", "tabular")

    @property
    def uses_fusion(self) -> bool:
        return self.use_film_fusion and self.modalities == "both"

    @property
    def has_skip_projection(self) -> bool:
        return self.uses_tabular and self.use_skip and self.d_tab_in != self.d_emb

    @property
    def head_in(self) -> int:
        return self.d_fused if self.modalities == "both" else self.d_emb

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _shapes(cfg: ModelConfig):
    e = cfg.d_emb

    def linear(name, i, o):
        return [(f"{name}.weight", (o, i)), (f"{name}.bias", (o,))]

    def norm(name, d):
        return [(f"{name}.gain", (d,)), (f"{name}.shift", (d,))]

    shapes = []
    if cfg.uses_image:
        shapes += linear("img.fc", cfg.d_img_in, e) + norm("img.ln", e)
    if cfg.uses_tabular:
        shapes += linear("tab.fc1", cfg.d_tab_in, e) + norm("tab.ln1", e)
        shapes += linear("tab.fc2", e, e) + norm("tab.ln2", e)
    if cfg.has_skip_projection:
        shapes += linear("tab.skip", cfg.d_tab_in, e)
    if cfg.uses_fusion:
        shapes += linear("fusion", e, 2 * e)
    shapes += linear("head.fc1", cfg.head_in, e) + norm("head.ln", e)
    shapes += linear("head.fc2", e, cfg.out_dim)
    return shapes


def build_model(cfg: ModelConfig, seed: int) -> ParameterSet:
    """Initialise every trainable tensor from its own named random stream."""
    entries = []
    for name, shape in _shapes(cfg):
        layer, kind = name.rsplit(".", 1)
        if kind == "weight":
            w, _ = nn.init_linear(stream(seed, "init", layer), shape[1], shape[0])
            entries.append((name, w))
        elif kind == "gain":
            entries.append((name, np.ones(shape, dtype=np.float32)))
        else:
            entries.append((name, np.zeros(shape, dtype=np.float32)))
    return ParameterSet(entries)


def _linear(p, name) -> LinearLayer:
    return LinearLayer(p[f"{name}.weight"], p[f"{name}.bias"])


def _norm(p, name) -> LayerNormLayer:
    return LayerNormLayer(p[f"{name}.gain"], p[f"{name}.shift"])


def _cast(p, dtype):
    if dtype == np.float32:
        return p
    return {k: v.astype(dtype) for k, v in p.items()}


@dataclass
class ForwardTrace:
    z_img: np.ndarray
    z_tab: np.ndarray
    gamma: np.ndarray | None
    beta: np.ndarray | None
    z_mod: np.ndarray | None
    z_mm: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def _check_inputs(cfg: ModelConfig, x_img, x_tab):
    if x_img.ndim != 2 or x_img.shape[1] != cfg.d_img_in:
        raise DimensionError(
            f"image features shape {tuple(x_img.shape)} does not match d_img_in={cfg.d_img_in}"
        )
    if x_tab.ndim != 2 or x_tab.shape[1] != cfg.d_tab_in:
        raise DimensionError(
            f"tabular features shape {tuple(x_tab.shape)} does not match d_tab_in={cfg.d_tab_in}"
        )
    if x_img.shape[0] != x_tab.shape[0]:
        raise DimensionError(f"batch sizes differ: image {x_img.shape[0]} vs tabular {x_tab.shape[0]}")


def forward(params, cfg: ModelConfig, x_img, x_tab, train: bool = False, rng=None):
    """Run the network; returns ``(output, trace)``.

    ``output`` holds raw logits for classification or a single standardized
    prediction column for regression. Train mode applies dropout and needs
    ``rng``; eval mode is a pure function of ``(params, inputs)``.
    """
    _check_inputs(cfg, x_img, x_tab)
    p = params if x_img.dtype == np.float32 else _cast(params, x_img.dtype)
    x_tab = x_tab.astype(x_img.dtype, copy=False)
    pdrop = cfg.dropout_p
    c = {}

    def block(x, lin, norm, tag):
        a = nn.linear_forward(_linear(p, lin), x)
        n, c[tag + ".ln"] = nn.layer_norm_forward(_norm(p, norm), a)
        r = nn.relu_forward(n)
        c[tag + ".pre_relu"] = n
        out, c[tag + ".mask"] = nn.dropout_forward(r, pdrop, train, rng)
        return out

    z_img = z_tab = None
    if cfg.uses_image:
        z_img = block(x_img, "img.fc", "img.ln", "img")

    if cfg.uses_tabular:
        h1 = block(x_tab, "tab.fc1", "tab.ln1", "tab1")
        u = nn.linear_forward(_linear(p, "tab.fc2"), h1)
        c["h1"] = h1
        if cfg.use_skip:
            if cfg.has_skip_projection:
                u = u + nn.linear_forward(_linear(p, "tab.skip"), x_tab)
            else:
                u = u + x_tab
        n2, c["tab2.ln"] = nn.layer_norm_forward(_norm(p, "tab.ln2"), u)
        c["tab2.pre_relu"] = n2
        z_tab, c["tab2.mask"] = nn.dropout_forward(nn.relu_forward(n2), pdrop, train, rng)

    gamma = beta = z_mod = None
    if cfg.uses_fusion:
        gb = nn.linear_forward(_linear(p, "fusion"), z_tab)
        e = cfg.d_emb
        gamma, beta = gb[:, :e], gb[:, e:]
        z_mod = gamma * z_img + beta
        z_mm = np.concatenate([z_mod, z_tab], axis=1)
    elif cfg.modalities == "both":
        z_mm = np.concatenate([z_img, z_tab], axis=1)
    else:
        z_mm = z_img if cfg.uses_image else z_tab

    # prediction head
    h = block(z_mm, "head.fc1", "head.ln", "head")
    c["head.h"] = h
    out = nn.linear_forward(_linear(p, "head.fc2"), h)
    c["x_img"], c["x_tab"] = x_img, x_tab
    return out, ForwardTrace(z_img, z_tab, gamma, beta, z_mod, z_mm, c)


def backward(params, cfg: ModelConfig, trace: ForwardTrace, dout) -> ParameterSet:
    """Gradient of a scalar loss w.r.t. every parameter, given ``dL/d output``."""
    c = trace.cache
    grads = {}

    def lin_back(name, x, d, need_dx=True):
        dx, grads[f"{name}.weight"], grads[f"{name}.bias"] = nn.linear_backward(
            _linear(params, name), x, d, need_dx
        )
        return dx

    def block_back(d, lin, norm, tag, x, need_dx=True):
        d = nn.dropout_backward(c[tag + ".mask"], d)
        d = nn.relu_backward(c[tag + ".pre_relu"], d)
        d, grads[f"{norm}.gain"], grads[f"{norm}.shift"] = nn.layer_norm_backward(
            _norm(params, norm), c[tag + ".ln"], d
        )
        return lin_back(lin, x, d, need_dx)

    d_h = lin_back("head.fc2", c["head.h"], dout)
    d_zmm = block_back(d_h, "head.fc1", "head.ln", "head", trace.z_mm)

    e = cfg.d_emb
    if cfg.uses_fusion:
        d_zmod, d_ztab = d_zmm[:, :e], d_zmm[:, e:]
        d_zimg = d_zmod * trace.gamma
        d_gb = np.concatenate([d_zmod * trace.z_img, d_zmod], axis=1)
        d_ztab = d_ztab + lin_back("fusion", trace.z_tab, d_gb)
    elif cfg.modalities == "both":
        d_zimg, d_ztab = d_zmm[:, :e], d_zmm[:, e:]
    else:
        d_zimg = d_ztab = d_zmm

    if cfg.uses_tabular:
        d = nn.dropout_backward(c["tab2.mask"], d_ztab)
        d = nn.relu_backward(c["tab2.pre_relu"], d)
        d_u, grads["tab.ln2.gain"], grads["tab.ln2.shift"] = nn.layer_norm_backward(
            _norm(params, "tab.ln2"), c["tab2.ln"], d
        )
        if cfg.has_skip_projection:
            lin_back("tab.skip", c["x_tab"], d_u, need_dx=False)
        d_h1 = lin_back("tab.fc2", c["h1"], d_u)
        block_back(d_h1, "tab.fc1", "tab.ln1", "tab1", c["x_tab"], need_dx=False)

    if cfg.uses_image:
        block_back(d_zimg, "img.fc", "img.ln", "img", c["x_img"], need_dx=False)

    return ParameterSet((k, grads[k]) for k in params)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _class_targets(targets, num_classes):
    t = np.asarray(targets)
    if t.ndim != 1 or not np.issubdtype(t.dtype, np.integer):
        raise DataError("classification targets must be a 1-d integer array")
    bad = np.flatnonzero((t < 0) | (t >= num_classes))
    if bad.size:
        raise DataError(
            f"target {int(t[bad[0]])} at row {int(bad[0])} outside 0..{num_classes - 1}"
        )
    return t


def log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def loss_with_grad(output, targets, cfg: ModelConfig):
    """Batch-mean task loss and its gradient w.r.t. ``output``.

    Classification targets are 0-based class indices; regression targets are
    raw-scale values, standardized here with the config's target statistics.
    """
    b = output.shape[0]
    if cfg.task == CLASSIFICATION:
        t = _class_targets(targets, output.shape[1])
        logp = log_softmax(output)
        loss = -logp[np.arange(b), t].mean(dtype=np.float64)
        grad = np.exp(logp)
        grad[np.arange(b), t] -= 1
        return float(loss), grad / output.dtype.type(b)
    y = np.asarray(targets, dtype=output.dtype).reshape(b, 1)
    if not np.isfinite(y).all():
        raise DataError("regression targets must be finite")
    y = (y - output.dtype.type(cfg.target_mean)) / output.dtype.type(cfg.target_std)
    diff = output - y
    loss = np.abs(diff).mean(dtype=np.float64)
    # np.sign(0) == 0 gives the zero subgradient at an exact fit
    return float(loss), np.sign(diff) / output.dtype.type(b)


def loss(output, targets, cfg: ModelConfig) -> float:
    return loss_with_grad(output, targets, cfg)[0]


def loss_and_grad(params, cfg: ModelConfig, x_img, x_tab, targets, train=False, rng=None):
    out, trace = forward(params, cfg, x_img, x_tab, train=train, rng=rng)
    value, dout = loss_with_grad(out, targets, cfg)
    return value, backward(params, cfg, trace, dout)


def predict(params, cfg: ModelConfig, x_img, x_tab, batch_size: int = 512):
    """Eval-mode predictions: class probabilities or raw-scale regression values."""
    outs = []
    for i in range(0, x_img.shape[0], batch_size):
        o, _ = forward(params, cfg, x_img[i : i + batch_size], x_tab[i : i + batch_size])
        outs.append(o)
    out = np.concatenate(outs) if outs else np.zeros((0, cfg.out_dim), np.float32)
    if cfg.task == CLASSIFICATION:
        return softmax(out.astype(np.float64))
    return out[:, 0].astype(np.float64) * cfg.target_std + cfg.target_mean
