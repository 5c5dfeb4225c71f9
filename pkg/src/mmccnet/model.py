"""Multi-scale, multi-path cascaded segmentation network.

Data flow (``c`` = base width, all 3x3 convs "same"-padded):

    image -> stem (2x conv/BN/ReLU)                          F        H x W
    stage A:  F_a = conv(F);  F_i = ReLU(BN(F_a))
              F_1 = conv(F_i)
              F_2 = up2(conv_{d=2,s=2}(F_i)),  F_4 = up4(conv_{d=4,s=4}(F_i))
              AF_A = attention(F_i)
              DF_A = [F_a] ++ F_1 ++ F_2 ++ F_4                          H x W
    stage B:  mid = ReLU(BN(conv(avgpool([AF_A ++] DF_A))))              H/2
              AF_i = attention(mid) or mid
              E_1, E_2, E_4 from AF_i by dilated/strided convs, restored
              AF_B = avgpool(enhancer(DF_A))
              DF_B = AF_i ++ E_1 ++ E_2 ++ E_4 ++ [AF_B]
    stage C:  DF_C = convT_{s=2}(DF_B) ++ [AF_A]                         H x W
              prob = sigmoid(conv1x1(ReLU(BN(conv1x1(DF_C)))))

Bracketed terms are removed by the ablation flags.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = {
    "network1": dict(enable_skip_path=False, enable_attention=False, enable_enhancer=False),
    "network2": dict(enable_skip_path=True, enable_attention=False, enable_enhancer=False),
    "network3": dict(enable_skip_path=False, enable_attention=False, enable_enhancer=True),
    "network4": dict(enable_skip_path=True, enable_attention=True, enable_enhancer=True),
}

FEATURE_NAMES = (
    "stem", "F_a", "F_i", "F_1", "F_2", "F_4", "AF_A", "DF_A",
    "mid", "AF_i", "E_1", "E_2", "E_4", "AF_B", "DF_B", "DF_C", "bottleneck",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 77
    enhancer_channels: int = 16
    attention_channels: int | None = None
    bottleneck_channels: int | None = None
    route_dilations: tuple[int, int, int] = (1, 2, 4)
    route_strides: tuple[int, int, int] = (1, 2, 4)
    enable_skip_path: bool = True
    enable_attention: bool = True
    enable_enhancer: bool = True
    bottleneck: bool = True
    deep_supervision: bool = False
    input_size: tuple[int, int] = (288, 384)
    init_seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.enhancer_channels not in (8, 16):
            raise ConfigError(f"enhancer_channels must be 8 or 16, got {self.enhancer_channels}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if tuple(self.route_dilations) != tuple(self.route_strides):
            raise ConfigError("route_strides must equal route_dilations pairwise")
        if len(self.route_dilations) != 3 or any(d < 1 for d in self.route_dilations):
            raise ConfigError("route_dilations must be three positive integers")
        h, w = self.input_size
        if h % 4 or w % 4:
            raise ConfigError(f"input size {h}x{w} must be divisible by 4")

    @property
    def att_width(self) -> int:
        return self.attention_channels or self.base_channels

    @property
    def neck_width(self) -> int:
        return self.bottleneck_channels or self.base_channels

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Small preset used for desk-scale training and gradient checks."""
        base = dict(base_channels=16, enhancer_channels=8, input_size=(64, 96))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def for_variant(cls, name: str, base: "ModelConfig | None" = None) -> "ModelConfig":
        key = name.lower().replace(" ", "").replace("_", "")
        if key not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
        return replace(base or cls(), **VARIANTS[key])

    def variant_name(self) -> str | None:
        flags = (self.enable_skip_path, self.enable_attention, self.enable_enhancer)
        for name, v in VARIANTS.items():
            if flags == (v["enable_skip_path"], v["enable_attention"], v["enable_enhancer"]):
                return name
        return None

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("route_dilations", "route_strides", "input_size"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("route_dilations", "route_strides", "input_size"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class LayerInfo:
    name: str
    kind: str
    in_ch: int
    out_ch: int
    kernel: int = 0
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    params: int = 0
    buffers: int = 0


@dataclass
class ParameterCount:
    total: int
    trainable: int
    non_trainable: int


@dataclass
class MmccNet:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    layers: list[LayerInfo] = field(default_factory=list)
    training: bool = True
    features: dict[str, Tensor] = field(default_factory=dict)

    # -- mode / dtype ---------------------------------------------------------
    def train(self) -> "MmccNet":
        self.training = True
        return self

    def eval(self) -> "MmccNet":
        self.training = False
        return self

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "MmccNet":
        for name, p in self.params.items():
            self.params[name] = Tensor(p.data.astype(dtype), requires_grad=True)
        for name, b in self.buffers.items():
            self.buffers[name] = b.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data[...] = arrays[f"param/{k}"]
        for k, b in self.buffers.items():
            b[...] = arrays[f"buffer/{k}"]

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    # -- primitive layers -----------------------------------------------------
    def _conv(self, name: str, x: Tensor, stride=1, dilation=1, padding=None) -> Tensor:
        w = self.params[f"{name}.weight"]
        if padding is None:
            padding = dilation * (w.shape[2] // 2)
        return T.conv2d(x, w, self.params[f"{name}.bias"], stride=stride, dilation=dilation, padding=padding)

    def _up(self, name: str, x: Tensor, size: tuple[int, int]) -> Tensor:
        w = self.params[f"{name}.weight"]
        k = w.shape[2]
        y = T.conv_transpose2d(x, w, self.params[f"{name}.bias"], stride=k)
        if y.shape[2] < size[0] or y.shape[3] < size[1]:
            raise T.ShapeError(f"{name}: upsampled {y.shape[2:]} smaller than target {size}")
        return T.crop2d(y, *size)

    def _bn_relu(self, name: str, x: Tensor) -> Tensor:
        return T.relu(self._bn(name, x))

    def _bn(self, name: str, x: Tensor) -> Tensor:
        cfg = self.config
        return T.batch_norm2d(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            training=self.training,
            momentum=cfg.bn_momentum,
            eps=cfg.bn_eps,
        )

    # -- blocks -------------------------------------------------------------
    def attention_block(self, prefix: str, x: Tensor) -> Tensor:
        """Size-preserving gate: ``proj(x) * sigmoid(conv1x1(cbr(cbr(x))))``."""
        h = self._bn_relu(f"{prefix}.bn1", self._conv(f"{prefix}.conv1", x))
        h = self._bn_relu(f"{prefix}.bn2", self._conv(f"{prefix}.conv2", h))
        gate = T.sigmoid(self._conv(f"{prefix}.gate", h))
        self.features[f"{prefix}.gate"] = gate
        return self._conv(f"{prefix}.proj", x) * gate

    def feature_enhancer(self, x: Tensor, prefix: str = "enhancer") -> Tensor:
        h = self._bn_relu(f"{prefix}.bn", x)
        for k in range(1, 5):
            h = self._conv(f"{prefix}.conv{k}", h)
        return h

    def _route(self, prefix: str, x: Tensor, dilation: int) -> Tensor:
        size = x.shape[2:]
        y = self._conv(f"{prefix}.conv_{dilation}", x, stride=dilation, dilation=dilation)
        if dilation == 1:
            return y
        return self._up(f"{prefix}.up_{dilation}", y, size)

    def fuse_stage_a(self, F: Tensor) -> dict[str, Tensor]:
        cfg = self.config
        d1, d2, d4 = cfg.route_dilations
        F_a = self._conv("a.conv_a", F)
        F_i = self._bn_relu("a.bn_i", F_a)
        F_1 = self._route("a", F_i, d1)
        F_2 = self._route("a", F_i, d2)
        F_4 = self._route("a", F_i, d4)
        parts = ([F_a] if cfg.enable_skip_path else []) + [F_1, F_2, F_4]
        out = dict(F_a=F_a, F_i=F_i, F_1=F_1, F_2=F_2, F_4=F_4, DF_A=T.concat_channels(parts))
        if cfg.enable_attention:
            out["AF_A"] = self.attention_block("att_a", F_i)
        return out

    def fuse_stage_b(self, AF_A: Tensor | None, DF_A: Tensor) -> dict[str, Tensor]:
        cfg = self.config
        d1, d2, d4 = cfg.route_dilations
        inp = DF_A if AF_A is None else T.concat_channels([AF_A, DF_A])
        mid = self._bn_relu("mid.bn", self._conv("mid.conv", T.avg_pool2d(inp, 2, 2)))
        AF_i = self.attention_block("att_b", mid) if cfg.enable_attention else mid
        E_1 = self._route("b", AF_i, d1)
        E_2 = self._route("b", AF_i, d2)
        E_4 = self._route("b", AF_i, d4)
        out = dict(mid=mid, AF_i=AF_i, E_1=E_1, E_2=E_2, E_4=E_4)
        parts = [AF_i, E_1, E_2, E_4]
        if cfg.enable_enhancer:
            out["AF_B"] = T.avg_pool2d(self.feature_enhancer(DF_A), 2, 2)
            parts.append(out["AF_B"])
        out["DF_B"] = T.concat_channels(parts)
        return out

    def fuse_stage_c(self, DF_B: Tensor, AF_A: Tensor | None, size: tuple[int, int]) -> dict[str, Tensor]:
        up = self._up("c.up", DF_B, size)
        DF_C = up if AF_A is None else T.concat_channels([up, AF_A])
        h = DF_C
        if self.config.bottleneck:
            h = self._bn_relu("c.bn", self._conv("c.bottleneck", DF_C))
        prob = T.sigmoid(self._conv("c.head", h))
        return dict(DF_C=DF_C, bottleneck=h, prob=prob)

    # -- full pass ----------------------------------------------------------
    def forward(self, images, return_aux: bool = False):
        """Probability map ``(batch, 1, H, W)`` for images ``(batch, 3, H, W)`` in [0, 1]."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
        if x.ndim != 4 or x.shape[1] != 3:
            raise T.ShapeError(f"images must be shaped (batch, 3, H, W), got {x.shape}")
        h, w = x.shape[2:]
        if h % 4 or w % 4:
            raise T.ShapeError(f"image size {h}x{w} must be divisible by 4")
        if not np.all(np.isfinite(x.data)) or x.data.min() < 0 or x.data.max() > 1:
            raise ValueError("image values must be finite and within [0, 1]")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype)) if not x.requires_grad else x.astype(self.dtype)
        self.features = {}
        F = self._bn_relu("stem.bn1", self._conv("stem.conv1", x))
        F = self._bn_relu("stem.bn2", self._conv("stem.conv2", F))
        a = self.fuse_stage_a(F)
        AF_A = a.get("AF_A")
        b = self.fuse_stage_b(AF_A, a["DF_A"])
        c = self.fuse_stage_c(b["DF_B"], AF_A, (h, w))
        self.features.update(stem=F, **a, **b, **{k: v for k, v in c.items() if k != "prob"})
        prob = c["prob"]
        if not return_aux:
            return prob
        aux = []
        if self.config.deep_supervision:
            aux.append(T.sigmoid(self._conv("aux.a", a["DF_A"])))
            aux.append(T.sigmoid(self._up("aux.b", b["DF_B"], (h, w))))
        return prob, aux

    __call__ = forward

    def predict_proba(self, images, batch_size: int = 8) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                out = [self.forward(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
        finally:
            self.training = was_training
        return np.concatenate(out, axis=0)

    # -- accounting -----------------------------------------------------------
    def count_parameters(self) -> ParameterCount:
        return count_parameters(self)

    def manifest(self) -> str:
        lines = ["# name\ttype\tin_ch\tout_ch\tkernel\tstride\tdilation\tpadding\tparams\tnon_trainable"]
        for L in self.layers:
            lines.append(
                f"{L.name}\t{L.kind}\t{L.in_ch}\t{L.out_ch}\t{L.kernel}\t{L.stride}\t{L.dilation}"
                f"\t{L.padding}\t{L.params}\t{L.buffers}"
            )
        pc = count_parameters(self)
        bn_channels = sum(L.out_ch for L in self.layers if L.kind == "batchnorm")
        lines.append(f"# batchnorm_channels\t{bn_channels}")
        lines.append(f"# trainable\t{pc.trainable}")
        lines.append(f"# non_trainable\t{pc.non_trainable}")
        lines.append(f"# total\t{pc.total}")
        return "\n".join(lines) + "\n"

    def manifest_hash(self) -> str:
        return hashlib.sha256(self.manifest().encode()).hexdigest()


def count_parameters(model: MmccNet) -> ParameterCount:
    trainable = sum(p.size for p in model.params.values())
    non_trainable = sum(b.size for b in model.buffers.values())
    return ParameterCount(trainable + non_trainable, trainable, non_trainable)


# -- construction -------------------------------------------------------------


class _Builder:
    def __init__(self, model: MmccNet, rng: np.random.Generator):
        self.model = model
        self.rng = rng

    def _add(self, name, arr):
        self.model.params[name] = Tensor(arr.astype(np.float32), requires_grad=True)

    def conv(self, name, cin, cout, k=3, stride=1, dilation=1):
        fan_in = cin * k * k
        self._add(f"{name}.weight", self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k)))
        self._add(f"{name}.bias", np.zeros(cout))
        pad = dilation * (k // 2)
        self.model.layers.append(LayerInfo(name, "conv", cin, cout, k, stride, dilation, pad, cout * cin * k * k + cout))
        return cout

    def up(self, name, cin, cout, k):
        fan_in = cin  # kernel == stride: each output pixel sees one tap per input channel
        self._add(f"{name}.weight", self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cin, cout, k, k)))
        self._add(f"{name}.bias", np.zeros(cout))
        self.model.layers.append(LayerInfo(name, "conv_transpose", cin, cout, k, k, 1, 0, cin * cout * k * k + cout))
        return cout

    def bn(self, name, c):
        self._add(f"{name}.gamma", np.ones(c))
        self._add(f"{name}.beta", np.zeros(c))
        self.model.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=np.float32)
        self.model.buffers[f"{name}.running_var"] = np.ones(c, dtype=np.float32)
        self.model.layers.append(LayerInfo(name, "batchnorm", c, c, params=2 * c, buffers=2 * c))
        return c

    def pool(self, name, c):
        self.model.layers.append(LayerInfo(name, "avg_pool", c, c, 2, 2, 1, 0, 0))

    def attention(self, prefix, cin, width):
        self.conv(f"{prefix}.conv1", cin, width)
        self.bn(f"{prefix}.bn1", width)
        self.conv(f"{prefix}.conv2", width, width)
        self.bn(f"{prefix}.bn2", width)
        self.conv(f"{prefix}.gate", width, 1, k=1)
        self.conv(f"{prefix}.proj", cin, width)
        return width

    def routes(self, prefix, cin, width, dilations):
        for d in dilations:
            self.conv(f"{prefix}.conv_{d}", cin, width, stride=d, dilation=d)
            if d > 1:
                self.up(f"{prefix}.up_{d}", width, width, d)
        return width * len(dilations)


def build_mmcc_net(config: ModelConfig | None = None) -> MmccNet:
    """Instantiate the network with deterministic He-normal initialization."""
    cfg = config or ModelConfig()
    model = MmccNet(cfg)
    b = _Builder(model, np.random.default_rng(cfg.init_seed))
    c, a, e = cfg.base_channels, cfg.att_width, cfg.enhancer_channels

    b.conv("stem.conv1", 3, c)
    b.bn("stem.bn1", c)
    b.conv("stem.conv2", c, c)
    b.bn("stem.bn2", c)

    b.conv("a.conv_a", c, c)
    b.bn("a.bn_i", c)
    df_a = b.routes("a", c, c, cfg.route_dilations) + (c if cfg.enable_skip_path else 0)
    if cfg.enable_attention:
        b.attention("att_a", c, a)

    mid_in = df_a + (a if cfg.enable_attention else 0)
    b.pool("mid.pool", mid_in)
    b.conv("mid.conv", mid_in, c)
    b.bn("mid.bn", c)
    af_i = b.attention("att_b", c, a) if cfg.enable_attention else c
    df_b = af_i + b.routes("b", af_i, c, cfg.route_dilations)
    if cfg.enable_enhancer:
        b.bn("enhancer.bn", df_a)
        b.conv("enhancer.conv1", df_a, e)
        for k in range(2, 5):
            b.conv(f"enhancer.conv{k}", e, e)
        b.pool("enhancer.pool", e)
        df_b += e

    b.up("c.up", df_b, c, 2)
    df_c = c + (a if cfg.enable_attention else 0)
    head_in = df_c
    if cfg.bottleneck:
        head_in = b.conv("c.bottleneck", df_c, cfg.neck_width, k=1)
        b.bn("c.bn", head_in)
    b.conv("c.head", head_in, 1, k=1)
    if cfg.deep_supervision:
        b.conv("aux.a", df_a, 1, k=1)
        b.up("aux.b", df_b, 1, 2)
    return model


def enhancer_parameter_count(in_ch: int, width: int) -> dict[str, int]:
    """Closed-form parameter count of the feature enhancer."""
    convs = (in_ch * width * 9 + width) + 3 * (width * width * 9 + width)
    return dict(conv=convs, bn_affine=2 * in_ch, bn_stats=2 * in_ch)


# -- Grad-CAM ---------------------------------------------------------------


def grad_cam(model: MmccNet, image, layer: str) -> np.ndarray:
    """Gradient-weighted activation heatmap ``(1, 1, H, W)`` in [0, 1].

    The target is the summed output probability. Channel weights are the
    spatially averaged gradients; the weighted activations are averaged
    over channels, clamped at zero, bilinearly resized and min-max scaled.
    A map with no positive evidence is returned as all zeros.
    """
    from .data import resize

    if layer not in FEATURE_NAMES and not layer.endswith(".gate"):
        raise KeyError(f"unknown layer {layer!r}; available: {', '.join(FEATURE_NAMES)}")
    img = np.asarray(image.data if isinstance(image, Tensor) else image)
    if img.ndim == 3:
        img = img[None]
    saved_grads = {k: p.grad for k, p in model.params.items()}
    was_training = model.training
    model.eval()
    try:
        prob = model.forward(Tensor(img.astype(model.dtype)))
        if layer not in model.features:
            raise KeyError(f"layer {layer!r} is disabled in this configuration")
        feat = model.features[layer].retain_grad()
        feat.grad = None
        T.backward(prob.sum())
        acts = feat.data[0]
        grads = np.zeros_like(acts) if feat.grad is None else feat.grad[0]
    finally:
        model.training = was_training
        for k, p in model.params.items():
            p.grad = saved_grads[k]
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * acts).mean(axis=0), 0.0).astype(np.float64)
    cam = resize(cam[None, None], img.shape[2], img.shape[3], mode="bilinear")
    lo, hi = cam.min(), cam.max()
    if not np.isfinite(hi) or hi - lo <= 0:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)
