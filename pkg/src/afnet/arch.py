"""Segmentation architecture: attention blocks, fusion modules, encoders, decoder.

Six buildable variants share one decoder skeleton:

* ``DFN``      single encoder, channel-attention merge blocks.
* ``mDFN``     single encoder over optical+aux stacked channels.
* ``MPVN``     two encoders, per-stage sum fusion.
* ``MPVN-M``   two encoders, attention fusion of the branches (MAFB).
* ``MPVN-R``   two encoders, sum fusion, attention merge in the decoder (RAFB).
* ``MPVN-RM``  both attention modules (the full network).

The decoder runs top-down over strides 32/16/8/4. At each stride the fused
encoder feature passes a refinement residual block, is merged with the
upsampled deeper decoder feature (CAB or RAFB), passes a second refinement
block, and feeds a per-stage classifier head (deep supervision).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionMismatchError, GeometryError, ValidationError
from .layers import (
    BatchNormParams,
    Conv2dParams,
    ParamStore,
    batch_norm,
    bilinear_upsample,
    bn_layer,
    conv2d,
    conv_layer,
    global_avg_pool,
    max_pool2d,
    relu,
    sigmoid,
)
from .tensor import Tensor, add, concat_channels, mul

VARIANT_TAGS = ("DFN", "mDFN", "MPVN", "MPVN-M", "MPVN-R", "MPVN-RM")
# per-stage fusion of the two encoder branches / decoder merge block
_FUSION = {"DFN": None, "mDFN": None, "MPVN": "sum", "MPVN-M": "mafb",
           "MPVN-R": "sum", "MPVN-RM": "mafb"}
_MERGE = {"DFN": "cab", "mDFN": "cab", "MPVN": "cab", "MPVN-M": "cab",
          "MPVN-R": "rafb", "MPVN-RM": "rafb"}
STAGE_STRIDES = (4, 8, 16, 32)


# ---------------------------------------------------------------------------
# attention primitives

@dataclass
class AttentionParams:
    conv1: Conv2dParams   # 1x1, C_in -> C_in//r (>=1)
    conv2: Conv2dParams   # 1x1, hidden -> C_att
    reduction: int

    def __post_init__(self):
        if self.conv1.weight.shape[2] != 1 or self.conv2.weight.shape[2] != 1:
            raise ContractError("attention convolutions must be 1x1")
        if self.reduction < 1:
            raise ContractError("reduction must be >= 1")


def make_attention(store: ParamStore, name: str, c_in: int, c_att: int,
                   reduction: int, rng: np.random.Generator,
                   dtype=np.float32) -> AttentionParams:
    hidden = max(1, c_in // reduction)
    conv1 = conv_layer(store, f"{name}.conv1", c_in, hidden, 1, rng, dtype=dtype)
    conv2 = conv_layer(store, f"{name}.conv2", hidden, c_att, 1, rng, dtype=dtype)
    return AttentionParams(conv1=conv1, conv2=conv2, reduction=reduction)


def channel_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Global pooling, 1x1 conv, ReLU, 1x1 conv, sigmoid -> [N,C_att,1,1]."""
    return sigmoid(conv2d(relu(conv2d(global_avg_pool(x), p.conv1)), p.conv2))


def spatial_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Same stack without pooling -> one-channel map over the full extent."""
    return sigmoid(conv2d(relu(conv2d(x, p.conv1)), p.conv2))


# ---------------------------------------------------------------------------
# fusion / refinement blocks

@dataclass
class RRBParams:
    conv_in: Conv2dParams   # 1x1 unifier to the block width
    conv1: Conv2dParams     # 3x3, feeds BN
    bn: BatchNormParams
    conv2: Conv2dParams     # 3x3


def make_rrb(store: ParamStore, name: str, c_in: int, width: int,
             rng: np.random.Generator, dtype=np.float32) -> RRBParams:
    return RRBParams(
        conv_in=conv_layer(store, f"{name}.conv_in", c_in, width, 1, rng, dtype=dtype),
        conv1=conv_layer(store, f"{name}.conv1", width, width, 3, rng,
                         padding=1, bias=False, dtype=dtype),
        bn=bn_layer(store, f"{name}.bn", width, dtype=dtype),
        conv2=conv_layer(store, f"{name}.conv2", width, width, 3, rng,
                         padding=1, dtype=dtype),
    )


def rrb(x: Tensor, p: RRBParams) -> Tensor:
    """Residual refinement: ReLU(x' + g(x')) with x' the 1x1-unified input."""
    xu = conv2d(x, p.conv_in)
    g = conv2d(relu(batch_norm(conv2d(xu, p.conv1), p.bn)), p.conv2)
    return relu(add(xu, g))


@dataclass
class CABParams:
    ca: AttentionParams     # over concat(low, high), output width of low


def make_cab(store: ParamStore, name: str, width: int, reduction: int,
             rng: np.random.Generator, dtype=np.float32) -> CABParams:
    return CABParams(ca=make_attention(store, f"{name}.ca", 2 * width, width,
                                       reduction, rng, dtype))


def cab_fuse(low: Tensor, high: Tensor, p: CABParams,
             capture: Optional[dict] = None, tag: str = "") -> Tensor:
    _check_same_shape(low, high, "cab_fuse")
    w = channel_attention(concat_channels([low, high]), p.ca)
    if capture is not None:
        capture[f"{tag}.ca_weights"] = w
    return add(mul(w, low), high)


@dataclass
class MAFBParams:
    rrb_main: RRBParams
    rrb_aux: RRBParams
    sa: AttentionParams     # 2*width -> 1
    ca: AttentionParams     # 2*width -> 2*width
    reduce: Conv2dParams    # 1x1, 4*width -> width


def make_mafb(store: ParamStore, name: str, c_main: int, c_aux: int, width: int,
              reduction: int, rng: np.random.Generator, dtype=np.float32) -> MAFBParams:
    return MAFBParams(
        rrb_main=make_rrb(store, f"{name}.main_rrb", c_main, width, rng, dtype),
        rrb_aux=make_rrb(store, f"{name}.aux_rrb", c_aux, width, rng, dtype),
        sa=make_attention(store, f"{name}.sa", 2 * width, 1, reduction, rng, dtype),
        ca=make_attention(store, f"{name}.ca", 2 * width, 2 * width, reduction, rng, dtype),
        reduce=conv_layer(store, f"{name}.reduce", 4 * width, width, 1, rng, dtype=dtype),
    )


def mafb_fuse(main_f: Tensor, aux_f: Tensor, p: MAFBParams,
              capture: Optional[dict] = None, tag: str = "") -> Tensor:
    """Attention-gated fusion of the two branch features, reduced to the block width."""
    x1 = rrb(main_f, p.rrb_main)
    x2 = rrb(aux_f, p.rrb_aux)
    _check_same_shape(x1, x2, "mafb_fuse")
    xc = concat_channels([x1, x2])
    sa_map = spatial_attention(xc, p.sa)
    ca_vec = channel_attention(xc, p.ca)
    if capture is not None:
        capture[f"{tag}.sa_map"] = sa_map
        capture[f"{tag}.ca_weights"] = ca_vec
    gated = concat_channels([mul(sa_map, xc), mul(ca_vec, xc)])
    return conv2d(gated, p.reduce)


@dataclass
class RAFBParams:
    ca: AttentionParams     # 2*width -> width
    sa: AttentionParams     # 2*width -> 1


def make_rafb(store: ParamStore, name: str, width: int, reduction: int,
              rng: np.random.Generator, dtype=np.float32) -> RAFBParams:
    return RAFBParams(
        ca=make_attention(store, f"{name}.ca", 2 * width, width, reduction, rng, dtype),
        sa=make_attention(store, f"{name}.sa", 2 * width, 1, reduction, rng, dtype),
    )


def rafb_fuse(low: Tensor, high: Tensor, p: RAFBParams, sa_on_low: bool = False,
              capture: Optional[dict] = None, tag: str = "") -> Tensor:
    """Channel attention gates one level, spatial attention the other, then sum.

    Default assigns the channel weights to ``low`` and the spatial map to
    ``high``; ``sa_on_low`` swaps the assignment (kept as a documented
    alternative, not the default wiring).
    """
    _check_same_shape(low, high, "rafb_fuse")
    xc = concat_channels([low, high])
    ca_vec = channel_attention(xc, p.ca)
    sa_map = spatial_attention(xc, p.sa)
    if capture is not None:
        capture[f"{tag}.sa_map"] = sa_map
        capture[f"{tag}.ca_weights"] = ca_vec
    if sa_on_low:
        return add(mul(sa_map, low), mul(ca_vec, high))
    return add(mul(ca_vec, low), mul(sa_map, high))


@dataclass
class GlobalContextParams:
    conv: Conv2dParams      # 1x1 to the decoder width


def make_global_context(store: ParamStore, name: str, c_in: int, width: int,
                        rng: np.random.Generator, dtype=np.float32) -> GlobalContextParams:
    return GlobalContextParams(conv=conv_layer(store, f"{name}.conv", c_in, width,
                                               1, rng, dtype=dtype))


def global_context(top: Tensor, p: GlobalContextParams) -> Tensor:
    """Global average pool then 1x1 conv -> [N,width,1,1] context vector."""
    return conv2d(global_avg_pool(top), p.conv)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


# ---------------------------------------------------------------------------
# encoder backbones

@dataclass
class BackboneConfig:
    variant: str
    in_channels: int
    stem_width: int
    block_counts: tuple
    stage_widths: tuple
    bottleneck: bool = False

    def problems(self) -> list:
        out = []
        if len(self.block_counts) != 4 or len(self.stage_widths) != 4:
            out.append(f"backbone needs exactly 4 stages, got {len(self.stage_widths)}")
        if any(c < 1 for c in self.block_counts):
            out.append("every stage needs at least one block")
        if list(self.stage_widths) != sorted(self.stage_widths):
            out.append(f"stage widths must be non-decreasing, got {self.stage_widths}")
        if self.in_channels < 1:
            out.append("in_channels must be >= 1")
        return out


_BACKBONE_PRESETS = {
    "tiny": dict(stem_width=16, block_counts=(1, 1, 1, 1),
                 stage_widths=(16, 32, 64, 128), bottleneck=False),
    "resnet18-topology": dict(stem_width=64, block_counts=(2, 2, 2, 2),
                              stage_widths=(64, 128, 256, 512), bottleneck=False),
    "resnet34-topology": dict(stem_width=64, block_counts=(3, 4, 6, 3),
                              stage_widths=(64, 128, 256, 512), bottleneck=False),
    "resnet50-topology": dict(stem_width=64, block_counts=(3, 4, 6, 3),
                              stage_widths=(256, 512, 1024, 2048), bottleneck=True),
}


def backbone_config(variant: str, in_channels: int,
                    stage_widths: Optional[tuple] = None,
                    stem_width: Optional[int] = None) -> BackboneConfig:
    if variant not in _BACKBONE_PRESETS:
        raise ValidationError(f"unknown backbone variant {variant!r}; "
                              f"choose from {sorted(_BACKBONE_PRESETS)}")
    preset = dict(_BACKBONE_PRESETS[variant])
    if stage_widths is not None:
        preset["stage_widths"] = tuple(stage_widths)
    if stem_width is not None:
        preset["stem_width"] = stem_width
    return BackboneConfig(variant=variant, in_channels=in_channels, **preset)


class _BasicBlock:
    def __init__(self, store, name, c_in, c_out, stride, rng, dtype):
        self.conv1 = conv_layer(store, f"{name}.conv1", c_in, c_out, 3, rng,
                                stride=stride, padding=1, bias=False, dtype=dtype)
        self.bn1 = bn_layer(store, f"{name}.bn1", c_out, dtype=dtype)
        self.conv2 = conv_layer(store, f"{name}.conv2", c_out, c_out, 3, rng,
                                padding=1, bias=False, dtype=dtype)
        self.bn2 = bn_layer(store, f"{name}.bn2", c_out, dtype=dtype)
        self.down = None
        if stride != 1 or c_in != c_out:
            self.down = (conv_layer(store, f"{name}.down", c_in, c_out, 1, rng,
                                    stride=stride, bias=False, dtype=dtype),
                         bn_layer(store, f"{name}.down_bn", c_out, dtype=dtype))

    def __call__(self, x):
        y = batch_norm(conv2d(relu(batch_norm(conv2d(x, self.conv1), self.bn1)),
                              self.conv2), self.bn2)
        skip = x if self.down is None else batch_norm(conv2d(x, self.down[0]), self.down[1])
        return relu(add(y, skip))

    def bns(self):
        out = [self.bn1, self.bn2]
        if self.down is not None:
            out.append(self.down[1])
        return out


class _BottleneckBlock:
    def __init__(self, store, name, c_in, c_out, stride, rng, dtype):
        mid = max(1, c_out // 4)
        self.conv1 = conv_layer(store, f"{name}.conv1", c_in, mid, 1, rng,
                                bias=False, dtype=dtype)
        self.bn1 = bn_layer(store, f"{name}.bn1", mid, dtype=dtype)
        self.conv2 = conv_layer(store, f"{name}.conv2", mid, mid, 3, rng,
                                stride=stride, padding=1, bias=False, dtype=dtype)
        self.bn2 = bn_layer(store, f"{name}.bn2", mid, dtype=dtype)
        self.conv3 = conv_layer(store, f"{name}.conv3", mid, c_out, 1, rng,
                                bias=False, dtype=dtype)
        self.bn3 = bn_layer(store, f"{name}.bn3", c_out, dtype=dtype)
        self.down = None
        if stride != 1 or c_in != c_out:
            self.down = (conv_layer(store, f"{name}.down", c_in, c_out, 1, rng,
                                    stride=stride, bias=False, dtype=dtype),
                         bn_layer(store, f"{name}.down_bn", c_out, dtype=dtype))

    def __call__(self, x):
        y = relu(batch_norm(conv2d(x, self.conv1), self.bn1))
        y = relu(batch_norm(conv2d(y, self.conv2), self.bn2))
        y = batch_norm(conv2d(y, self.conv3), self.bn3)
        skip = x if self.down is None else batch_norm(conv2d(x, self.down[0]), self.down[1])
        return relu(add(y, skip))

    def bns(self):
        out = [self.bn1, self.bn2, self.bn3]
        if self.down is not None:
            out.append(self.down[1])
        return out


class Backbone:
    """Four-stage residual encoder; stage features at strides 4/8/16/32."""

    def __init__(self, store: ParamStore, prefix: str, cfg: BackboneConfig,
                 rng: np.random.Generator, dtype=np.float32):
        problems = cfg.problems()
        if problems:
            raise ValidationError(problems)
        self.cfg = cfg
        stem_k, stem_pad = (7, 3) if cfg.variant.startswith("resnet") else (3, 1)
        self.stem_conv = conv_layer(store, f"{prefix}.stem.conv", cfg.in_channels,
                                    cfg.stem_width, stem_k, rng, stride=2,
                                    padding=stem_pad, bias=False, dtype=dtype)
        self.stem_bn = bn_layer(store, f"{prefix}.stem.bn", cfg.stem_width, dtype=dtype)
        block_cls = _BottleneckBlock if cfg.bottleneck else _BasicBlock
        self.stages = []
        c_in = cfg.stem_width
        for si, (count, width) in enumerate(zip(cfg.block_counts, cfg.stage_widths), start=1):
            blocks = []
            for bi in range(count):
                stride = 2 if (bi == 0 and si > 1) else 1
                blocks.append(block_cls(store, f"{prefix}.stage{si}.block{bi + 1}",
                                        c_in, width, stride, rng, dtype))
                c_in = width
            self.stages.append(blocks)

    def __call__(self, x: Tensor) -> list:
        h, w = x.shape[2], x.shape[3]
        if h % 32 or w % 32:
            raise GeometryError(f"input extent {h}x{w} must be divisible by 32")
        y = relu(batch_norm(conv2d(x, self.stem_conv), self.stem_bn))
        y = max_pool2d(y, 2, 2)
        feats = []
        for blocks in self.stages:
            for block in blocks:
                y = block(y)
            feats.append(y)
        return feats

    def bns(self):
        out = [self.stem_bn]
        for blocks in self.stages:
            for b in blocks:
                out.extend(b.bns())
        return out


# ---------------------------------------------------------------------------
# full model

@dataclass
class ModelVariant:
    tag: str
    main: BackboneConfig
    aux: Optional[BackboneConfig] = None
    decoder_width: int = 512
    num_classes: int = 6
    attention_reduction: int = 16
    sa_on_low: bool = False
    align_corners: bool = False

    def problems(self) -> list:
        out = []
        if self.tag not in VARIANT_TAGS:
            out.append(f"unknown variant tag {self.tag!r}; choose from {VARIANT_TAGS}")
            return out
        out.extend(self.main.problems())
        if self.tag in ("DFN", "mDFN"):
            if self.aux is not None:
                out.append(f"{self.tag} is single-path; aux backbone must be absent")
        else:
            if self.aux is None:
                out.append(f"{self.tag} needs an aux backbone")
            else:
                out.extend(self.aux.problems())
        if self.decoder_width < 1:
            out.append("decoder_width must be >= 1")
        if self.num_classes < 2:
            out.append("num_classes must be >= 2")
        if self.attention_reduction < 1:
            out.append("attention_reduction must be >= 1")
        return out

    @property
    def multipath(self) -> bool:
        return self.tag not in ("DFN", "mDFN")


def tiny_variant(tag: str, decoder_width: int = 64, num_classes: int = 6,
                 optical_channels: int = 3, aux_channels: int = 2,
                 stage_widths: Optional[tuple] = None,
                 attention_reduction: int = 16, **kwargs) -> ModelVariant:
    """Desk-scale variant: tiny backbones on both branches."""
    if tag == "mDFN":
        main = backbone_config("tiny", optical_channels + aux_channels,
                               stage_widths=stage_widths)
        aux = None
    elif tag == "DFN":
        main = backbone_config("tiny", optical_channels, stage_widths=stage_widths)
        aux = None
    else:
        main = backbone_config("tiny", optical_channels, stage_widths=stage_widths)
        aux = backbone_config("tiny", aux_channels, stage_widths=stage_widths)
    return ModelVariant(tag=tag, main=main, aux=aux, decoder_width=decoder_width,
                        num_classes=num_classes,
                        attention_reduction=attention_reduction, **kwargs)


def paper_variant(tag: str, num_classes: int = 6, optical_channels: int = 3,
                  aux_channels: int = 2) -> ModelVariant:
    """Full-scale configuration: resnet50-topology main, resnet18-topology aux."""
    if tag == "mDFN":
        main = backbone_config("resnet50-topology", optical_channels + aux_channels)
        aux = None
    elif tag == "DFN":
        main = backbone_config("resnet50-topology", optical_channels)
        aux = None
    else:
        main = backbone_config("resnet50-topology", optical_channels)
        aux = backbone_config("resnet18-topology", aux_channels)
    return ModelVariant(tag=tag, main=main, aux=aux, decoder_width=512,
                        num_classes=num_classes)


class SegModel:
    """A built variant: parameter store plus the forward wiring."""

    def __init__(self, variant: ModelVariant, seed: int = 0, dtype=np.float32):
        problems = variant.problems()
        if problems:
            raise ValidationError(problems)
        self.variant = variant
        self.dtype = dtype
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        r = variant.attention_reduction
        width = variant.decoder_width

        self.main = Backbone(self.store, "main", variant.main, rng, dtype)
        self.aux = None
        if variant.multipath:
            self.aux = Backbone(self.store, "aux", variant.aux, rng, dtype)

        fusion = _FUSION[variant.tag]
        self.fusion_kind = fusion
        self.fuse = []
        for i, stride in enumerate(STAGE_STRIDES):
            if fusion is None:
                self.fuse.append(None)
            elif fusion == "sum":
                self.fuse.append((
                    make_rrb(self.store, f"fuse{stride}.main_rrb",
                             variant.main.stage_widths[i], width, rng, dtype),
                    make_rrb(self.store, f"fuse{stride}.aux_rrb",
                             variant.aux.stage_widths[i], width, rng, dtype),
                ))
            else:
                self.fuse.append(make_mafb(self.store, f"fuse{stride}",
                                           variant.main.stage_widths[i],
                                           variant.aux.stage_widths[i],
                                           width, r, rng, dtype))

        top_channels = width if fusion is not None else variant.main.stage_widths[3]
        self.gc = make_global_context(self.store, "gc", top_channels, width, rng, dtype)

        merge = _MERGE[variant.tag]
        self.merge_kind = merge
        self.dec_in, self.dec_merge, self.dec_out, self.heads = [], [], [], []
        for i, stride in enumerate(STAGE_STRIDES):
            c_in = width if fusion is not None else variant.main.stage_widths[i]
            self.dec_in.append(make_rrb(self.store, f"dec{stride}.rrb_in",
                                        c_in, width, rng, dtype))
            if stride == 32:
                self.dec_merge.append(None)
            elif merge == "cab":
                self.dec_merge.append(make_cab(self.store, f"dec{stride}.merge",
                                               width, r, rng, dtype))
            else:
                self.dec_merge.append(make_rafb(self.store, f"dec{stride}.merge",
                                                width, r, rng, dtype))
            self.dec_out.append(make_rrb(self.store, f"dec{stride}.rrb_out",
                                         width, width, rng, dtype))
            self.heads.append(conv_layer(self.store, f"head{stride}",
                                         width, variant.num_classes, 1, rng, dtype=dtype))

        self._bns = list(self.main.bns())
        if self.aux is not None:
            self._bns.extend(self.aux.bns())
        for f in self.fuse:
            if isinstance(f, MAFBParams):
                self._bns.extend([f.rrb_main.bn, f.rrb_aux.bn])
            elif isinstance(f, tuple):
                self._bns.extend([f[0].bn, f[1].bn])
        for p in self.dec_in + self.dec_out:
            self._bns.append(p.bn)

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        for bn in self._bns:
            bn.mode = mode

    def encode(self, main_in: Tensor, aux_in: Optional[Tensor]):
        """Per-branch stage features (the multipath encoder contract)."""
        v = self.variant
        if v.tag == "DFN":
            if aux_in is not None:
                raise ContractError("DFN is single-path; aux input must be None")
            return self.main(main_in), None
        if v.tag == "mDFN":
            if aux_in is None:
                raise ContractError("mDFN stacks aux channels; aux input required")
            return self.main(concat_channels([main_in, aux_in])), None
        if aux_in is None:
            raise ContractError(f"{v.tag} has a multipath encoder; aux input required")
        return self.main(main_in), self.aux(aux_in)

    def fused_features(self, main_in: Tensor, aux_in: Optional[Tensor],
                       capture: Optional[dict] = None,
                       fusion_override: Optional[str] = None) -> list:
        main_feats, aux_feats = self.encode(main_in, aux_in)
        if self.fusion_kind is None:
            return main_feats
        fused = []
        for i, stride in enumerate(STAGE_STRIDES):
            f = self.fuse[i]
            kind = fusion_override or self.fusion_kind
            if isinstance(f, MAFBParams):
                if kind == "sum":
                    fused.append(add(rrb(main_feats[i], f.rrb_main),
                                     rrb(aux_feats[i], f.rrb_aux)))
                else:
                    fused.append(mafb_fuse(main_feats[i], aux_feats[i], f,
                                           capture=capture, tag=f"fuse{stride}"))
            else:
                fused.append(add(rrb(main_feats[i], f[0]), rrb(aux_feats[i], f[1])))
        return fused

    def forward(self, main_in: Tensor, aux_in: Optional[Tensor] = None,
                capture: Optional[dict] = None,
                fusion_override: Optional[str] = None) -> list:
        """Stage logits at input resolution, top-down: strides [32, 16, 8, 4].

        The last entry (stride 4, the finest decoder stage) is the
        prediction head; all four feed the deep-supervision loss.
        """
        v = self.variant
        fused = self.fused_features(main_in, aux_in, capture, fusion_override)
        logits = []
        d = None
        for i in range(3, -1, -1):
            stride = STAGE_STRIDES[i]
            low = rrb(fused[i], self.dec_in[i])
            if d is None:
                merged = add(low, global_context(fused[3], self.gc))
            else:
                high = bilinear_upsample(d, 2, v.align_corners)
                m = self.dec_merge[i]
                if isinstance(m, CABParams):
                    merged = cab_fuse(low, high, m, capture=capture, tag=f"dec{stride}.merge")
                else:
                    merged = rafb_fuse(low, high, m, sa_on_low=v.sa_on_low,
                                       capture=capture, tag=f"dec{stride}.merge")
            d = rrb(merged, self.dec_out[i])
            head = conv2d(d, self.heads[i])
            logits.append(bilinear_upsample(head, stride, v.align_corners))
        return logits

    __call__ = forward


def build_model(variant: ModelVariant, seed: int = 0, dtype=np.float32) -> SegModel:
    """Deterministic construction: same seed, bit-identical parameters."""
    return SegModel(variant, seed=seed, dtype=dtype)
