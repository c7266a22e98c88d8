"""ResNet-18/34/50/101/152 in normal and dilated form.

The dilated form changes only the first unit of the last residual stage
(stage 4; the stem counts as block one, so this is the "fifth block"):
its stride drops from 2 to 1, including on the projection shortcut, and
its leading convolutions get dilation 3. Basic variants dilate the two 3x3
convs of that unit; bottleneck variants record dilation 3 on the first three
convs of the unit, which only matters for the 3x3 one. Dilation adds no
weights, so both forms have identical parameter inventories.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from . import autodiff as ad
from .convolution import ConvSpec, PoolSpec, conv_param_count, receptive_field_of_network
from .rng import stream
from .tensor import RunningStats, ShapeError

VARIANTS = {
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    50: ("bottleneck", (3, 4, 6, 3)),
    101: ("bottleneck", (3, 4, 23, 3)),
    152: ("bottleneck", (3, 8, 36, 3)),
}
STAGE_DILATION = 3
EXPANSION = 4


class UnknownVariantError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    """One residual unit."""
    kind: Literal["basic", "bottleneck"]
    in_channels: int
    channels: int
    stride: int = 1
    dilation_per_conv: tuple[int, ...] = (1, 1)
    shortcut: Literal["identity", "projection"] = "identity"

    def __post_init__(self):
        n = 2 if self.kind == "basic" else 3
        if len(self.dilation_per_conv) != n:
            raise ValueError(f"{self.kind} unit needs {n} dilation entries, got {self.dilation_per_conv}")
        if min(self.dilation_per_conv) < 1:
            raise ValueError("dilation must be >= 1")

    @property
    def out_channels(self):
        return self.channels * (EXPANSION if self.kind == "bottleneck" else 1)

    def convs(self) -> list[tuple[str, int, int, ConvSpec]]:
        """Main-path convs as (name, in_channels, out_channels, spec)."""
        d = self.dilation_per_conv
        if self.kind == "basic":
            return [
                ("conv1", self.in_channels, self.channels, ConvSpec.square(3, self.stride, d[0], d[0])),
                ("conv2", self.channels, self.channels, ConvSpec.square(3, 1, d[1], d[1])),
            ]
        return [
            ("conv1", self.in_channels, self.channels, ConvSpec.square(1, 1, 0, d[0])),
            ("conv2", self.channels, self.channels, ConvSpec.square(3, self.stride, d[1], d[1])),
            ("conv3", self.channels, self.out_channels, ConvSpec.square(1, 1, 0, d[2])),
        ]

    def shortcut_spec(self) -> ConvSpec | None:
        if self.shortcut == "identity":
            return None
        return ConvSpec.square(1, self.stride, 0, 1)


@dataclass(frozen=True)
class ArchSpec:
    variant: int | None
    dilated: bool
    stem: ConvSpec
    stem_channels: int
    pool: PoolSpec | None
    stages: tuple[tuple[BlockSpec, ...], ...]
    class_count: int = 8
    batch_norm: bool = True
    in_channels: int = 3
    bottleneck_dilation: str = "unit"

    @property
    def feature_channels(self):
        return self.stages[-1][-1].out_channels

    def main_path(self) -> list[tuple[str, ConvSpec | PoolSpec]]:
        layers: list[tuple[str, ConvSpec | PoolSpec]] = [("stem.conv", self.stem)]
        if self.pool is not None:
            layers.append(("stem.pool", self.pool))
        for s, stage in enumerate(self.stages, 1):
            for u, block in enumerate(stage):
                for name, _, _, spec in block.convs():
                    layers.append((f"stage{s}.{u}.{name}", spec))
        return layers


def arch_spec(variant: int, dilated=False, class_count=8, width=1.0, base_width=None,
              batch_norm=True, bottleneck_dilation="unit") -> ArchSpec:
    """Declarative description of a ResNet variant.

    ``width`` scales every channel count (64 * width at the stem);
    ``base_width`` sets the stem width directly and wins over ``width``.
    ``bottleneck_dilation`` picks how bottleneck variants place dilation:
    ``"unit"`` dilates the first three convs of the first stage-4 unit,
    ``"spread"`` dilates the 3x3 conv of each of the first three stage-4 units.
    """
    if variant not in VARIANTS:
        raise UnknownVariantError(
            f"unknown ResNet variant {variant!r}; valid variants: {', '.join(map(str, VARIANTS))}")
    if bottleneck_dilation not in ("unit", "spread"):
        raise ValueError(f"bottleneck_dilation must be 'unit' or 'spread', got {bottleneck_dilation!r}")
    kind, counts = VARIANTS[variant]
    base = base_width if base_width is not None else max(1, int(round(64 * width)))
    in_ch = base
    stages = []
    for s, count in enumerate(counts):
        channels = base * 2 ** s
        units = []
        for u in range(count):
            stride = 2 if (u == 0 and s > 0) else 1
            dil = [1, 1] if kind == "basic" else [1, 1, 1]
            if dilated and s == 3:
                if u == 0:
                    stride = 1
                if kind == "basic" and u == 0:
                    dil = [STAGE_DILATION, STAGE_DILATION]
                elif kind == "bottleneck" and bottleneck_dilation == "unit" and u == 0:
                    dil = [STAGE_DILATION] * 3
                elif kind == "bottleneck" and bottleneck_dilation == "spread" and u < 3:
                    dil[1] = STAGE_DILATION
            out_ch = channels * (EXPANSION if kind == "bottleneck" else 1)
            needs_proj = (u == 0) and (s > 0 or in_ch != out_ch)
            units.append(BlockSpec(kind, in_ch, channels, stride, tuple(dil),
                                   "projection" if needs_proj else "identity"))
            in_ch = out_ch
        stages.append(tuple(units))
    return ArchSpec(
        variant=variant,
        dilated=dilated,
        stem=ConvSpec.square(7, 2, 3, 1),
        stem_channels=base,
        pool=PoolSpec(3, 2, 1),
        stages=tuple(stages),
        class_count=class_count,
        batch_norm=batch_norm,
        bottleneck_dilation=bottleneck_dilation,
    )


def miniature_arch(stage_channels=(4, 8), dilations=(1, 2), class_count=3, stem_channels=4,
                   batch_norm=True) -> ArchSpec:
    """Small basic-block network with a 3x3 stride-1 stem and no pooling.

    Stage ``s`` has one unit; stages after the first stride by 2 unless
    their dilation is above 1, mirroring the dilated-stage rule.
    """
    stages = []
    in_ch = stem_channels
    for s, (ch, l) in enumerate(zip(stage_channels, dilations)):
        stride = 1 if (s == 0 or l > 1) else 2
        proj = in_ch != ch or stride != 1
        stages.append((BlockSpec("basic", in_ch, ch, stride, (l, l), "projection" if proj else "identity"),))
        in_ch = ch
    return ArchSpec(None, any(l > 1 for l in dilations), ConvSpec.square(3, 1, 1, 1), stem_channels,
                    None, tuple(stages), class_count, batch_norm)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass
class Network:
    arch: ArchSpec
    params: dict[str, np.ndarray]
    stats: dict[str, RunningStats] = field(default_factory=dict)
    eps: float = 1e-5

    @property
    def class_count(self):
        return self.arch.class_count

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def tape_params(self, tape: ad.Tape) -> dict[str, ad.Var]:
        return {name: tape.param(value, name) for name, value in self.params.items()}

    def astype(self, dtype) -> "Network":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        stats = {k: RunningStats(s.mean.astype(dtype), s.var.astype(dtype), s.momentum)
                 for k, s in self.stats.items()}
        return Network(self.arch, params, stats, self.eps)

    def copy(self) -> "Network":
        return self.astype(self.dtype)


def _layer_inventory(arch: ArchSpec):
    """(name, in_channels, out_channels, ConvSpec, has_bn) for every conv, in init order."""
    convs = [("stem.conv", arch.in_channels, arch.stem_channels, arch.stem, "stem.bn")]
    for s, stage in enumerate(arch.stages, 1):
        for u, block in enumerate(stage):
            prefix = f"stage{s}.{u}"
            for k, (name, cin, cout, spec) in enumerate(block.convs(), 1):
                convs.append((f"{prefix}.{name}", cin, cout, spec, f"{prefix}.bn{k}"))
            sc = block.shortcut_spec()
            if sc is not None:
                convs.append((f"{prefix}.shortcut.conv", block.in_channels, block.out_channels, sc,
                              f"{prefix}.shortcut.bn"))
    return convs


def build(variant, dilated=False, class_count=8, seed=0, width=1.0, base_width=None,
          batch_norm=True, bottleneck_dilation="unit", dtype=np.float32) -> Network:
    arch = arch_spec(variant, dilated, class_count, width, base_width, batch_norm, bottleneck_dilation)
    return build_from_arch(arch, seed, dtype)


def build_from_arch(arch: ArchSpec, seed=0, dtype=np.float32) -> Network:
    """Kaiming fan-in init for convs, zero biases and shifts, unit scales."""
    rng = stream(seed, "init")
    params: dict[str, np.ndarray] = {}
    stats: dict[str, RunningStats] = {}
    for name, cin, cout, spec, bn in _layer_inventory(arch):
        fan_in = cin * spec.kernel_h * spec.kernel_w
        w = rng.standard_normal((cout, cin, spec.kernel_h, spec.kernel_w)) * np.sqrt(2.0 / fan_in)
        params[f"{name}.weight"] = w.astype(dtype)
        if arch.batch_norm:
            params[f"{bn}.gamma"] = np.ones(cout, dtype=dtype)
            params[f"{bn}.beta"] = np.zeros(cout, dtype=dtype)
            stats[bn] = RunningStats(np.zeros(cout, dtype=dtype), np.ones(cout, dtype=dtype))
        else:
            params[f"{name}.bias"] = np.zeros(cout, dtype=dtype)
    d = arch.feature_channels
    params["fc.weight"] = (rng.standard_normal((d, arch.class_count)) * np.sqrt(1.0 / d)).astype(dtype)
    params["fc.bias"] = np.zeros(arch.class_count, dtype=dtype)
    return Network(arch, params, stats)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    logits: np.ndarray
    activations: dict[str, np.ndarray] = field(default_factory=dict)
    input_hw: tuple[int, int] | None = None


LAST_CONV = "last_conv"


def _conv_bn(net, p, name, bn, spec, x, mode, relu):
    if net.arch.batch_norm:
        y = ad.conv2d(x, p[f"{name}.weight"], None, spec)
        y = ad.batch_norm(y, p[f"{bn}.gamma"], p[f"{bn}.beta"], net.stats[bn], mode, net.eps)
    else:
        y = ad.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], spec)
    return ad.relu(y) if relu else y


def forward_on_tape(net: Network, tape: ad.Tape, p: dict[str, ad.Var], x: ad.Var, mode="infer"):
    """Run the network on ``tape``. Returns ``(logits, activations)`` as Vars."""
    arch = net.arch
    if x.value.ndim != 4 or x.value.shape[1] != arch.in_channels:
        raise ShapeError(f"input must have shape (N, {arch.in_channels}, H, W), got {x.value.shape}")
    acts: dict[str, ad.Var] = {}
    h = _conv_bn(net, p, "stem.conv", "stem.bn", arch.stem, x, mode, relu=True)
    acts["stem"] = h
    if arch.pool is not None:
        h = ad.max_pool2d(h, arch.pool.window, arch.pool.stride, arch.pool.pad)
        acts["stem.pool"] = h
    for s, stage in enumerate(arch.stages, 1):
        for u, block in enumerate(stage):
            prefix = f"stage{s}.{u}"
            convs = block.convs()
            y = h
            for k, (name, _, _, spec) in enumerate(convs, 1):
                y = _conv_bn(net, p, f"{prefix}.{name}", f"{prefix}.bn{k}", spec, y, mode,
                             relu=k < len(convs))
            sc = block.shortcut_spec()
            if sc is None:
                short = h
            else:
                short = _conv_bn(net, p, f"{prefix}.shortcut.conv", f"{prefix}.shortcut.bn", sc, h, mode,
                                 relu=False)
            h = ad.relu(ad.add(y, short))
            acts[prefix] = h
    acts[LAST_CONV] = h
    pooled = ad.flatten(ad.global_avg_pool2d(h))
    logits = ad.affine(pooled, p["fc.weight"], p["fc.bias"])
    return logits, acts


def forward(net: Network, images, capture=False, mode="infer") -> ForwardTrace:
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != net.arch.in_channels:
        raise ShapeError(f"input must have shape (N, {net.arch.in_channels}, H, W), got {images.shape}")
    tape = ad.Tape(record=False)
    p = {name: tape.constant(v, name) for name, v in net.params.items()}
    logits, acts = forward_on_tape(net, tape, p, tape.constant(images.astype(net.dtype, copy=False)), mode)
    activations = {k: v.value for k, v in acts.items()} if capture else {}
    return ForwardTrace(logits.value, activations, tuple(images.shape[2:]))


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

@dataclass
class LayerRow:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    dilation: int
    effective_kernel: int
    padding: int
    params: int
    output: tuple[int, int]
    receptive_field: int
    jump: int


@dataclass
class AuditReport:
    variant: int | None
    dilated: bool
    input_size: int
    rows: list[LayerRow]
    conv_count: int
    shortcut_conv_count: int
    fc_count: int
    params: int

    @property
    def final_rf(self):
        return self.rows_main()[-1].receptive_field

    @property
    def final_extent(self):
        return self.rows_main()[-1].output

    def rows_main(self):
        return [r for r in self.rows if r.kind in ("conv", "pool")]


def audit(net_or_arch, input_size=224) -> AuditReport:
    """Layer inventory with per-layer geometry along the main path."""
    if isinstance(net_or_arch, Network):
        arch = net_or_arch.arch
        params = net_or_arch.param_count()
    else:
        arch = net_or_arch
        params = None
    main = arch.main_path()
    geo = receptive_field_of_network([spec for _, spec in main], (input_size, input_size))
    inventory = {name: (cin, cout) for name, cin, cout, _, _ in _layer_inventory(arch)}
    bn_params = 2 if arch.batch_norm else 0
    rows = []
    for (name, spec), g in zip(main, geo):
        if isinstance(spec, PoolSpec):
            rows.append(LayerRow(name, "pool", 0, 0, spec.window, spec.stride, 1, spec.window, spec.pad, 0,
                                 (g.output_h, g.output_w), g.receptive_field[0], g.jump[0]))
            continue
        cin, cout = inventory[name]
        n = conv_param_count(cin, cout, spec, bias=not arch.batch_norm) + bn_params * cout
        rows.append(LayerRow(name, "conv", cin, cout, spec.kernel_h, spec.stride_h, spec.dilation,
                             spec.effective_kernel[0], spec.pad_h, n, (g.output_h, g.output_w),
                             g.receptive_field[0], g.jump[0]))
    shortcut_rows = []
    for name, cin, cout, spec, _ in _layer_inventory(arch):
        if ".shortcut." in name:
            n = conv_param_count(cin, cout, spec, bias=not arch.batch_norm) + bn_params * cout
            shortcut_rows.append(LayerRow(name, "shortcut", cin, cout, 1, spec.stride_h, 1, 1, 0, n,
                                          (0, 0), 0, 0))
    d = arch.feature_channels
    fc = LayerRow("fc", "fc", d, arch.class_count, 0, 0, 0, 0, 0, d * arch.class_count + arch.class_count,
                  (1, 1), 0, 0)
    all_rows = rows + shortcut_rows + [fc]
    total = params if params is not None else sum(r.params for r in all_rows)
    return AuditReport(arch.variant, arch.dilated, input_size, all_rows,
                       conv_count=sum(r.kind == "conv" for r in rows),
                       shortcut_conv_count=len(shortcut_rows), fc_count=1, params=total)


def undilated(arch: ArchSpec, reference: ArchSpec) -> ArchSpec:
    """``arch`` with every dilation set to 1 and strides copied from ``reference``."""
    stages = tuple(
        tuple(replace(b, stride=r.stride, dilation_per_conv=(1,) * len(b.dilation_per_conv))
              for b, r in zip(stage, ref_stage))
        for stage, ref_stage in zip(arch.stages, reference.stages))
    return replace(arch, stages=stages, dilated=False)


# ---------------------------------------------------------------------------
# DRN1 model files
# ---------------------------------------------------------------------------
#
# All integers are u32 little-endian:
#   b"DRN1" | version | variant | dilated flag | class count | tensor count
# then per tensor:
#   name length | name (utf-8) | rank | extents... | float32 LE values
# The dilated flag is 0 (normal), 1 (dilated, "unit" placement) or
# 2 (dilated, "spread" placement). Tensors are the parameters followed by the
# batch-norm running statistics (``<bn>.running_mean`` / ``<bn>.running_var``).

MAGIC = b"DRN1"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """A model file is truncated, has the wrong magic/version or mismatched tensors."""


def _expected_tensors(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for name, cin, cout, spec, bn in _layer_inventory(arch):
        shapes[f"{name}.weight"] = (cout, cin, spec.kernel_h, spec.kernel_w)
        if arch.batch_norm:
            shapes[f"{bn}.gamma"] = (cout,)
            shapes[f"{bn}.beta"] = (cout,)
        else:
            shapes[f"{name}.bias"] = (cout,)
    shapes["fc.weight"] = (arch.feature_channels, arch.class_count)
    shapes["fc.bias"] = (arch.class_count,)
    if arch.batch_norm:
        for _, _, cout, _, bn in _layer_inventory(arch):
            shapes[f"{bn}.running_mean"] = (cout,)
            shapes[f"{bn}.running_var"] = (cout,)
    return shapes


def dumps(net: Network) -> bytes:
    arch = net.arch
    if arch.variant not in VARIANTS:
        raise ValueError("only the standard variants can be serialized")
    flag = 0 if not arch.dilated else (1 if arch.bottleneck_dilation == "unit" else 2)
    tensors = list(net.params.items())
    for bn, st in net.stats.items():
        tensors += [(f"{bn}.running_mean", st.mean), (f"{bn}.running_var", st.var)]
    out = [MAGIC, struct.pack("<5I", FORMAT_VERSION, arch.variant, flag, arch.class_count, len(tensors))]
    for name, value in tensors:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<{1 + value.ndim}I", value.ndim, *value.shape))
        out.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(out)


def loads(data: bytes) -> Network:
    """Parse a DRN1 byte string back into a float32 Network."""
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ModelFormatError(f"truncated model file at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def u32(count=1):
        vals = struct.unpack(f"<{count}I", take(4 * count))
        return vals if count > 1 else vals[0]

    if bytes(take(4)) != MAGIC:
        raise ModelFormatError("bad magic: not a DRN1 model file")
    version, variant, flag, class_count, count = u32(5)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    if variant not in VARIANTS:
        raise ModelFormatError(f"unknown variant id {variant}")
    if flag not in (0, 1, 2):
        raise ModelFormatError(f"bad dilated flag {flag}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            name = bytes(take(u32())).decode("utf-8")
        except UnicodeDecodeError:
            raise ModelFormatError("tensor name is not valid utf-8") from None
        rank = u32()
        if rank > 8:
            raise ModelFormatError(f"tensor {name!r} has implausible rank {rank}")
        shape = tuple(u32(rank)) if rank > 1 else ((u32(),) if rank == 1 else ())
        n = int(np.prod(shape, dtype=np.int64))
        if name in tensors:
            raise ModelFormatError(f"duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(view):
        raise ModelFormatError(f"{len(view) - pos} trailing bytes after the last tensor")
    stem = tensors.get("stem.conv.weight")
    if stem is None or stem.ndim != 4:
        raise ModelFormatError("missing stem.conv.weight")
    arch = arch_spec(variant, dilated=flag > 0, class_count=class_count, base_width=stem.shape[0],
                     batch_norm="stem.bn.gamma" in tensors,
                     bottleneck_dilation="spread" if flag == 2 else "unit")
    expected = _expected_tensors(arch)
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))[:3]
        extra = sorted(set(tensors) - set(expected))[:3]
        raise ModelFormatError(f"tensor set mismatch (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ModelFormatError(f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
    params = {k: v for k, v in tensors.items() if not k.endswith((".running_mean", ".running_var"))}
    stats = {k[:-len(".running_mean")]: RunningStats(v, tensors[k[:-len(".running_mean")] + ".running_var"])
             for k, v in tensors.items() if k.endswith(".running_mean")}
    return Network(arch, params, stats)


def save_model(net: Network, path):
    from .data import write_bytes_atomic
    write_bytes_atomic(path, dumps(net))


def load_model(path) -> Network:
    from pathlib import Path
    return loads(Path(path).read_bytes())
