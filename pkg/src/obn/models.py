"""Network descriptions, construction, and parameter / FLOP accounting.

Two ResNet families are supported:

* ``ResNet<6n+2>`` (20, 32, 56, 110, ...): three stages of 16/32/64 channels
  with ``n`` basic blocks each and parameter-free zero-padding shortcuts.
* ``ResNet18`` / ``ResNet34``: four stages of 64/128/256/512 channels with
  1x1 projection shortcuts.

A name suffix ``-S<s>U<u>`` replaces the two convolutions of every
non-entry block of each stage by factorized convolutions over a basis with
``s`` shared and ``u`` unshared elements per block. ``s`` and ``u`` are given
for the first stage; wider stages scale both by their channel multiple. The
first block of each stage stays a plain block because it changes the input
geometry. A trailing ``‡`` gives each stage two bases, one per conv position.
"""
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisBlockGroup, ResidualBlock, check_rank
from .errors import ConfigError, NameParseError
from .nn import (BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d, Module, Parameter, PadShortcut,
                 ReLU, Sequential, SoftmaxCrossEntropy, Tape)

DUAL_MARK = "‡"


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    channels: int
    stride: int
    s: int = 0
    u: int = 0
    dual: bool = False
    tied: bool = False

    @property
    def shared_blocks(self):
        return self.blocks - 1 if (self.s or self.tied) else 0


@dataclass(frozen=True)
class NetworkSpec:
    depth: int
    stages: tuple
    s: int = 0
    u: int = 0
    dual: bool = False
    classes: int = 10
    in_channels: int = 3
    input_size: int = 32
    geometry: str = "cifar"
    shortcut: str = "pad"
    bn_order: str = "post_act"
    basis_bn: bool = True
    share_bn: bool = False
    tied: bool = False
    k: int = 3

    def __post_init__(self):
        prev = self.stages[0].channels
        for st in self.stages:
            if st.s:
                check_rank(self.k, st.channels, st.s + st.u)
        for a, b in zip(self.stages, self.stages[1:]):
            if b.channels < a.channels:
                raise ConfigError("stage channels must not shrink")
        if prev < 1:
            raise ConfigError("stem width must be positive")

    @property
    def name(self):
        out = f"ResNet{self.depth}"
        if self.s:
            out += f"-S{self.s}U{self.u}"
        if self.dual:
            out += DUAL_MARK
        return out

    @property
    def groups(self):
        """Number of basis-sharing groups (bases, counting both of a dual pair)."""
        return sum((2 if st.dual else 1) for st in self.stages if st.s and st.shared_blocks)

    @property
    def stem(self):
        if self.geometry == "imagenet":
            return dict(k=7, stride=2, pool=True)
        return dict(k=3, stride=1, pool=False)

    def with_ranks(self, s, u):
        return _make_spec(self.depth, s, u, self.dual, **self.options())

    def options(self):
        return dict(classes=self.classes, in_channels=self.in_channels, input_size=self.input_size,
                    geometry=self.geometry, bn_order=self.bn_order, basis_bn=self.basis_bn,
                    share_bn=self.share_bn, tied=self.tied)


def _family(depth):
    if depth in (18, 34):
        blocks = (2, 2, 2, 2) if depth == 18 else (3, 4, 6, 3)
        return blocks, (64, 128, 256, 512), "projection"
    if depth >= 8 and (depth - 2) % 6 == 0:
        n = (depth - 2) // 6
        return (n, n, n), (16, 32, 64), "pad"
    return None


def _make_spec(depth, s, u, dual, classes=10, in_channels=3, input_size=None, geometry="cifar",
               bn_order="post_act", basis_bn=True, share_bn=False, tied=False):
    fam = _family(depth)
    if fam is None:
        raise ConfigError(f"unsupported depth {depth}")
    blocks, widths, shortcut = fam
    if geometry not in ("cifar", "imagenet"):
        raise ConfigError(f"unknown geometry {geometry!r}")
    if geometry == "imagenet" and shortcut != "projection":
        raise ConfigError("imagenet geometry is only defined for ResNet18/34")
    if s < 0 or u < 0 or (u and not s):
        raise ConfigError(f"invalid ranks s={s}, u={u}")
    if dual and not s:
        raise ConfigError("the dual-basis variant needs s >= 1")
    if tied and s:
        raise ConfigError("tied full convolutions and factorized bases are exclusive")
    if bn_order not in ("post_act", "pre_act"):
        raise ConfigError(f"bn_order must be post_act or pre_act, got {bn_order!r}")
    stages = []
    for i, (n, t) in enumerate(zip(blocks, widths)):
        mult = t // widths[0]
        stages.append(StageSpec(n, t, 1 if i == 0 else 2, s * mult, u * mult, dual, tied))
    if input_size is None:
        input_size = 224 if geometry == "imagenet" else 32
    return NetworkSpec(depth, tuple(stages), s, u, dual, classes, in_channels, input_size, geometry,
                       shortcut, bn_order, basis_bn, share_bn, tied)


def spec_from_name(name, **options):
    """Parse ``ResNet<L>[-S<s>U<u>][‡]`` into a :class:`NetworkSpec`.

    Keyword options (``classes``, ``geometry``, ``bn_order``, ...) fill the
    fields the name does not carry.
    """
    pos = 0

    def digits(at):
        end = at
        while end < len(name) and name[end].isdigit():
            end += 1
        if end == at:
            raise NameParseError("expected digits", name, at)
        return int(name[at:end]), end

    if not name.startswith("ResNet"):
        raise NameParseError("expected 'ResNet'", name, 0)
    pos = len("ResNet")
    depth, pos_after = digits(pos)
    if _family(depth) is None:
        raise NameParseError(f"unsupported depth {depth}", name, pos)
    pos = pos_after
    s = u = 0
    if name.startswith("-S", pos):
        s_at = pos + 2
        s, pos = digits(s_at)
        if s < 1:
            raise NameParseError("shared element count must be >= 1", name, s_at)
        if not name.startswith("U", pos):
            raise NameParseError("expected 'U'", name, pos)
        u, pos = digits(pos + 1)
    dual = False
    if name.startswith(DUAL_MARK, pos):
        if not s:
            raise NameParseError("dual-basis mark needs an -S<s>U<u> part", name, pos)
        dual = True
        pos += len(DUAL_MARK)
    if pos != len(name):
        raise NameParseError(f"unexpected {name[pos]!r}", name, pos)
    return _make_spec(depth, s, u, dual, **options)


# --- counting -----------------------------------------------------------------


@dataclass
class CountReport:
    params: int
    flops: int
    layers: list = field(default_factory=list)  # (name, params, macs)

    def table(self):
        lines = [f"{'layer':40s} {'params':>12s} {'MACs':>14s}"]
        for name, p, f in self.layers:
            lines.append(f"{name:40s} {p:12d} {f:14d}")
        lines.append(f"{'total':40s} {self.params:12d} {self.flops:14d}")
        return "\n".join(lines)


def _out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def count(spec, input_size=None):
    """Exact parameter and MAC counts (1 MAC = 1 FLOP; convolutions and linear only)."""
    hw = spec.input_size if input_size is None else input_size
    k = spec.k
    layers = []

    def add(name, params, macs):
        layers.append((name, int(params), int(macs)))

    st = spec.stem
    c0 = spec.stages[0].channels
    hw = _out(hw, st["k"], st["stride"], st["k"] // 2)
    add("stem.conv", st["k"] ** 2 * spec.in_channels * c0, st["k"] ** 2 * spec.in_channels * c0 * hw * hw)
    add("stem.bn", 2 * c0, 0)
    if st["pool"]:
        hw = _out(hw, 3, 2, 1)
    s_in = c0
    for g, stage in enumerate(spec.stages):
        t = stage.channels
        hw = _out(hw, k, stage.stride, k // 2)
        area = hw * hw
        pre = f"stage{g}"
        add(f"{pre}.entry.conv1", k * k * s_in * t, k * k * s_in * t * area)
        add(f"{pre}.entry.conv2", k * k * t * t, k * k * t * t * area)
        add(f"{pre}.entry.bn", 4 * t, 0)
        if (s_in != t or stage.stride != 1) and spec.shortcut == "projection":
            add(f"{pre}.entry.shortcut", s_in * t + 2 * t, s_in * t * area)
        nb = stage.shared_blocks
        if stage.s and nb:
            r = stage.s + stage.u
            n_bases = 2 if stage.dual else 1
            add(f"{pre}.bases", n_bases * stage.s * k * k * t, 0)
            if spec.basis_bn and spec.share_bn:
                add(f"{pre}.bases.bn", n_bases * 2 * r, 0)
            for b in range(nb):
                for c in (1, 2):
                    unit = k * k * t * r + r * t
                    p = stage.u * k * k * t + r * t + 2 * t
                    if spec.basis_bn and not spec.share_bn:
                        p += 2 * r
                    add(f"{pre}.block{b}.conv{c}", p, unit * area)
        elif stage.tied and nb:
            add(f"{pre}.tied", 2 * k * k * t * t, 0)
            for b in range(nb):
                add(f"{pre}.block{b}", 4 * t, 2 * k * k * t * t * area)
        else:
            for b in range(stage.blocks - 1):
                add(f"{pre}.block{b}", 2 * k * k * t * t + 4 * t, 2 * k * k * t * t * area)
        s_in = t
    add("fc", s_in * spec.classes + spec.classes, s_in * spec.classes)
    return CountReport(sum(p for _, p, _ in layers), sum(f for _, _, f in layers), layers)


def count_params(spec):
    return count(spec).params


def count_flops(spec, input_size=None):
    return count(spec, input_size).flops


# --- construction -------------------------------------------------------------


class PlainGroup(Module):
    """Residual stage of ordinary blocks; ``blocks[0]`` is the entry block."""

    def __init__(self, blocks):
        super().__init__()
        self.blocks = list(blocks)
        for i, b in enumerate(self.blocks):
            setattr(self, f"block{i}", b)

    def forward(self, x, tape=None):
        for b in self.blocks:
            x = b.forward(x, tape)
        return x

    def backward(self, grad, tape):
        for b in reversed(self.blocks):
            grad = b.backward(grad, tape)
        return grad


class Network(Module):
    def __init__(self, spec, stem, groups, fc, dtype):
        super().__init__()
        object.__setattr__(self, "spec", spec)
        self.dtype = np.dtype(dtype)
        self.stem = stem
        self.groups = list(groups)
        for i, g in enumerate(self.groups):
            setattr(self, f"stage{i}", g)
        self.pool = GlobalAvgPool()
        self.fc = fc
        self.criterion = SoftmaxCrossEntropy()

    def forward(self, x, tape=None):
        x = self.stem.forward(x.astype(self.dtype, copy=False), tape)
        for g in self.groups:
            x = g.forward(x, tape)
        return self.fc.forward(self.pool.forward(x, tape), tape)

    def backward(self, grad, tape):
        grad = self.pool.backward(self.fc.backward(grad, tape), tape)
        for g in reversed(self.groups):
            grad = g.backward(grad, tape)
        return self.stem.backward(grad, tape)

    def loss_and_backward(self, x, labels):
        """One forward/backward pass accumulating parameter gradients; returns (loss, logits)."""
        tape = Tape()
        logits = self.forward(x, tape)
        loss = self.criterion.forward(logits, labels, tape)
        self.backward(self.criterion.backward(np.asarray(1.0, dtype=logits.dtype), tape), tape)
        assert len(tape) == 0
        return float(loss), logits

    def bases(self):
        """``[(basis_id, FilterBasis)]`` for every shared basis, in stage order."""
        out = []
        for i, g in enumerate(self.groups):
            if isinstance(g, BasisBlockGroup):
                out.append((f"stage{i}.basis_a", g.basis_a))
                if g.dual:
                    out.append((f"stage{i}.basis_b", g.basis_b))
        return out

    def basis_groups(self):
        return [(i, g) for i, g in enumerate(self.groups) if isinstance(g, BasisBlockGroup)]

    def ortho_penalty(self):
        return sum(b.penalty() for _, b in self.bases())

    def add_ortho_grad(self, lam):
        for _, b in self.bases():
            b.add_penalty_grad(lam)


def _conv_bn_relu(conv, channels, bn_order, dtype):
    if bn_order == "post_act":
        return [conv, ReLU(), BatchNorm2d(channels, dtype)]
    return [conv, BatchNorm2d(channels, dtype), ReLU()]


def build(spec, seed=0, dtype=np.float32, basis_init="orthogonal"):
    """Construct a runnable :class:`Network`; deterministic given ``seed``."""
    if isinstance(spec, str):
        spec = spec_from_name(spec)
    rng = np.random.default_rng(seed)
    k = spec.k
    st = spec.stem
    c0 = spec.stages[0].channels
    stem_layers = _conv_bn_relu(Conv2d(spec.in_channels, c0, st["k"], st["stride"], rng=rng, dtype=dtype),
                                c0, spec.bn_order, dtype)
    if st["pool"]:
        stem_layers.append(MaxPool2d())
    stem = Sequential(*stem_layers)
    groups = []
    s_in = c0
    for stage in spec.stages:
        t = stage.channels
        shortcut = None
        if s_in != t or stage.stride != 1:
            if spec.shortcut == "pad":
                shortcut = PadShortcut(s_in, t, stage.stride)
            else:
                shortcut = Sequential(Conv2d(s_in, t, 1, stage.stride, 0, rng=rng, dtype=dtype),
                                      BatchNorm2d(t, dtype))
        entry = ResidualBlock(Conv2d(s_in, t, k, stage.stride, rng=rng, dtype=dtype),
                              Conv2d(t, t, k, 1, rng=rng, dtype=dtype), t, shortcut, spec.bn_order, dtype)
        nb = stage.shared_blocks
        if stage.s and nb:
            group = BasisBlockGroup(t, nb, stage.s, stage.u, k, stage.dual, entry, spec.bn_order,
                                    spec.basis_bn, spec.share_bn, rng, dtype, basis_init)
        else:
            blocks = [entry]
            tied = None
            if stage.tied and nb:
                tied = [Parameter(Conv2d(t, t, k, rng=rng, dtype=dtype).weight.data) for _ in range(2)]
            for _ in range(stage.blocks - 1):
                if tied:
                    c1 = Conv2d(t, t, k, weight=tied[0])
                    c2 = Conv2d(t, t, k, weight=tied[1])
                else:
                    c1 = Conv2d(t, t, k, rng=rng, dtype=dtype)
                    c2 = Conv2d(t, t, k, rng=rng, dtype=dtype)
                blocks.append(ResidualBlock(c1, c2, t, None, spec.bn_order, dtype))
            group = PlainGroup(blocks)
        groups.append(group)
        s_in = t
    fc = Linear(s_in, spec.classes, rng=rng, dtype=dtype)
    return Network(spec, stem, groups, fc, dtype)


def build_from_name(name, seed=0, dtype=np.float32, **options):
    return build(spec_from_name(name, **options), seed, dtype)
