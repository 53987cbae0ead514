"""C3D, P3D-A and rC3D classifiers, the depth U-Net, its critic and stream fusion."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ops
from .blocks import DeconvBlock, DOConv, P3DBlockA, RC3DBlock, SelfAttention2d, stack_pool, stack_pool_streams
from .flow import FarnebackParams, motion_image
from .nn import Activation, ConvLayer, Dense, Module
from .tensor import DTYPE, InvalidArgument, Tensor, no_grad

STREAMS = ("rgb", "gdepth", "motion")
STREAM_CHANNELS = {"rgb": 3, "gdepth": 1, "motion": 3}
CLASS_COUNT = 16


class ConfigError(ValueError):
    """A model or run configuration that cannot be satisfied."""


@dataclass(frozen=True)
class ScaleProfile:
    """Stage widths and input geometry for one network scale."""

    name: str
    stages: tuple[tuple[int, ...], ...]
    input_size: int
    frames: int = 3
    head_width: int = 256
    generator_widths: tuple[int, ...] = (8, 16, 16, 32, 32)
    critic_widths: tuple[int, ...] = (8, 16, 16)
    critic_dropout: float = 0.1

    def __post_init__(self):
        flat = [c for stage in self.stages for c in stage]
        if not flat or any(c < 1 for c in flat) or any(not s for s in self.stages):
            raise InvalidArgument(f"profile {self.name!r}: filter counts must be positive")
        widest = flat.index(max(flat))
        if any(b < a for a, b in zip(flat[:widest], flat[1:widest + 1])):
            raise InvalidArgument(f"profile {self.name!r}: filter counts must not decrease before the widest stage")
        if len(self.generator_widths) != 5 or len(self.critic_widths) != 3:
            raise InvalidArgument("generator needs 5 widths and critic 3")

    @property
    def filters(self) -> tuple[int, ...]:
        return tuple(c for stage in self.stages for c in stage)


PROFILES = {
    "paper": ScaleProfile("paper", ((64,), (128,), (256, 256), (512, 512), (512, 512)),
                          input_size=112, head_width=4096,
                          generator_widths=(64, 64, 128, 256, 512), critic_widths=(64, 128, 256)),
    "toy": ScaleProfile("toy", ((8,), (16,), (32, 32), (64, 64)), input_size=32),
}


def get_profile(name: str, **overrides) -> ScaleProfile:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return replace(PROFILES[name], **overrides) if overrides else PROFILES[name]


# ---------------------------------------------------------------------------
# graph container and small stateless layers

class NetworkGraph(Module):
    """Ordered blocks with a parameter registry and an input signature.

    The default forward runs the blocks in order; networks with skips or
    several inputs override it.
    """

    def __init__(self, name: str, blocks: Sequence[tuple[str, Module]], input_signature: tuple,
                 class_count: int = CLASS_COUNT):
        super().__init__()
        self.name = name
        self.block_names = []
        for bname, block in blocks:
            setattr(self, bname, block)
            self.block_names.append(bname)
        self.input_signature = tuple(input_signature)
        self.class_count = class_count

    def blocks(self) -> list[tuple[str, Module]]:
        return [(n, getattr(self, n)) for n in self.block_names]

    def registry(self):
        return self.assign_names()

    def forward(self, x: Tensor) -> Tensor:
        for _, block in self.blocks():
            x = block(x)
        return x


class Lambda(Module):
    def __init__(self, fn: Callable[[Tensor], Tensor], label: str):
        super().__init__()
        self.fn = fn
        self.label = label

    def forward(self, x):
        return self.fn(x)

    def __repr__(self):
        return f"Lambda({self.label})"


class ConvAct(Module):
    def __init__(self, conv: ConvLayer, act: Activation):
        super().__init__()
        self.conv = conv
        self.act = act

    def forward(self, x):
        return self.act(self.conv(x))


class DenseAct(Module):
    def __init__(self, dense: Dense, act: Activation | None):
        super().__init__()
        self.fc = dense
        self.act = act

    def forward(self, x):
        y = self.fc(x)
        return self.act(y) if self.act is not None else y


def _pool_window(t: int, first: bool) -> tuple[int, int, int]:
    return (1, 2, 2) if first else (min(2, t), 2, 2)


def _after_pool(ext, window) -> tuple[int, int, int]:
    return tuple((n - k) // k + 1 for n, k in zip(ext, window))


def _check_spatial(stage: str, ext) -> None:
    if min(ext) < 1:
        raise InvalidArgument(f"{stage}: extents {tuple(ext)} became non-positive")


# ---------------------------------------------------------------------------
# classifier backbones

def _c3d_like(kind: str, profile: ScaleProfile, rng: np.random.Generator, act: Activation,
              in_ch: int, frames: int, size: int) -> NetworkGraph:
    blocks: list[tuple[str, Module]] = []
    ext = (frames, size, size)
    c_prev = in_ch
    for si, stage in enumerate(profile.stages):
        for ci, c in enumerate(stage):
            name = f"stage{si}_{ci}"
            if kind == "c3d":
                blocks.append((name, ConvAct(ConvLayer(c_prev, c, 3, rng, padding=1, slope=act.slope), act)))
            else:
                blocks.append((name, P3DBlockA(c_prev, c, rng, act=act)))
            c_prev = c
        window = _pool_window(ext[0], si == 0)
        if ext[1] < 2 or ext[2] < 2:
            raise InvalidArgument(f"stage{si}: spatial extents {ext[1:]} too small to pool")
        ext = _after_pool(ext, window)
        _check_spatial(f"stage{si}", ext)
        blocks.append((f"pool{si}", Lambda(lambda x, w=window: ops.pool3d(x, "max", w, w), f"maxpool{window}")))
    feat = c_prev * int(np.prod(ext))
    w = profile.head_width
    blocks += [
        ("flatten", Lambda(ops.flatten, "flatten")),
        ("fc6", DenseAct(Dense(feat, w, rng, act.slope), act)),
        ("fc7", DenseAct(Dense(w, w, rng, act.slope), act)),
        ("fc8", DenseAct(Dense(w, CLASS_COUNT, rng, act.slope), None)),
    ]
    net = NetworkGraph(kind, blocks, (in_ch, frames, size, size))
    net.assign_names()
    return net


def build_c3d(profile: ScaleProfile, rng: np.random.Generator, act: Activation = Activation(),
              size: int | None = None) -> NetworkGraph:
    """Plain 3x3x3 conv stages, spatial-only first pool, then (2, 2, 2) pools."""
    return _c3d_like("c3d", profile, rng, act, 3, profile.frames, size or profile.input_size)


def build_p3da(profile: ScaleProfile, rng: np.random.Generator, act: Activation = Activation(),
               size: int | None = None) -> NetworkGraph:
    """C3D layout with every conv replaced by a pseudo-3D block A."""
    return _c3d_like("p3da", profile, rng, act, 3, profile.frames, size or profile.input_size)


def rc3d_trunk(profile: ScaleProfile, rng: np.random.Generator, in_ch: int, frames: int, size: int,
               act: Activation = Activation(), name: str = "rc3d_trunk") -> NetworkGraph:
    """rC3D stages; every stage but the last ends in a spatially pooled block."""
    blocks: list[tuple[str, Module]] = []
    ext = (frames, size, size)
    c_prev = in_ch
    last_stage = len(profile.stages) - 1
    for si, stage in enumerate(profile.stages):
        for ci, c in enumerate(stage):
            pool = si < last_stage and ci == len(stage) - 1
            if pool:
                if ext[1] < 2 or ext[2] < 2:
                    raise InvalidArgument(f"stage{si}: spatial extents {ext[1:]} too small to pool")
                ext = _after_pool(ext, (1, 2, 2))
            blocks.append((f"stage{si}_{ci}", RC3DBlock(c_prev, c, rng, act=act, pool=pool)))
            c_prev = c
    net = NetworkGraph(name, blocks, (in_ch, frames, size, size))
    net.out_channels = c_prev
    net.out_extents = ext
    return net


class FusionHead(Module):
    """StackPool over streams, flatten, affine + activation, class affine."""

    def __init__(self, in_features: int, width: int, rng: np.random.Generator, act: Activation,
                 classes: int = CLASS_COUNT):
        super().__init__()
        self.fc1 = Dense(in_features, width, rng, act.slope)
        self.fc2 = Dense(width, classes, rng, act.slope)
        self.act = act
        self.in_features = in_features

    def forward(self, features: Sequence[Tensor]) -> Tensor:
        pooled = ops.flatten(stack_pool_streams(features))
        return self.fc2(self.act(self.fc1(pooled)))


class RC3DNet(NetworkGraph):
    """Single-stream rC3D classifier: trunk -> StackPool -> head."""

    def __init__(self, trunk: NetworkGraph, head: FusionHead):
        super().__init__("rc3d", trunk.blocks() + [("head", head)], trunk.input_signature)
        self.trunk_names = list(trunk.block_names)
        self.block_names = self.trunk_names + ["head"]

    def forward(self, x: Tensor) -> Tensor:
        for name in self.trunk_names:
            x = getattr(self, name)(x)
        return self.head([x])


def build_rc3d(profile: ScaleProfile, rng: np.random.Generator, act: Activation = Activation(),
               size: int | None = None, in_ch: int = 3, frames: int | None = None) -> RC3DNet:
    size = size or profile.input_size
    trunk = rc3d_trunk(profile, rng, in_ch, frames or profile.frames, size, act)
    head = FusionHead(2 * trunk.out_channels, profile.head_width, rng, act)
    net = RC3DNet(trunk, head)
    net.assign_names()
    return net


# ---------------------------------------------------------------------------
# depth generator and critic

class UNetGenerator(NetworkGraph):
    """RGB frame (N, 3, H, W) -> depth (N, 1, H, W) in [0, 1]."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, act: Activation = Activation()):
        c0, c1, c2, c3, c4 = widths
        s = act.slope
        blocks = [
            ("stem", ConvAct(ConvLayer(3, c0, 3, rng, padding=1, dims=2, slope=s), act)),
            ("down1", ConvAct(ConvLayer(c0, c1, 3, rng, stride=2, padding=1, dims=2, slope=s), act)),
            ("down2", ConvAct(ConvLayer(c1, c2, 3, rng, stride=2, padding=1, dims=2, slope=s), act)),
            ("down3", ConvAct(ConvLayer(c2, c3, 3, rng, stride=2, padding=1, dims=2, slope=s), act)),
            ("down4", ConvAct(ConvLayer(c3, c4, 3, rng, stride=2, padding=1, dims=2, slope=s), act)),
            ("up3", DeconvBlock(c4, c3, c3, rng, with_attention=True, act=act)),
            ("up2", DeconvBlock(c3, c2, c2, rng, act=act)),
            ("up1", DeconvBlock(c2, c1, c1, rng, act=act)),
            ("up0", DeconvBlock(c1, c0, c0, rng, act=act)),
            ("to_depth", ConvLayer(c0, 1, 1, rng, dims=2, slope=s)),
            ("refine", ConvLayer(1, 1, 3, rng, padding=1, dims=2, slope=s)),
        ]
        super().__init__("unet_generator", blocks, (3, None, None), class_count=0)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % 16 or w % 16:
            raise InvalidArgument(f"generator input extents {(h, w)} must be multiples of 16")
        s0 = self.stem(x)
        s1 = self.down1(s0)
        s2 = self.down2(s1)
        s3 = self.down3(s2)
        y = self.down4(s3)
        y = self.up3(y, s3)
        y = self.up2(y, s2)
        y = self.up1(y, s1)
        y = self.up0(y, s0)
        y = ops.interpolate(self.to_depth(y), (h, w), "bilinear")
        return ops.sigmoid(self.refine(y))


def build_unet_generator(profile: ScaleProfile, rng: np.random.Generator,
                         act: Activation = Activation()) -> UNetGenerator:
    net = UNetGenerator(profile.generator_widths, rng, act)
    net.assign_names()
    return net


class Critic(NetworkGraph):
    """DOConv stack with one concatenation skip and one self-attention stage.

    Returns one real-vs-fake logit per image, shape (N, 1).
    """

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, p: float = 0.1,
                 act: Activation = Activation()):
        k0, k1, k2 = widths
        blocks = [
            ("conv0", DOConv(1, k0, rng, p=0.0, stride=2, act=act)),
            ("conv1", DOConv(k0, k0, rng, p=p, act=act)),
            ("conv2", DOConv(2 * k0, k1, rng, p=p, stride=2, act=act)),
            ("attention", SelfAttention2d(k1, rng, slope=act.slope)),
            ("conv3", DOConv(k1, k2, rng, p=p, stride=2, act=act)),
            ("score", ConvLayer(k2, 1, 3, rng, padding=1, dims=2, slope=act.slope)),
        ]
        super().__init__("critic", blocks, (1, None, None), class_count=2)

    def forward(self, x: Tensor, rng: np.random.Generator | None = None, use_attention: bool = True) -> Tensor:
        a = self.conv0(x, rng)
        b = self.conv1(a, rng)
        y = self.conv2(ops.concat([a, b], axis=1), rng)
        if use_attention:
            y = self.attention(y)
        y = self.conv3(y, rng)
        score_map = self.score(y)
        return ops.reshape(ops.mean(score_map, (2, 3)), (x.shape[0], 1))


def build_critic(profile: ScaleProfile, rng: np.random.Generator, act: Activation = Activation()) -> Critic:
    net = Critic(profile.critic_widths, rng, profile.critic_dropout, act)
    net.assign_names()
    return net


# ---------------------------------------------------------------------------
# stream fusion

@dataclass(frozen=True)
class StreamConfig:
    streams: tuple[str, ...] = ("rgb",)
    head_width: int = 256
    # "span": one flow image frame0 -> frame2; "adjacent": one per adjacent pair
    motion_mode: str = "span"

    def __post_init__(self):
        if not self.streams:
            raise ConfigError("at least one stream must be enabled")
        bad = [s for s in self.streams if s not in STREAMS]
        if bad:
            raise ConfigError(f"unknown streams {bad}; choose from {STREAMS}")
        if len(set(self.streams)) != len(self.streams):
            raise ConfigError(f"duplicate streams in {self.streams}")
        if self.motion_mode not in ("span", "adjacent"):
            raise ConfigError(f"motion_mode must be 'span' or 'adjacent', got {self.motion_mode!r}")

    @property
    def ordered(self) -> tuple[str, ...]:
        return tuple(s for s in STREAMS if s in self.streams)


def stream_frames(name: str, config: StreamConfig, frames: int = 3) -> int:
    if name == "motion":
        return 1 if config.motion_mode == "span" else frames - 1
    return frames


def depth_frames(generator: Module, clip: np.ndarray) -> np.ndarray:
    """(N, 3, T, H, W) RGB clip -> (N, 1, T, H, W) generated depth, no graph."""
    n, _, t, h, w = clip.shape
    frames = np.ascontiguousarray(clip.transpose(0, 2, 1, 3, 4).reshape(n * t, 3, h, w))
    was_training = generator.training
    generator.eval()
    with no_grad():
        depth = generator(Tensor(frames)).data
    generator.train(was_training)
    return depth.reshape(n, t, 1, h, w).transpose(0, 2, 1, 3, 4).copy()


def motion_frames(clip: np.ndarray, mode: str = "span",
                  params: FarnebackParams = FarnebackParams()) -> np.ndarray:
    """(N, 3, T, H, W) RGB clip -> (N, 3, T_m, H, W) motion images."""
    n, _, t, _, _ = clip.shape
    pairs = [(0, t - 1)] if mode == "span" else [(i, i + 1) for i in range(t - 1)]
    out = [np.stack([motion_image(clip[i, :, a], clip[i, :, b], params) for a, b in pairs], axis=1)
           for i in range(n)]
    return np.stack(out).astype(DTYPE)


class MultiStreamNet(NetworkGraph):
    """Parallel rC3D trunks (one per stream) fused by a StackPool head."""

    def __init__(self, profile: ScaleProfile, config: StreamConfig, rng: np.random.Generator,
                 act: Activation = Activation(), size: int | None = None):
        size = size or profile.input_size
        blocks = []
        width = 0
        self.stream_widths = {}
        for sname in config.ordered:
            trunk = rc3d_trunk(profile, rng, STREAM_CHANNELS[sname], stream_frames(sname, config, profile.frames),
                               size, act, name=f"stream_{sname}")
            blocks.append((f"stream_{sname}", trunk))
            self.stream_widths[sname] = 2 * trunk.out_channels
            width += 2 * trunk.out_channels
        head = FusionHead(width, config.head_width, rng, act)
        blocks.append(("head", head))
        super().__init__("multistream", blocks, (3, profile.frames, size, size))
        self.config = config
        self.profile = profile
        self.assign_names()

    def stream_inputs(self, clip: np.ndarray, generator: Module | None = None,
                      flow_params: FarnebackParams = FarnebackParams(),
                      depth: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Derive every enabled stream's input array from an RGB clip.

        The depth stream uses ``depth`` when given, otherwise the generator.
        """
        inputs = {}
        for sname in self.config.ordered:
            if sname == "rgb":
                inputs[sname] = clip
            elif sname == "gdepth" and depth is not None:
                inputs[sname] = depth
            elif sname == "gdepth":
                if generator is None:
                    raise ConfigError("the gdepth stream needs a depth generator")
                inputs[sname] = depth_frames(generator, clip)
            else:
                inputs[sname] = motion_frames(clip, self.config.motion_mode, flow_params)
        return inputs

    def forward(self, clip, generator: Module | None = None, inputs: dict | None = None) -> Tensor:
        if inputs is None:
            data = clip.data if isinstance(clip, Tensor) else np.asarray(clip, dtype=DTYPE)
            if data.ndim != 5 or data.shape[1] != 3 or data.shape[2] != self.profile.frames:
                raise InvalidArgument(f"expected a (N, 3, {self.profile.frames}, H, W) clip, got {data.shape}")
            inputs = self.stream_inputs(data, generator)
            if "rgb" in inputs and isinstance(clip, Tensor):
                inputs["rgb"] = clip
        feats = []
        for sname in self.config.ordered:
            x = inputs[sname]
            feats.append(getattr(self, f"stream_{sname}")(x if isinstance(x, Tensor) else Tensor(x)))
        return self.head(feats)


def multistream_forward(clip, config: StreamConfig, nets: MultiStreamNet,
                        generator: Module | None = None) -> Tensor:
    if tuple(nets.config.ordered) != tuple(config.ordered):
        raise ConfigError(f"network was built for streams {nets.config.ordered}, not {config.ordered}")
    if "gdepth" in config.streams and generator is None:
        raise ConfigError("the gdepth stream is enabled but no generator was given")
    return nets(clip, generator)


# ---------------------------------------------------------------------------
# persisted model configuration

@dataclass
class ModelConfig:
    """Everything needed to rebuild a classifier or GAN bit-exactly."""

    model: str = "rc3d"
    streams: tuple[str, ...] = ("rgb",)
    profile: str = "toy"
    frame_size: int = 32
    seed: int = 0
    slope: float = 0.1
    shift: float = 0.1
    head_width: int = 256
    motion_mode: str = "span"

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(v) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: dict) -> "ModelConfig":
        out = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.name == "streams":
                out[f.name] = tuple(s.strip() for s in str(raw).split(",") if s.strip())
            elif f.type in ("int",):
                out[f.name] = int(raw)
            elif f.type in ("float",):
                out[f.name] = float(raw)
            else:
                out[f.name] = str(raw)
        return cls(**out)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_key_values(text))

    def activation(self) -> Activation:
        return Activation(self.slope, self.shift)

    def scale_profile(self) -> ScaleProfile:
        return get_profile(self.profile, input_size=self.frame_size, head_width=self.head_width)


def parse_key_values(text: str) -> dict[str, str]:
    kv = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


def build_classifier(cfg: ModelConfig) -> NetworkGraph:
    rng = np.random.default_rng(cfg.seed)
    profile = cfg.scale_profile()
    act = cfg.activation()
    config = StreamConfig(cfg.streams, cfg.head_width, cfg.motion_mode)
    if cfg.model == "rc3d":
        if config.ordered == ("rgb",):
            return build_rc3d(profile, rng, act)
        return MultiStreamNet(profile, config, rng, act)
    if config.ordered != ("rgb",):
        raise ConfigError(f"model {cfg.model!r} supports only the rgb stream")
    if cfg.model == "c3d":
        return build_c3d(profile, rng, act)
    if cfg.model == "p3da":
        return build_p3da(profile, rng, act)
    raise ConfigError(f"unknown model kind {cfg.model!r}; choose c3d, p3da or rc3d")


def classifier_inputs(net: NetworkGraph, clip: np.ndarray, generator: Module | None = None,
                      flow_params: FarnebackParams = FarnebackParams(),
                      depth: np.ndarray | None = None) -> dict | np.ndarray:
    """Precompute whatever a classifier consumes for a batch of RGB clips.

    ``depth`` replaces generated depth with given (N, 1, T, H, W) maps.
    """
    if isinstance(net, MultiStreamNet):
        return net.stream_inputs(clip, generator, flow_params, depth)
    return clip


def run_classifier(net: NetworkGraph, inputs) -> Tensor:
    if isinstance(net, MultiStreamNet):
        return net(None, inputs=inputs)
    return net(Tensor(inputs))
