"""Synthetic 16-class gesture videos with analytic depth, plus preprocessing.

Each class is a motion pattern of a single shape over a static textured
background. A video's depth map is the shape's depth inside the shape and
the background plane elsewhere, lightly blurred. The frame pipeline is
three-frame segmentation, Lanczos resampling and edge enhancement; training
clips additionally get a random rotation and Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import InvalidArgument

CLASS_NAMES = ("alarm", "call", "lock", "movie", "no", "off", "on", "rain", "reminder", "set",
               "sports", "today", "tomorrow", "weather", "yes", "nothing")

_D = 1.0 / np.sqrt(2.0)
# (name, first-half direction, second-half direction) in units of the amplitude
TRAJECTORIES = (
    ("east", (1, 0), (1, 0)),
    ("west", (-1, 0), (-1, 0)),
    ("north", (0, -1), (0, -1)),
    ("south", (0, 1), (0, 1)),
    ("north_east", (_D, -_D), (_D, -_D)),
    ("north_west", (-_D, -_D), (-_D, -_D)),
    ("south_east", (_D, _D), (_D, _D)),
    ("south_west", (-_D, _D), (-_D, _D)),
    ("east_back", (1, 0), (-1, 0)),
    ("south_back", (0, 1), (0, -1)),
    ("diagonal_back", (_D, _D), (-_D, -_D)),
    ("east_then_south", (1, 0), (0, 1)),
    ("west_then_north", (-1, 0), (0, -1)),
    ("south_then_east", (0, 1), (1, 0)),
    ("north_then_west", (0, -1), (-1, 0)),
    ("static", (0, 0), (0, 0)),
)
EDGE_ENHANCE_KERNEL = np.array([[-1.0, -1.0, -1.0], [-1.0, 10.0, -1.0], [-1.0, -1.0, -1.0]]) / 2.0


@dataclass(frozen=True)
class SceneSpec:
    label: int
    shape: str                      # "disc" or "rectangle"
    size: float                     # half-extent in pixels
    start: tuple[float, float]      # (x, y) of the shape centre at frame 0
    amplitude: float                # path length of each half of the motion, pixels
    frames: int = 12
    render_size: int = 64
    base_depth: float = 0.85
    shape_depth: float = 0.3
    noise: float = 0.02
    color: tuple[float, float, float] = (0.9, 0.3, 0.2)

    def __post_init__(self):
        if not 0 <= self.label < len(TRAJECTORIES):
            raise InvalidArgument(f"label must lie in 0..{len(TRAJECTORIES) - 1}, got {self.label}")
        if self.shape not in ("disc", "rectangle"):
            raise InvalidArgument(f"shape must be 'disc' or 'rectangle', got {self.shape!r}")
        if not 6 <= self.frames <= 20:
            raise InvalidArgument(f"frame count must lie in [6, 20], got {self.frames}")
        pts = self.path(np.linspace(0.0, 1.0, 33))
        lo, hi = self.size, self.render_size - 1 - self.size
        if pts.min() < lo - 1e-9 or pts.max() > hi + 1e-9:
            raise InvalidArgument("trajectory leaves the frame")

    @property
    def trajectory(self) -> str:
        return TRAJECTORIES[self.label][0]

    def path(self, s: np.ndarray) -> np.ndarray:
        """Shape centres (len(s), 2) for normalized times ``s`` in [0, 1]."""
        _, d1, d2 = TRAJECTORIES[self.label]
        s = np.asarray(s, dtype=np.float64)
        first = np.minimum(s, 0.5) * 2.0
        second = np.maximum(s - 0.5, 0.0) * 2.0
        d1 = np.asarray(d1) * self.amplitude
        d2 = np.asarray(d2) * self.amplitude
        return np.asarray(self.start) + first[:, None] * d1 + second[:, None] * d2


@dataclass
class GestureVideo:
    rgb: np.ndarray     # (T, 3, H, W) in [0, 1]
    depth: np.ndarray   # (T, 1, H, W) in [0, 1]
    label: int
    seed: int
    spec: SceneSpec

    def __post_init__(self):
        if self.rgb.shape[0] != self.depth.shape[0]:
            raise InvalidArgument("rgb and depth frame counts differ")


def make_scene_spec(label: int, rng: np.random.Generator, render_size: int = 64,
                    noise: float = 0.02) -> SceneSpec:
    """Draw shape, size, colour, depths and a start point keeping the path in frame."""
    s = render_size
    size = float(rng.uniform(0.09, 0.13) * s)
    amplitude = 0.2 * s
    shape = ("disc", "rectangle")[int(rng.integers(2))]
    frames = int(rng.integers(6, 21))
    _, d1, d2 = TRAJECTORIES[label]
    offsets = np.array([[0.0, 0.0], d1, np.add(d1, d2)]) * amplitude
    lo = size - offsets.min(axis=0)
    hi = s - 1 - size - offsets.max(axis=0)
    start = tuple(float(v) for v in rng.uniform(lo, hi))
    hue = float(rng.random())
    color = tuple(float(c) for c in _hsv(hue, 0.85, 0.95))
    return SceneSpec(label=label, shape=shape, size=size, start=start, amplitude=amplitude,
                     frames=frames, render_size=s, base_depth=float(rng.uniform(0.8, 0.9)),
                     shape_depth=float(rng.uniform(0.2, 0.4)), noise=noise, color=color)


def _hsv(h: float, s: float, v: float) -> tuple[float, float, float]:
    import colorsys
    return colorsys.hsv_to_rgb(h, s, v)


def shape_mask(spec: SceneSpec, centre) -> np.ndarray:
    n = spec.render_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    dx, dy = xx - centre[0], yy - centre[1]
    if spec.shape == "disc":
        return dx * dx + dy * dy <= spec.size ** 2
    return (np.abs(dx) <= spec.size) & (np.abs(dy) <= 0.7 * spec.size)


def generate_sample(spec: SceneSpec, rng: np.random.Generator, seed: int = -1,
                    depth_blur: float = 0.5) -> GestureVideo:
    """Render ``spec`` to RGB and analytic depth frames."""
    n, t = spec.render_size, spec.frames
    tex = ndimage.gaussian_filter(rng.random((3, n, n)), (0, 2.5, 2.5), mode="wrap")
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-12)
    gray = tex.mean(axis=0, keepdims=True)
    background = 0.3 + 0.3 * (0.7 * gray + 0.3 * tex)
    colour = np.asarray(spec.color).reshape(3, 1, 1)
    centres = spec.path(np.linspace(0.0, 1.0, t))
    rgb = np.empty((t, 3, n, n))
    depth = np.empty((t, 1, n, n))
    for k, c in enumerate(centres):
        m = shape_mask(spec, c)
        rgb[k] = np.where(m, colour, background)
        d = np.where(m, spec.shape_depth, spec.base_depth)
        depth[k, 0] = ndimage.gaussian_filter(d, depth_blur, mode="nearest") if depth_blur > 0 else d
    if spec.noise > 0:
        rgb = rgb + rng.normal(0.0, spec.noise, rgb.shape)
    return GestureVideo(rgb=np.clip(rgb, 0, 1).astype(np.float32),
                        depth=np.clip(depth, 0, 1).astype(np.float32),
                        label=spec.label, seed=seed, spec=spec)


def generate_dataset(samples_per_class: int, seed: int, render_size: int = 64,
                     noise: float = 0.02) -> list[GestureVideo]:
    """``16 * samples_per_class`` videos; sample ``i`` has class ``i % 16`` and seed ``seed ^ i``."""
    videos = []
    for i in range(samples_per_class * len(CLASS_NAMES)):
        sample_seed = seed ^ i
        rng = np.random.default_rng(sample_seed)
        spec = make_scene_spec(i % len(CLASS_NAMES), rng, render_size, noise)
        videos.append(generate_sample(spec, rng, seed=sample_seed))
    return videos


# ---------------------------------------------------------------------------
# filters

def _lanczos(x: np.ndarray, a: int) -> np.ndarray:
    return np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)


def lanczos_matrix(n_in: int, n_out: int, a: int = 3) -> np.ndarray:
    """(n_out, n_in) resampling weights; rows sum to one, borders replicate."""
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    m = np.zeros((n_out, n_in))
    support = int(np.ceil(a * stretch))
    for i in range(n_out):
        centre = (i + 0.5) * scale - 0.5
        taps = np.arange(int(np.floor(centre)) - support, int(np.floor(centre)) + support + 2)
        w = _lanczos((taps - centre) / stretch, a)
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), w)
    return m / m.sum(axis=1, keepdims=True)


def lanczos_resize(img: np.ndarray, out, a: int = 3) -> np.ndarray:
    """Separable Lanczos resampling of the last two axes, clamped to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    oh, ow = out
    res = lanczos_matrix(h, oh, a) @ img @ lanczos_matrix(w, ow, a).T
    return np.clip(res, 0.0, 1.0).astype(np.float32)


def edge_enhance(img: np.ndarray, kernel: np.ndarray = EDGE_ENHANCE_KERNEL, clamp: bool = True) -> np.ndarray:
    """3x3 sharpening over the last two axes with replicated borders."""
    img = np.asarray(img, dtype=np.float64)
    flat = img.reshape((-1,) + img.shape[-2:])
    out = np.stack([ndimage.correlate(ch, kernel, mode="nearest") for ch in flat]).reshape(img.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32) if clamp else out


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate the last two axes about the image centre; outside pixels are 0."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source pixel
    sx = c * (xx - cx) + s * (yy - cy) + cx
    sy = -s * (xx - cx) + c * (yy - cy) + cy
    flat = img.reshape((-1, h, w))
    out = np.stack([ndimage.map_coordinates(ch, [sy, sx], order=1, mode="constant", cval=0.0)
                    for ch in flat])
    return out.reshape(img.shape).astype(np.float32)


def sample_angle(rng: np.random.Generator, max_degrees: float = 30.0) -> float:
    return float(rng.uniform(-max_degrees, max_degrees))


def random_rotate(img: np.ndarray, rng: np.random.Generator | None = None, angle: float | None = None,
                  max_degrees: float = 30.0) -> np.ndarray:
    """Rotate by ``angle`` or by a draw from Uniform(-max_degrees, max_degrees)."""
    if angle is None:
        if rng is None:
            raise InvalidArgument("random_rotate needs an rng or an explicit angle")
        angle = sample_angle(rng, max_degrees)
    return rotate(img, angle)


def gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.astype(np.float32)
    return np.clip(img + rng.normal(0.0, sigma, img.shape), 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# clips

def segment_indices(t: int) -> tuple[int, int, int]:
    return 0, (t - 1) // 2, t - 1


def segment_three_frames(video: GestureVideo) -> tuple[np.ndarray, np.ndarray, int]:
    """First, middle and last frame: rgb (3, 3, H, W), depth (3, 1, H, W), label."""
    idx = list(segment_indices(video.rgb.shape[0]))
    return video.rgb[idx], video.depth[idx], video.label


def prepare_clip(video: GestureVideo, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Segment, resample and sharpen; returns rgb (3, T, S, S) and depth (1, T, S, S)."""
    rgb, depth, _ = segment_three_frames(video)
    rgb = edge_enhance(lanczos_resize(rgb, (size, size)))
    depth = lanczos_resize(depth, (size, size))
    return rgb.transpose(1, 0, 2, 3).copy(), depth.transpose(1, 0, 2, 3).copy()


def augment_clip(clip: np.ndarray, rng: np.random.Generator, sigma: float = 0.03,
                 max_degrees: float = 30.0) -> np.ndarray:
    """One random rotation for the whole (C, T, H, W) clip, then additive noise."""
    angle = sample_angle(rng, max_degrees) if max_degrees > 0 else 0.0
    out = rotate(clip, angle) if angle else np.asarray(clip, dtype=np.float32)
    return gaussian_noise(out, sigma, rng)


@dataclass
class ClipSet:
    rgb: np.ndarray      # (n, 3, T, H, W)
    depth: np.ndarray    # (n, 1, T, H, W)
    labels: np.ndarray   # (n,)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ClipSet":
        idx = np.asarray(idx, dtype=int)
        return ClipSet(self.rgb[idx], self.depth[idx], self.labels[idx])


def build_clipset(videos: Sequence[GestureVideo], size: int) -> ClipSet:
    if not videos:
        return ClipSet(np.zeros((0, 3, 3, size, size), np.float32),
                       np.zeros((0, 1, 3, size, size), np.float32), np.zeros(0, dtype=int))
    pairs = [prepare_clip(v, size) for v in videos]
    return ClipSet(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]),
                   np.array([v.label for v in videos], dtype=int))


# ---------------------------------------------------------------------------
# manifest and on-disk layout

@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str
    seed: int = -1


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: tuple[str, ...] = CLASS_NAMES
    seed: int = 0
    valid_fraction: float = 0.0

    @property
    def counts(self) -> dict[str, int]:
        return {s: sum(e.split == s for e in self.entries) for s in ("train", "valid")}

    def indices(self, split: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == split]

    def per_class(self, split: str) -> list[int]:
        counts = [0] * len(self.class_names)
        for e in self.entries:
            if e.split == split:
                counts[e.label] += 1
        return counts

    def to_json(self) -> str:
        doc = {"class_names": list(self.class_names), "seed": self.seed,
               "valid_fraction": self.valid_fraction, "counts": self.counts,
               "samples": [asdict(e) for e in self.entries]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return cls(entries=[ManifestEntry(**e) for e in doc["samples"]],
                   class_names=tuple(doc["class_names"]), seed=doc["seed"],
                   valid_fraction=doc["valid_fraction"])


def sample_dir_name(index: int) -> str:
    return f"sample_{index:05d}"


def split_dataset(samples: Sequence, valid_fraction: float, seed: int) -> DatasetManifest:
    """Class-stratified shuffled split; ``samples`` are videos or integer labels.

    Each class contributes ``round(valid_fraction * class_size)`` validation
    samples.
    """
    if not 0.0 <= valid_fraction < 1.0:
        raise InvalidArgument(f"valid_fraction must lie in [0, 1), got {valid_fraction}")
    labels = [s.label if isinstance(s, GestureVideo) else int(s) for s in samples]
    seeds = [s.seed if isinstance(s, GestureVideo) else -1 for s in samples]
    rng = np.random.default_rng(seed)
    split = ["train"] * len(labels)
    for c in range(len(CLASS_NAMES)):
        members = [i for i, lab in enumerate(labels) if lab == c]
        rng.shuffle(members)
        for i in members[: int(round(valid_fraction * len(members)))]:
            split[i] = "valid"
    entries = [ManifestEntry(sample_dir_name(i), lab, sp, sd)
               for i, (lab, sp, sd) in enumerate(zip(labels, split, seeds))]
    return DatasetManifest(entries, seed=seed, valid_fraction=valid_fraction)


def _to_png(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0, 1) * 255.0).astype(np.uint8)


def write_video(directory: Path, video: GestureVideo) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for t in range(video.rgb.shape[0]):
        Image.fromarray(_to_png(video.rgb[t].transpose(1, 2, 0)), "RGB").save(directory / f"rgb_{t:03d}.png")
        Image.fromarray(_to_png(video.depth[t, 0]), "L").save(directory / f"depth_{t:03d}.png")
    spec = asdict(video.spec)
    lines = [f"label = {video.label}", f"seed = {video.seed}"]
    lines += [f"{k} = {','.join(map(repr, v)) if isinstance(v, tuple) else v}" for k, v in spec.items()
              if k != "label"]
    (directory / "meta.txt").write_text("\n".join(lines) + "\n")


def _parse_meta(text: str) -> dict[str, str]:
    kv = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    return kv


def read_video(directory) -> GestureVideo:
    directory = Path(directory)
    kv = _parse_meta((directory / "meta.txt").read_text())
    tup = lambda s: tuple(float(x) for x in s.split(","))  # noqa: E731
    spec = SceneSpec(label=int(kv["label"]), shape=kv["shape"], size=float(kv["size"]), start=tup(kv["start"]),
                     amplitude=float(kv["amplitude"]), frames=int(kv["frames"]),
                     render_size=int(kv["render_size"]), base_depth=float(kv["base_depth"]),
                     shape_depth=float(kv["shape_depth"]), noise=float(kv["noise"]), color=tup(kv["color"]))
    t = spec.frames
    rgb = np.stack([np.asarray(Image.open(directory / f"rgb_{k:03d}.png"), dtype=np.float32).transpose(2, 0, 1)
                    for k in range(t)]) / 255.0
    depth = np.stack([np.asarray(Image.open(directory / f"depth_{k:03d}.png"), dtype=np.float32)[None]
                      for k in range(t)]) / 255.0
    return GestureVideo(rgb.astype(np.float32), depth.astype(np.float32), spec.label, int(kv["seed"]), spec)


def write_dataset(root, videos: Sequence[GestureVideo], manifest: DatasetManifest) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for entry, video in zip(manifest.entries, videos):
        write_video(root / entry.path, video)
    (root / "manifest.json").write_text(manifest.to_json())


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    manifest = DatasetManifest.from_json((root / "manifest.json").read_text())
    missing = [e.path for e in manifest.entries if not (root / e.path / "meta.txt").exists()]
    if missing:
        raise FileNotFoundError(f"manifest references missing samples: {missing[:3]}")
    return manifest


def load_clipsets(root, size: int, manifest: DatasetManifest | None = None) -> tuple[ClipSet, ClipSet]:
    """Read every sample under ``root`` and return (train, valid) clip sets."""
    root = Path(root)
    manifest = manifest or load_manifest(root)
    out = []
    for split in ("train", "valid"):
        videos = [read_video(root / manifest.entries[i].path) for i in manifest.indices(split)]
        out.append(build_clipset(videos, size))
    return out[0], out[1]


def clipsets_from_videos(videos: Sequence[GestureVideo], manifest: DatasetManifest,
                         size: int) -> tuple[ClipSet, ClipSet]:
    return tuple(build_clipset([videos[i] for i in manifest.indices(s)], size) for s in ("train", "valid"))
