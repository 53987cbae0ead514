import numpy as np
import pytest

from rc3d.models import (PROFILES, ConfigError, ModelConfig, MultiStreamNet, ScaleProfile, StreamConfig,
                         build_c3d, build_classifier, build_critic, build_p3da, build_rc3d, build_unet_generator,
                         get_profile, multistream_forward, parse_key_values)
from rc3d.tensor import InvalidArgument, Tensor, no_grad

TOY = PROFILES["toy"]
CLASSES = 16


def trunk_out(ext, first):
    t = 1 if first else min(2, ext[0])
    return (ext[0] // t, ext[1] // 2, ext[2] // 2)


def closed_form_count(kind, profile, size=None, in_ch=3):
    """Parameter count from the layer recipe, without building anything."""
    size = size or profile.input_size
    ext = (profile.frames, size, size)
    total, c_prev = 0, in_ch
    for si, stage in enumerate(profile.stages):
        for c in stage:
            if kind == "c3d":
                total += c_prev * c * 27 + c
            elif kind == "p3da":
                total += c_prev * c + c + c * c * 9 + c + c * c * 3 + c + c * c + c
                total += (c_prev * c + c) if c_prev != c else 0
            else:
                m = max(c // 4, 1)
                total += c_prev * m + m + m * m * 27 + m + m * c + c
                total += (c_prev * c + c) if c_prev != c else 0
            c_prev = c
        if kind != "rc3d":
            ext = trunk_out(ext, si == 0)
        elif si < len(profile.stages) - 1:
            ext = (ext[0], ext[1] // 2, ext[2] // 2)
    w = profile.head_width
    if kind == "rc3d":
        return total + 2 * c_prev * w + w + w * CLASSES + CLASSES
    feat = c_prev * int(np.prod(ext))
    return total + feat * w + w + w * w + w + w * CLASSES + CLASSES


# ---------------------------------------------------------------- classifier shapes and determinism

@pytest.mark.parametrize("builder", [build_c3d, build_p3da, build_rc3d])
def test_toy_classifier_shape_and_determinism(builder):
    net = builder(TOY, np.random.default_rng(0)).eval()
    x = Tensor(np.zeros((1, 3, 3, 32, 32)))
    with no_grad():
        a, b = net(x).data, net(x).data
    assert a.shape == (1, CLASSES)
    assert np.all(np.isfinite(a)) and a.tobytes() == b.tobytes()


@pytest.mark.parametrize("builder", [build_c3d, build_p3da, build_rc3d])
def test_same_seed_same_weights(builder):
    a = builder(TOY, np.random.default_rng(4)).state_dict()
    b = builder(TOY, np.random.default_rng(4)).state_dict()
    assert list(a) == list(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)


@pytest.mark.parametrize("kind,builder", [("c3d", build_c3d), ("p3da", build_p3da), ("rc3d", build_rc3d)])
def test_parameter_count_matches_closed_form(kind, builder):
    assert builder(TOY, np.random.default_rng(0)).num_parameters() == closed_form_count(kind, TOY)


def test_compactness_ordering_at_equal_widths():
    counts = {k: closed_form_count(k, TOY) for k in ("c3d", "p3da", "rc3d")}
    assert counts["rc3d"] < counts["p3da"] < counts["c3d"]
    paper = {k: closed_form_count(k, PROFILES["paper"]) for k in ("c3d", "p3da", "rc3d")}
    assert paper["rc3d"] < paper["p3da"] < paper["c3d"]
    print("paper-profile parameter counts:", paper)


def test_registry_names_are_unique_dotted_paths():
    net = build_rc3d(TOY, np.random.default_rng(0))
    reg = net.registry()
    assert len(reg) == len(net.parameters())
    assert "stage0_0.compress.weight" in reg
    assert all(p.name == n for n, p in reg.items())


def test_dead_branch_rc3d_network_is_finite():
    net = build_rc3d(TOY, np.random.default_rng(0)).eval()
    for name, _ in net.named_parameters():
        if ".decompress." in name:
            dict(net.named_parameters())[name].data[...] = 0.0
    with no_grad():
        out = net(Tensor(np.random.default_rng(1).standard_normal((2, 3, 3, 32, 32)))).data
    assert out.shape == (2, CLASSES) and np.all(np.isfinite(out))


def test_profile_validation():
    with pytest.raises(InvalidArgument):
        ScaleProfile("bad", ((8,), (0,)), 32)
    with pytest.raises(InvalidArgument):
        ScaleProfile("bad", ((16,), (8,), (32,)), 32)
    with pytest.raises(InvalidArgument, match="stage"):
        build_c3d(TOY, np.random.default_rng(0), size=8)
    with pytest.raises(ConfigError):
        get_profile("huge")


# ---------------------------------------------------------------- generator and critic

def test_unet_generator_contract():
    gen = build_unet_generator(TOY, np.random.default_rng(0)).eval()
    with no_grad():
        out = gen(Tensor(np.random.default_rng(1).random((1, 3, 64, 64)))).data
    assert out.shape == (1, 1, 64, 64)
    assert out.min() >= 0.0 and out.max() <= 1.0
    with pytest.raises(InvalidArgument):
        gen(Tensor(np.zeros((1, 3, 40, 40))))


def test_critic_contract_and_attention_identity_at_init():
    critic = build_critic(TOY, np.random.default_rng(0)).eval()
    x = Tensor(np.random.default_rng(2).random((1, 1, 64, 64)))
    with no_grad():
        score = critic(x).data
        without = critic(x, use_attention=False).data
    assert score.shape == (1, 1)
    assert score.tobytes() == without.tobytes()


# ---------------------------------------------------------------- stream fusion

def test_single_rgb_stream_equals_standalone_rc3d():
    clip = np.random.default_rng(3).random((2, 3, 3, 32, 32)).astype(np.float32)
    fused = MultiStreamNet(TOY, StreamConfig(("rgb",)), np.random.default_rng(9)).eval()
    solo = build_rc3d(TOY, np.random.default_rng(9)).eval()
    with no_grad():
        a = multistream_forward(clip, StreamConfig(("rgb",)), fused).data
        b = solo(Tensor(clip)).data
    assert a.tobytes() == b.tobytes()


def test_three_streams_and_head_width_bookkeeping():
    rng = np.random.default_rng(0)
    gen = build_unet_generator(TOY, rng)
    full = MultiStreamNet(TOY, StreamConfig(("rgb", "gdepth", "motion")), np.random.default_rng(1)).eval()
    clip = np.random.default_rng(3).random((2, 3, 3, 32, 32)).astype(np.float32)
    with no_grad():
        out = multistream_forward(clip, full.config, full, gen).data
    assert out.shape == (2, CLASSES)
    for dropped in ("rgb", "gdepth", "motion"):
        rest = tuple(s for s in ("rgb", "gdepth", "motion") if s != dropped)
        part = MultiStreamNet(TOY, StreamConfig(rest), np.random.default_rng(1))
        assert full.head.in_features - part.head.in_features == full.stream_widths[dropped]


def test_gdepth_without_generator_is_config_error():
    net = MultiStreamNet(TOY, StreamConfig(("rgb", "gdepth")), np.random.default_rng(0))
    clip = np.zeros((1, 3, 3, 32, 32), np.float32)
    with pytest.raises(ConfigError):
        multistream_forward(clip, net.config, net)
    with pytest.raises(ConfigError):
        multistream_forward(clip, StreamConfig(("rgb",)), net)


def test_stream_config_validation():
    for bad in [(), ("rgb", "rgb"), ("thermal",)]:
        with pytest.raises(ConfigError):
            StreamConfig(bad)
    assert StreamConfig(("motion", "rgb")).ordered == ("rgb", "motion")


def test_clip_must_have_three_frames():
    net = MultiStreamNet(TOY, StreamConfig(("rgb", "motion")), np.random.default_rng(0))
    with pytest.raises(InvalidArgument):
        net(np.zeros((1, 3, 4, 32, 32), np.float32))


# ---------------------------------------------------------------- persisted model config

def test_model_config_roundtrip():
    cfg = ModelConfig(model="rc3d", streams=("rgb", "motion"), frame_size=48, seed=7, slope=0.2, head_width=64)
    assert ModelConfig.from_text(cfg.to_text()) == cfg


def test_build_classifier_dispatch_and_errors():
    assert build_classifier(ModelConfig(model="c3d")).name == "c3d"
    assert isinstance(build_classifier(ModelConfig(streams=("rgb", "motion"))), MultiStreamNet)
    with pytest.raises(ConfigError):
        build_classifier(ModelConfig(model="p3da", streams=("rgb", "gdepth")))
    with pytest.raises(ConfigError):
        build_classifier(ModelConfig(model="i3d"))


def test_parse_key_values():
    assert parse_key_values("a = 1\n# note\nb=x # trailing\n") == {"a": "1", "b": "x"}
    with pytest.raises(ConfigError, match="line 1"):
        parse_key_values("nonsense")
