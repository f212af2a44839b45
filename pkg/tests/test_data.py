import threading

import numpy as np
import pytest

from magic_seg.config import ConfigError
from magic_seg.data import (
    CORRUPTION_KINDS,
    DEFAULT_REGISTRY,
    CorruptionSpec,
    FormatError,
    SceneConfig,
    apply_corruption,
    encode_sample,
    header_size,
    load_samples,
    restrict,
    save_samples,
    synthesize,
)


def samples_equal(a, b):
    return (list(a.modalities) == list(b.modalities)
            and all(np.array_equal(a.modalities[k], b.modalities[k]) for k in a.modalities)
            and np.array_equal(a.label, b.label))


def test_synthesize_is_deterministic():
    cfg = SceneConfig()
    a = synthesize(7, 2, cfg)
    b = synthesize(7, 2, cfg)
    for x, y in zip(a, b):
        assert samples_equal(x, y)
        assert x.corruption == y.corruption


def test_different_seeds_differ():
    cfg = SceneConfig()
    assert not samples_equal(synthesize(7, 1, cfg)[0], synthesize(8, 1, cfg)[0])


def test_concurrent_generation_matches_serial():
    cfg = SceneConfig()
    serial = {s: synthesize(s, 3, cfg) for s in range(4)}
    out = {}

    def work(seed):
        out[seed] = synthesize(seed, 3, cfg)

    threads = [threading.Thread(target=work, args=(s,)) for s in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for s in range(4):
        assert all(samples_equal(a, b) for a, b in zip(serial[s], out[s]))


def test_label_histogram_covers_all_classes():
    # frozen from generating (seed=1, count=100, K=5): counts [64447, 8076, 9988, 9941, 9948]
    samples = synthesize(1, 100, SceneConfig(classes=5))
    hist = np.bincount(np.concatenate([s.label.ravel() for s in samples]), minlength=5)
    assert hist.tolist() == [64447, 8076, 9988, 9941, 9948]
    assert (hist > 0).all()


def test_sample_invariants():
    cfg = SceneConfig(height=24, width=40, classes=4)
    for s in synthesize(3, 20, cfg):
        assert list(s.modalities) == list(DEFAULT_REGISTRY.names)
        for x in s.modalities.values():
            assert x.shape == (3, 24, 40)
            assert x.dtype == np.float32
            assert x.min() >= 0 and x.max() <= 1
        assert s.label.shape == (24, 40)
        assert s.label.min() >= 0 and s.label.max() < 4


def test_corruption_rate_and_severity():
    samples = synthesize(5, 400, SceneConfig(corruption_prob=0.5))
    corrupted = [s.corruption for s in samples if s.corruption is not None]
    assert 160 < len(corrupted) < 240
    assert all(0.5 <= c.severity <= 1.0 for c in corrupted)
    assert {c.kind for c in corrupted} == set(CORRUPTION_KINDS)
    assert {c.target for c in corrupted} == set(DEFAULT_REGISTRY.names)
    assert all(s.corruption is None for s in synthesize(5, 50, SceneConfig(corruption_prob=0.0)))


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
def test_zero_severity_is_identity(kind):
    clean = synthesize(11, 1, SceneConfig(corruption_prob=0.0))[0]
    for name, x in clean.modalities.items():
        out = apply_corruption(x, CorruptionSpec(name, kind, 0.0), np.random.default_rng(0))
        assert out.tobytes() == x.tobytes()


def test_full_blackout_zeroes_modality():
    x = synthesize(11, 1, SceneConfig(corruption_prob=0.0))[0].modalities["rgb"]
    out = apply_corruption(x, CorruptionSpec("rgb", "blackout", 1.0), None)
    assert not out.any()


def test_event_edges_only_near_label_boundaries():
    for s in synthesize(2, 30, SceneConfig(corruption_prob=0.0)):
        ev = s.modalities["event"]
        H, W = s.label.shape
        for y, x in zip(*np.nonzero(ev.any(axis=0))):
            neighbours = [(y + dy, x + dx) for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1))
                          if 0 <= y + dy < H and 0 <= x + dx < W]
            assert any(s.label[p] != s.label[y, x] for p in neighbours), (y, x)


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        SceneConfig(height=8)
    with pytest.raises(ConfigError):
        SceneConfig(min_shapes=3, max_shapes=2)
    with pytest.raises(ConfigError):
        synthesize(0, 0, SceneConfig())


def test_scene_config_file(tmp_path):
    p = tmp_path / "scene.cfg"
    p.write_text("# fixture\nheight = 32\nwidth=48\nclasses = 6\nmin_shapes = 1\nmax_shapes = 3\n"
                 "corruption_prob = 0.25\n")
    assert SceneConfig.from_file(p) == SceneConfig(32, 48, 6, 1, 3, 0.25)
    p.write_text("height = 32\ncolour = red\n")
    with pytest.raises(ConfigError):
        SceneConfig.from_file(p)


def test_header_byte_count():
    # 4 magic + 2 version + 2 K + 4 H + 4 W + 1 count = 17,
    # names: rgb 1+3, depth 1+5, event 1+5, lidar 1+5 = 22
    assert header_size(DEFAULT_REGISTRY.names) == 39
    s = synthesize(0, 1, SceneConfig())[0]
    blob = encode_sample(s, 5)
    assert len(blob) == 39 + 4 * 3 * 32 * 32 * 4 + 32 * 32 * 4
    assert blob[:4] == b"MAGC"
    assert blob[6:8] == (5).to_bytes(2, "little")


def test_round_trip(tmp_path):
    cfg = SceneConfig(corruption_prob=1.0)
    samples = synthesize(9, 5, cfg)
    save_samples(samples, tmp_path, cfg.classes, config=cfg)
    back = load_samples(tmp_path)
    assert len(back) == 5
    for a, b in zip(samples, back):
        assert samples_equal(a, b)
        assert a.corruption == b.corruption
        assert a.seed == b.seed


def test_truncated_file_rejected(tmp_path):
    save_samples(synthesize(9, 2, SceneConfig()), tmp_path, 5)
    victim = tmp_path / "sample_0001.magc"
    victim.write_bytes(victim.read_bytes()[:-1])
    with pytest.raises(FormatError, match="sample_0001"):
        load_samples(tmp_path)


def test_bad_magic_and_version(tmp_path):
    save_samples(synthesize(9, 1, SceneConfig()), tmp_path, 5)
    f = tmp_path / "sample_0000.magc"
    blob = bytearray(f.read_bytes())
    f.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(FormatError, match="magic"):
        load_samples(tmp_path)
    blob[4:6] = (9).to_bytes(2, "little")
    f.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        load_samples(tmp_path)


def test_restrict():
    s = synthesize(0, 1, SceneConfig())[0]
    full = restrict(s, DEFAULT_REGISTRY.names)
    assert samples_equal(full, s)
    only = restrict(s, {"depth"})
    assert list(only.modalities) == ["depth"]
    assert np.array_equal(only.label, s.label)
    with pytest.raises(ValueError):
        restrict(s, set())
    with pytest.raises(KeyError):
        restrict(s, {"sonar"})


def test_registry_subsets():
    reg = DEFAULT_REGISTRY
    assert len(reg.all_subsets()) == 15
    assert reg.subset_string(["lidar", "rgb", "depth"]) == "R+D+L"
    assert reg.parse_subset("L+r") == ("rgb", "lidar")
    assert reg.parse_subset("rgb+event") == ("rgb", "event")
    assert [m.index for m in reg] == [0, 1, 2, 3]
