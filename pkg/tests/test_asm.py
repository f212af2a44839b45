from collections import OrderedDict

import numpy as np
import pytest
import torch

from magic_seg.asm import build_mask, consistency_pair, rank_modalities
from magic_seg.backbone import FeatureSet
from magic_seg.data import DEFAULT_REGISTRY
from magic_seg.losses import loss_s
from magic_seg.mam import SemanticFeature

from helpers import brute_cos, central_diff

NAMES = DEFAULT_REGISTRY.names


def fset(tensors):
    return FeatureSet(OrderedDict(zip(NAMES, tensors)))


def test_ranking_matches_brute_force():
    gen = np.random.default_rng(0)
    for _ in range(100):
        feats = [gen.normal(size=(4, 3, 3)) for _ in NAMES]
        se = gen.normal(size=(4, 3, 3))
        r = rank_modalities(fset([torch.tensor(f) for f in feats]), SemanticFeature(torch.tensor(se), NAMES))
        oracle = {n: brute_cos(f, se) for n, f in zip(NAMES, feats)}
        for n in NAMES:
            assert abs(r.scores[n] - oracle[n]) < 1e-6
        assert r.order == tuple(sorted(NAMES, key=lambda n: -oracle[n]))
        assert r.selected == (max(NAMES, key=oracle.get), min(NAMES, key=oracle.get))
        assert r.remaining == r.order[1:3]


def test_exact_and_opposite():
    gen = torch.Generator().manual_seed(1)
    se = torch.randn(4, 3, 3, generator=gen)
    feats = [torch.randn(4, 3, 3, generator=gen) * 0.1 for _ in NAMES]
    feats[2], feats[1] = se.clone(), -se
    r = rank_modalities(fset(feats), SemanticFeature(se, NAMES))
    assert r.scores["event"] == pytest.approx(1.0, abs=1e-6)
    assert r.scores["depth"] == pytest.approx(-1.0, abs=1e-6)
    assert r.selected == ("event", "depth")


def test_scale_invariance():
    gen = torch.Generator().manual_seed(2)
    se = torch.randn(4, 3, 3, generator=gen, dtype=torch.float64)
    feats = [torch.randn(4, 3, 3, generator=gen, dtype=torch.float64) for _ in NAMES]
    base = rank_modalities(fset(feats), SemanticFeature(se, NAMES)).order
    for k in range(4):
        scaled = list(feats)
        scaled[k] = scaled[k] * (10.0 ** (k - 1))
        assert rank_modalities(fset(scaled), SemanticFeature(se, NAMES)).order == base


def test_ties_broken_by_registry_index():
    x = torch.ones(2, 2, 2)
    r = rank_modalities(fset([x, x, x, x]), SemanticFeature(x, NAMES))
    assert r.order == NAMES
    rev = FeatureSet(OrderedDict((n, x) for n in reversed(NAMES)))
    assert rank_modalities(rev, SemanticFeature(x, NAMES)).order == NAMES


def test_zero_norm_scores_zero():
    gen = torch.Generator().manual_seed(3)
    se = torch.randn(4, 3, 3, generator=gen)
    feats = [se + 0.3 * torch.randn(4, 3, 3, generator=gen) for _ in NAMES]
    feats[0] = torch.zeros(4, 3, 3)
    r = rank_modalities(fset(feats), SemanticFeature(se, NAMES))
    assert r.scores["rgb"] == 0.0
    assert r.zero_norm == ("rgb",)
    assert r.selected[1] == "rgb"


def test_ranking_needs_two():
    x = torch.ones(2, 2, 2)
    with pytest.raises(ValueError):
        rank_modalities(FeatureSet(OrderedDict(rgb=x)), SemanticFeature(x, ("rgb",)))


def brute_targets(logits, label):
    K, H, W = logits.shape
    out = np.zeros((K, H, W))
    for y in range(H):
        for x in range(W):
            z = logits[:, y, x]
            if int(np.argmax(z)) == label[y, x]:
                e = np.exp(z - z.max())
                out[:, y, x] = e / e.sum()
            else:
                out[label[y, x], y, x] = 1.0
    return out


def test_mask_matches_brute_force():
    gen = np.random.default_rng(4)
    for _ in range(100):
        logits = gen.normal(0, 2, (3, 4, 4))
        label = gen.integers(0, 3, (4, 4))
        m = build_mask(torch.tensor(logits), torch.tensor(label))
        assert np.abs(m.targets.numpy() - brute_targets(logits, label)).max() < 1e-6
        assert np.array_equal(m.agree_map.numpy(), logits.argmax(0) == label)
        assert np.allclose(m.targets.sum(0).numpy(), 1.0, atol=1e-6)
        assert (m.targets >= 0).all()


def test_mask_extremes():
    logits = torch.randn(3, 4, 4, generator=torch.Generator().manual_seed(5))
    agree = build_mask(logits, logits.argmax(0))
    assert agree.agree_map.all()
    assert torch.allclose(agree.targets, torch.softmax(logits, 0))
    wrong = (logits.argmax(0) + 1) % 3
    dis = build_mask(logits, wrong)
    assert not dis.agree_map.any()
    assert torch.equal(dis.targets, torch.nn.functional.one_hot(wrong, 3).permute(2, 0, 1).float())


def test_mask_errors():
    with pytest.raises(ValueError):
        build_mask(torch.zeros(3, 4, 4), torch.zeros(4, 5, dtype=torch.long))
    with pytest.raises(ValueError):
        build_mask(torch.zeros(3, 2, 2), torch.full((2, 2), 3))


def test_mask_gradient_isolation():
    # L_S(ps, M(pm)) where pm and ps both depend on theta: the derivative through
    # the mask path must be zero, so d/dtheta equals the derivative with M frozen.
    gen = torch.Generator().manual_seed(6)
    theta = torch.randn(3, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    a = torch.randn(3, 4, 4, generator=gen, dtype=torch.float64)
    label = torch.randint(0, 3, (4, 4), generator=gen)

    def composed():
        pm = theta * 2.0 + a
        ps = theta - a
        return loss_s(ps, build_mask(pm, label))

    composed().backward()
    frozen = build_mask(theta.detach() * 2.0 + a, label)
    num = central_diff(lambda: loss_s(theta - a, frozen), theta.detach())
    assert torch.allclose(theta.grad, num, atol=1e-6)
    assert build_mask(theta * 2.0 + a, label).targets.grad_fn is None


def test_consistency_matches_brute_force():
    gen = np.random.default_rng(7)
    for _ in range(100):
        r1, r2, ref = (gen.normal(size=(4, 3, 3)) for _ in range(3))
        p = consistency_pair([torch.tensor(r1), torch.tensor(r2)], torch.tensor(ref))
        for d in range(4):
            assert abs(p.c1[d].item() - brute_cos(r1[d], ref[d])) < 1e-6
            assert abs(p.c2[d].item() - brute_cos(r2[d], ref[d])) < 1e-6


def test_consistency_trivial_cases():
    gen = torch.Generator().manual_seed(8)
    x, ref = torch.randn(4, 3, 3, generator=gen), torch.randn(4, 3, 3, generator=gen)
    p = consistency_pair([x, x.clone()], ref)
    assert torch.equal(p.c1, p.c2)
    y = x.clone()
    y[2] = ref[2]
    assert consistency_pair([y, x], ref).c1[2].item() == pytest.approx(1.0, abs=1e-6)
    z = x.clone()
    z[1] = 0
    q = consistency_pair([z, x], ref)
    assert q.c1[1].item() == 0.0
    assert torch.isfinite(q.c1).all()
    with pytest.raises(ValueError):
        consistency_pair([x], ref)


def test_consistency_zero_channel_gradient_finite():
    x = torch.zeros(2, 3, 3, dtype=torch.float64, requires_grad=True)
    ref = torch.randn(2, 3, 3, dtype=torch.float64)
    p = consistency_pair([x, ref.clone()], ref)
    (p.c1.sum() + p.c2.sum()).backward()
    assert torch.isfinite(x.grad).all()


def test_blacked_out_modality_ranks_last_at_init():
    from magic_seg.data import CorruptionSpec, SceneConfig, apply_corruption, synthesize
    from magic_seg.model import MagicNet

    model = MagicNet.seeded(0)
    with torch.no_grad():
        for i, s in enumerate(synthesize(5, 8, SceneConfig(corruption_prob=0.0))):
            target = NAMES[i % 4]
            mods = dict(s.modalities)
            mods[target] = apply_corruption(mods[target], CorruptionSpec(target, "blackout", 1.0), None)
            feats = model.encode(mods, NAMES)
            r = rank_modalities(feats, model.aggregate(feats))
            assert r.zero_norm == (target,) and r.order[-1] == target
