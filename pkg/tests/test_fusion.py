import math

import numpy as np
import pytest

from stickermatch.errors import ConfigError, DimensionError
from stickermatch.fusion import (
    GuidedAttentionFusion,
    KnowledgeSelector,
    PlainAttentionFusion,
    ScoreMixer,
    final_score,
    iega_fuse,
    normalized_cosine,
    predict_pvl,
    samm_combine,
    samm_similarities,
)
from stickermatch.numcore import Linear, Tensor, grad_check

D = 8


@pytest.fixture
def selector():
    return KnowledgeSelector(np.random.default_rng(0), D)


def onehot(c, n=7):
    e = np.zeros(n)
    e[c] = 1.0
    return e


# ------------------------------------------------------------------ EIKS
def test_emotion_classify_closed_forms(selector):
    selector.classifier.weight.data[:] = 0.0
    selector.classifier.bias.data[:] = 0.0
    _, ce = selector.emotion_classify(Tensor(np.ones((1, D))), onehot(2)[None])
    assert ce.item() == pytest.approx(math.log(7.0), abs=1e-12)
    selector.classifier.bias.data[:] = -50.0
    selector.classifier.bias.data[4] = 50.0
    _, ce = selector.emotion_classify(Tensor(np.ones((1, D))), onehot(4)[None])
    assert ce.item() < 1e-12


def test_emotion_classify_bounded_below_by_entropy(selector):
    rng = np.random.default_rng(1)
    e = rng.dirichlet(np.ones(7), size=5)
    _, ce = selector.emotion_classify(Tensor(rng.normal(size=(5, D))), e)
    entropy = -(e * np.log(e)).sum(axis=1)
    assert np.all(ce.data >= entropy - 1e-12)


def test_emotion_classify_gradcheck(selector):
    x = Tensor(np.random.default_rng(2).normal(size=(3, D)), requires_grad=True)
    e = np.random.default_rng(3).dirichlet(np.ones(7), size=3)
    params = {"x": x, **dict(selector.classifier.named_parameters())}
    assert grad_check(lambda: selector.emotion_classify(x, e)[1].mean(), params).max_rel_error < 1e-6


def test_select_irrelevant_argmax_and_tie(selector, monkeypatch):
    monkeypatch.setattr(selector, "relation_losses", lambda k, e: np.array([0.2, 1.5, 0.3, 0.9]))
    assert selector.select_irrelevant(np.zeros((4, D)), onehot(0)) == 1


def test_select_irrelevant_identical_rows(selector):
    rows = np.tile(np.random.default_rng(4).normal(size=D), (4, 1))
    assert selector.select_irrelevant(rows, onehot(3)) == 0


def test_select_irrelevant_matches_recomputation(selector):
    rng = np.random.default_rng(5)
    k = rng.normal(size=(2, 4, D))
    e = rng.dirichlet(np.ones(7), size=2)
    w, b = selector.classifier.weight.data, selector.classifier.bias.data
    for i in range(2):
        losses = []
        for r in range(4):
            z = k[i, r] @ w + b
            logp = z - np.log(np.exp(z).sum())
            losses.append(-(e[i] * logp).sum())
        assert selector.select_irrelevant(k, e)[i] == int(np.argmax(losses))
        assert selector.select_irrelevant(k, 3.0 * e)[i] == int(np.argmax(losses))


def test_knowledge_adjust_eta_zero_is_identity(selector):
    k = Tensor(np.random.default_rng(6).normal(size=(2, 4, D)))
    np.testing.assert_array_equal(selector.knowledge_adjust(k, np.tile(onehot(1), (2, 1)), eta=0.0).data, k.data)


def test_knowledge_adjust_same_shift_on_every_row(selector):
    k = Tensor(np.random.default_rng(7).normal(size=(2, 4, D)))
    delta = selector.knowledge_adjust(k, np.tile(onehot(1), (2, 1))).data - k.data
    for r in range(1, 4):
        np.testing.assert_allclose(delta[:, r], delta[:, 0], atol=1e-15)
    assert np.abs(delta).max() > 0


def test_knowledge_adjust_descent_step(selector):
    rng = np.random.default_rng(8)
    k = Tensor(rng.normal(size=(3, 4, D)))
    e = rng.dirichlet(np.ones(7), size=3)
    r = selector.select_irrelevant(k, e)
    before = selector.relation_losses(k.data, e)[np.arange(3), r]
    adjusted = selector.knowledge_adjust(k, e, eta=1e-3, n_refine=1).data
    after = selector.relation_losses(adjusted, e)[np.arange(3), r]
    assert np.all(after < before)


def test_knowledge_adjust_first_step_is_gradient_oracle(selector):
    rng = np.random.default_rng(9)
    k = rng.normal(size=(1, 4, D))
    e = rng.dirichlet(np.ones(7), size=1)
    r = int(selector.select_irrelevant(k, e)[0])
    eps = 1e-6
    g = np.zeros(D)
    for j in range(D):
        kp, km = k.copy(), k.copy()
        kp[0, r, j] += eps
        km[0, r, j] -= eps
        g[j] = (selector.relation_losses(kp, e)[0, r] - selector.relation_losses(km, e)[0, r]) / (2 * eps)
    delta = selector.knowledge_adjust(Tensor(k), e, eta=0.1, n_refine=1).data[0, 0] - k[0, 0]
    np.testing.assert_allclose(delta, -0.1 * g, atol=1e-8)


def test_eiks_rejects_bad_hyperparameters():
    with pytest.raises(ConfigError):
        KnowledgeSelector(np.random.default_rng(0), D, eta=0.0)
    with pytest.raises(ConfigError):
        KnowledgeSelector(np.random.default_rng(0), D, n_refine=0)


def test_gate_fuse_properties(selector):
    rng = np.random.default_rng(10)
    a, b = rng.normal(size=(2, 4, D)), rng.normal(size=(2, 4, D))
    same = selector.gate_fuse(Tensor(a), Tensor(a)).data
    np.testing.assert_allclose(same, a, atol=1e-15)
    out = selector.gate_fuse(Tensor(a), Tensor(b)).data
    assert np.all(out >= np.minimum(a, b) - 1e-15) and np.all(out <= np.maximum(a, b) + 1e-15)
    selector.gate.weight.data[:] = 0.0
    selector.gate.bias.data[:] = 0.0
    np.testing.assert_allclose(selector.gate_fuse(Tensor(a), Tensor(b)).data, (a + b) / 2, atol=1e-15)
    with pytest.raises(DimensionError):
        selector.gate_fuse(Tensor(a), Tensor(b[:, :3]))


def test_eiks_end_to_end_gradcheck(selector):
    rng = np.random.default_rng(11)
    k = Tensor(rng.normal(size=(2, 4, D)), requires_grad=True)
    e = rng.dirichlet(np.ones(7), size=2)
    params = {"k": k, **dict(selector.named_parameters())}
    assert grad_check(lambda: (selector(k, e) ** 2).sum(), params).max_rel_error < 1e-4


# ------------------------------------------------------------------ IEGA
@pytest.fixture
def fusion():
    return GuidedAttentionFusion(np.random.default_rng(12), D, 2)


def test_iega_shapes_and_row_stochastic(fusion):
    rng = np.random.default_rng(13)
    fv, ft, eit = (Tensor(rng.normal(size=s)) for s in ((5, D), (3, D), (5, D)))
    tr = fusion(fv, ft, eit)
    assert tr.z_fuse.shape == (3, D)
    assert tr.attn_visual.shape == (2, 5, 5) and tr.attn_text.shape == (2, 3, 5)
    np.testing.assert_allclose(tr.attn_visual.data.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(tr.attn_text.data.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(iega_fuse(fusion, fv, ft, eit).data, tr.z_fuse.data)


def test_iega_zero_projections_give_uniform_means(fusion):
    """With zero query projections every attention output is the plain mean of the values."""
    fusion.q_ei.weight.data[:] = 0.0
    fusion.q_t.weight.data[:] = 0.0
    rng = np.random.default_rng(14)
    fv, ft, eit = (Tensor(rng.normal(size=s)) for s in ((5, D), (3, D), (4, D)))
    tr = fusion(fv, ft, eit)
    np.testing.assert_allclose(tr.attn_visual.data, 1 / 5, atol=1e-15)
    np.testing.assert_allclose(tr.attn_text.data, 1 / 4, atol=1e-15)


def test_iega_divisibility():
    with pytest.raises(ConfigError):
        GuidedAttentionFusion(np.random.default_rng(0), 10, 4)


def test_iega_sd_mask_zero_drops_branch(fusion):
    rng = np.random.default_rng(15)
    fv, ft, eit = (Tensor(rng.normal(size=s)) for s in ((5, D), (3, D), (5, D)))
    dropped = fusion(fv, ft, eit, sd_mask=np.zeros((1, 1))).z_fuse.data
    h = fusion.out.ln(ft)
    expected = h + fusion.out.fc2(Tensor(0.0) + _gelu_np(fusion.out.fc1(h).data)).data
    np.testing.assert_allclose(dropped, expected.data, atol=1e-12)


def _gelu_np(x):
    return Tensor(0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3))))


def test_iega_gradcheck(fusion):
    rng = np.random.default_rng(16)
    fv, ft, eit = (Tensor(rng.normal(size=s), requires_grad=True) for s in ((2, 4, D), (2, 1, D), (2, 3, D)))
    params = {"fv": fv, "ft": ft, "eit": eit, **dict(fusion.named_parameters())}
    sd = np.array([[[1.0 / 0.9]], [[0.0]]])
    rep = grad_check(lambda: (fusion(fv, ft, eit, sd).z_fuse ** 2).sum(), params, max_per_param=10)
    assert rep.max_rel_error < 1e-4


def test_plain_fusion_masks_padding():
    rng = np.random.default_rng(17)
    plain = PlainAttentionFusion(rng, D, 2)
    fv = Tensor(rng.normal(size=(1, 2, 3, D)))
    ft_all = rng.normal(size=(1, 1, 4, D))
    valid = np.array([[True, True, False, False]])
    q = Tensor(ft_all[:, :, :1])
    a = plain(fv, q, Tensor(ft_all), valid)
    ft_all2 = ft_all.copy()
    ft_all2[..., 2:, :] = 99.0  # garbage in padded slots
    b = plain(fv, q, Tensor(ft_all2), valid)
    np.testing.assert_allclose(a.z_fuse.data, b.z_fuse.data, atol=1e-12)
    np.testing.assert_allclose(a.attn_text.data.sum(-1), 1.0, atol=1e-12)
    assert np.all(a.attn_text.data[..., 2:4] < 1e-300)


# ------------------------------------------------------------------ SAMM
def test_predict_pvl_zero_head_is_half():
    head = Linear(np.random.default_rng(18), D, 1)
    head.weight.data[:] = 0.0
    head.bias.data[:] = 0.0
    z = Tensor(np.random.default_rng(19).normal(size=(3, 5, D)))
    np.testing.assert_array_equal(predict_pvl(head, z).data, np.full(3, 0.5))


def test_predict_pvl_uses_cls_row_and_gradcheck():
    rng = np.random.default_rng(20)
    head = Linear(rng, D, 1)
    z = Tensor(rng.normal(size=(2, 3, D)), requires_grad=True)
    logit = z.data[:, 0] @ head.weight.data[:, 0] + head.bias.data[0]
    np.testing.assert_allclose(predict_pvl(head, z).data, 1 / (1 + np.exp(-logit)), atol=1e-15)
    params = {"z": z, **dict(head.named_parameters())}
    assert grad_check(lambda: predict_pvl(head, z).sum(), params).max_rel_error < 1e-6


def test_normalized_cosine_cases():
    a = Tensor(np.array([1.0, 2.0, 0.5]))
    assert normalized_cosine(a, a).item() == pytest.approx(1.0, abs=1e-15)
    assert normalized_cosine(a, a * -1.0).item() == pytest.approx(0.0, abs=1e-15)
    assert normalized_cosine(Tensor(np.array([1.0, 0.0])), Tensor(np.array([0.0, 1.0]))).item() == 0.5
    b = Tensor(np.array([0.3, -1.0, 2.0]))
    assert normalized_cosine(a * 3.0, b).item() == pytest.approx(normalized_cosine(a, b).item(), abs=1e-15)
    s_emo, s_int = samm_similarities(a, b, b, a)
    assert s_emo.item() == s_int.item()


def test_combine_and_final_score():
    assert samm_combine(0.8, 0.4, 0.5) == pytest.approx(0.6)
    assert final_score(0.3, 0.9, 1.0) == 0.3
    assert final_score(0.3, 0.9, 0.0) == 0.9


def test_score_mixer_init():
    m = ScoreMixer()
    assert m.alpha.item() == 0.5 and m.beta.item() == 0.5
    assert len(list(m.named_parameters())) == 2
