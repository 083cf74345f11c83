import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from talkhead import autodiff as ad
from talkhead import sfe
from talkhead.autodiff import Tensor
from talkhead.layers import GRUCell, Perceptron

# -log(e / (e + 1 + e^-1)), evaluated independently
T3_ROW_TERM = 0.40760596444437466


def tiny_model(memory="cs", seed=0):
    cfg = sfe.SfeConfig(input_dim=5, hidden=3, feature_dim=4, content_slots=2, identity_slots=2,
                        address_hidden=3, memory=memory, target_hidden=3)
    return sfe.SfeModel(cfg, np.random.default_rng(seed))


def tiny_batch(rng, b=2, frames=3, content_dim=40, identity_dim=102):
    xs = [rng.normal(size=(4 * frames, 5)) for _ in range(b)]
    cs = [rng.normal(size=(frames, content_dim)) for _ in range(b)]
    return xs, cs, rng.normal(size=(b, identity_dim))


def test_bigru_zero_weights_zero_output():
    m = tiny_model()
    for cell in (m.gru_fwd, m.gru_bwd):
        for p in cell.parameters().values():
            p.data[:] = 0.0
    h = m.bigru_encode(np.zeros((6, 5)))
    assert h.shape == (6, 6) and not h.data.any()


def test_bigru_reversal_swaps_directions_with_shared_weights():
    rng = np.random.default_rng(1)
    m = tiny_model()
    m.gru_bwd.load_state_dict(m.gru_fwd.state_dict())
    x = rng.normal(size=(7, 5))
    h = m.bigru_encode(x).data
    hr = m.bigru_encode(x[::-1].copy()).data
    H = 3
    assert np.allclose(h[:, :H], hr[::-1, H:], atol=1e-12)
    assert np.allclose(h[:, H:], hr[::-1, :H], atol=1e-12)


def test_bigru_matches_explicit_recurrence():
    rng = np.random.default_rng(2)
    m = tiny_model()
    x = rng.normal(size=(4, 5))

    def run(cell, seq):
        W, U, b = cell.W.data, cell.U.data, cell.b.data
        H = cell.hidden
        h = np.zeros(H)
        out = []
        for xt in seq:
            xw, hu = xt @ W + b, h @ U
            sig = lambda v: 1 / (1 + np.exp(-v))
            z, r = sig(xw[:H] + hu[:H]), sig(xw[H:2 * H] + hu[H:2 * H])
            n = np.tanh(xw[2 * H:] + r * hu[2 * H:])
            h = (1 - z) * n + z * h
            out.append(h)
        return np.array(out)

    fwd = run(m.gru_fwd, x)
    bwd = run(m.gru_bwd, x[::-1])[::-1]
    assert np.allclose(m.bigru_encode(x).data, np.hstack([fwd, bwd]), atol=1e-12)


def test_gru_gradient_three_steps():
    rng = np.random.default_rng(3)
    cell = GRUCell(rng, 2, 3)
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    w = rng.normal(size=(1, 3))

    def loss():
        xw = cell.input_projection(x)
        h = Tensor(np.zeros((1, 3)))
        for t in range(3):
            h = cell.step(xw[t:t + 1], h)
        return ad.sum_(ad.mul(h, Tensor(w)))

    assert ad.gradcheck(loss, [x, *cell.parameters().values()]) < 1e-4


def test_memory_read_examples():
    rng = np.random.default_rng(4)
    bank = sfe.MemoryBank(rng, 4, 3)
    one_hot = Tensor(np.array([[1.0, 0.0, 0.0, 0.0]]))
    assert np.array_equal(bank.read(one_hot).data[0], bank.M.data[0])
    addr = Perceptron(rng, [6, 5, 4])
    for p in addr.layers["1"].parameters().values():
        p.data[:] = 0.0  # zero logits
    p, y = sfe.memory_read(bank, addr, Tensor(rng.normal(size=6)))
    assert np.allclose(p.data, 0.25)
    assert np.allclose(y.data, bank.M.data.mean(axis=0), atol=1e-15)


def test_memory_read_in_convex_hull():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        bank = sfe.MemoryBank(rng, int(rng.integers(1, 9)), int(rng.integers(1, 6)))
        addr = Perceptron(rng, [4, 6, bank.M.shape[0]])
        _, y = sfe.memory_read(bank, addr, Tensor(rng.normal(size=(5, 4)) * 3))
        lo, hi = bank.M.data.min(axis=0), bank.M.data.max(axis=0)
        assert (y.data >= lo - 1e-12).all() and (y.data <= hi + 1e-12).all()


def test_addressing_on_simplex_1000_draws():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        k = int(rng.integers(1, 9))
        bank = sfe.MemoryBank(rng, k, 3)
        addr = Perceptron(rng, [4, 5, k])
        p, _ = sfe.memory_read(bank, addr, Tensor(rng.normal(size=(3, 4)) * rng.uniform(0.1, 50)))
        assert (p.data >= 0).all()
        assert np.all(np.abs(p.data.sum(axis=1) - 1.0) <= 1e-9)


def test_similarity_examples():
    u = Tensor(np.array([1.0, 2.0, 3.0]))
    assert sfe.similarity(u, u, sfe.SimilarityParams(1.0, 0.0)).item() == pytest.approx(math.e, rel=1e-9)
    a, b = Tensor(np.array([1.0, 0.0])), Tensor(np.array([0.0, 1.0]))
    assert sfe.similarity(a, b, sfe.SimilarityParams(5.0, -2.0)).item() == pytest.approx(math.exp(-2), rel=1e-9)
    sp = sfe.SimilarityParams()
    assert sp.w.item() == pytest.approx(10.0) and sp.b.item() == -5.0


def test_similarity_monotone_in_cos():
    sp = sfe.SimilarityParams(3.0, 0.5)
    angles = np.linspace(np.pi, 0, 50)
    vals = [sfe.similarity(Tensor(np.array([1.0, 0.0])), Tensor(np.array([np.cos(a), np.sin(a)])), sp).item()
            for a in angles]
    assert all(x < y for x, y in zip(vals, vals[1:]))


def test_contrastive_uniform_is_log_t():
    sp = sfe.SimilarityParams()
    for t in (2, 3, 7):
        y = Tensor(np.ones((t, 4)))
        assert sfe.contrastive_loss(y, y, sp).item() == pytest.approx(math.log(t), abs=1e-12)


def test_contrastive_hand_case():
    sp = sfe.SimilarityParams(1.0, 0.0)
    y_hat = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    y = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
    cos = np.array([[1, 0, -1], [0, 1, 0], [1 / math.sqrt(2), 1 / math.sqrt(2), -1 / math.sqrt(2)]])
    rows = [math.log(np.exp(c).sum()) - c[i] for i, c in enumerate(cos)]
    assert rows[0] == pytest.approx(T3_ROW_TERM, abs=1e-12)
    assert sfe.contrastive_loss(y_hat, y, sp).item() == pytest.approx(np.mean(rows), abs=1e-9)


def test_contrastive_needs_two_rows():
    with pytest.raises(ad.ContractError):
        sfe.contrastive_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), sfe.SimilarityParams())


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000), st.floats(0.1, 30))
def test_contrastive_bounds(t, seed, w):
    rng = np.random.default_rng(seed)
    sp = sfe.SimilarityParams(w, float(rng.normal()))
    loss = sfe.contrastive_loss(Tensor(rng.normal(size=(t, 3))), Tensor(rng.normal(size=(t, 3))), sp).item()
    assert loss >= 0.0
    same = Tensor(np.tile(rng.normal(size=3), (t, 1)))
    assert sfe.contrastive_loss(same, same, sp).item() <= math.log(t) + 1e-9


def test_identity_loss_two_identical_sequences_is_log2():
    rng = np.random.default_rng(6)
    m = tiny_model()
    x = rng.normal(size=(12, 5))
    c = rng.normal(size=(3, 40))
    ident = rng.normal(size=102)
    _, ls = m.loss([x, x.copy()], [c, c.copy()], np.stack([ident, ident]))
    assert ls.item() == pytest.approx(math.log(2), abs=1e-12)


def test_loss_needs_batch_of_two():
    rng = np.random.default_rng(7)
    m = tiny_model()
    xs, cs, ids = tiny_batch(rng, b=1)
    with pytest.raises(ad.ContractError):
        m.loss(xs, cs, ids)


@pytest.mark.parametrize("memory", sfe.MEMORY_MODES)
def test_full_loss_gradient_tiny(memory):
    rng = np.random.default_rng(8)
    m = tiny_model(memory)
    xs, cs, ids = tiny_batch(rng)
    params = list(m.parameters().values())
    assert ad.gradcheck(lambda: sfe.sfe_loss(m, xs, cs, ids), params) < 1e-4


def test_memory_modes_structure():
    assert "identity_bank.M" in tiny_model("cs").parameters()
    w = tiny_model("w").parameters()
    assert "identity_bank.M" not in w and "content_bank.M" in w and "identity_addr.layers.0.W" in w
    wo = tiny_model("wo").parameters()
    assert not any("bank" in k for k in wo)


def test_loss_decreases_over_200_steps():
    from talkhead.trainer import AdamState, adam_step
    rng = np.random.default_rng(9)
    m = tiny_model()
    xs, cs, ids = tiny_batch(rng, b=4)
    params = m.parameters()
    opt = AdamState(lr=1e-2)
    losses = []
    for _ in range(200):
        m.zero_grad()
        loss = sfe.sfe_loss(m, xs, cs, ids)
        ad.backward(loss)
        adam_step(params, opt)
        losses.append(loss.item())
    assert losses[-1] < losses[0]


def test_loss_deterministic():
    def run():
        rng = np.random.default_rng(10)
        m = tiny_model(seed=3)
        xs, cs, ids = tiny_batch(rng, b=3)
        return sfe.sfe_loss(m, xs, cs, ids).item()
    assert run() == run()


def test_pooling_matrix():
    P = sfe.pooling_matrix(67, 17)
    assert np.allclose(P.sum(axis=1), 1.0)
    assert np.allclose(P[0, :4], 0.25) and np.allclose(P[-1, 64:], 1 / 3)
    P = sfe.pooling_matrix(5, 3)
    assert np.allclose(P.sum(axis=1), 1.0)


def test_target_inputs():
    from talkhead import face, geometry
    tpl = face.canonical_face()
    track = np.stack([tpl + 0.01 * k for k in range(3)])
    decs = [geometry.align(f, tpl) for f in track]
    p_align = np.stack([d.p_align for d in decs])
    poses = np.stack([d.pose.as_vector() for d in decs])
    c = sfe.content_target_input(p_align)
    assert c.shape == (3, 40)
    assert np.allclose(c.reshape(3, 20, 2).mean(axis=1), 0.0)
    s = sfe.identity_target_input(p_align, poses, tpl)
    assert s.shape == (sfe.SfeConfig().identity_target_dim,)
