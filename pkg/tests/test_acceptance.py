"""Acceptance criteria 1-10, each at its stated tolerance.

Each test records one PASS/FAIL line (printed in the terminal summary and
immediately to stdout) and then asserts, so a failing criterion fails its
test.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from talkhead import autodiff as ad
from talkhead import cli, data, face, geometry, mdn, metrics, render, sfe, trainer
from talkhead.autodiff import Tensor
from talkhead.layers import Perceptron
from talkhead.metrics import ScoredTrial

SEEDS = range(50)


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- 1. gradients -------------------------------------------------------------

def _p(rng, *shape, positive=False):
    return Tensor(rng.uniform(0.5, 2.0, shape) if positive else rng.normal(size=shape), requires_grad=True)


def _proj(fn, *args):
    out = fn(*args)
    w = Tensor(np.random.default_rng(999).normal(size=out.shape))
    return ad.sum_(ad.mul(out, w))


def _op_cases(rng):
    x, y = _p(rng, 3, 4), _p(rng, 3, 4, positive=True)
    s = _p(rng, 1, positive=True)
    a, b, bias = _p(rng, 3, 4), _p(rng, 4, 2), _p(rng, 2)
    u, v = _p(rng, 5), _p(rng, 5)
    xw, h, U = _p(rng, 2, 9), _p(rng, 2, 3), _p(rng, 3, 9)
    return {
        "add": (lambda: ad.add(x, y), [x, y]), "sub": (lambda: ad.sub(x, s), [x, s]),
        "mul": (lambda: ad.mul(s, y), [s, y]), "div": (lambda: ad.div(x, y), [x, y]),
        "neg": (lambda: ad.neg(x), [x]), "square": (lambda: ad.square(x), [x]),
        "exp": (lambda: ad.exp(x), [x]), "log": (lambda: ad.log(y), [y]),
        "tanh": (lambda: ad.tanh(x), [x]), "sigmoid": (lambda: ad.sigmoid(x), [x]),
        "softplus": (lambda: ad.softplus(x), [x]), "matmul": (lambda: ad.matmul(a, b), [a, b]),
        "linear": (lambda: ad.linear(a, b, bias), [a, b, bias]), "transpose": (lambda: ad.transpose(x), [x]),
        "reshape": (lambda: ad.reshape(x, (4, 3)), [x]), "concat": (lambda: ad.concat([x, a], axis=0), [x, a]),
        "slice": (lambda: x[1:, :2], [x]), "index": (lambda: x[[0, 2, 2]], [x]),
        "sum": (lambda: ad.reshape(ad.sum_(x, axis=1), (-1, 1)), [x]),
        "mean": (lambda: ad.reshape(ad.mean(x), (1,)), [x]),
        "logsumexp": (lambda: ad.logsumexp(x, axis=1), [x]),
        "softmax": (lambda: ad.softmax(x, axis=1), [x]), "log_softmax": (lambda: ad.log_softmax(x, axis=1), [x]),
        "normalize_rows": (lambda: ad.normalize_rows(x), [x]),
        "cosine_similarity": (lambda: ad.reshape(ad.cosine_similarity(u, v), (1,)), [u, v]),
        "cosine_matrix": (lambda: ad.cosine_matrix(x, a), [x, a]),
        "gru_step": (lambda: ad.gru_step(xw, h, U), [xw, h, U]),
    }


def test_criterion_1_gradients():
    t0 = time.time()
    worst = {}
    for seed in SEEDS:
        for name, (fn, params) in _op_cases(np.random.default_rng(seed)).items():
            err = ad.gradcheck(lambda: _proj(fn), params)
            worst[name] = max(worst.get(name, 0.0), err)
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        cfg = sfe.SfeConfig(input_dim=4, hidden=3, feature_dim=4, content_slots=2, identity_slots=2,
                            address_hidden=3, target_hidden=3, content_target_dim=4, identity_target_dim=3)
        model = sfe.SfeModel(cfg, rng)
        xs = [rng.normal(size=(12, 4)) for _ in range(2)]
        cs = [rng.normal(size=(3, 4)) for _ in range(2)]
        ids = rng.normal(size=(2, 3))
        err = ad.gradcheck(lambda: sfe.sfe_loss(model, xs, cs, ids), list(model.parameters().values()))
        worst["contrastive_total"] = max(worst.get("contrastive_total", 0.0), err)
        mcfg = mdn.MdnConfig(speech_dim=3, ref_dim=2, n_components=3, n_points=2, hidden=4)
        m = mdn.MdnModel(mcfg, rng)
        for head in (m.alpha_head, m.sigma_head):
            head.W.data[:] = rng.normal(size=head.W.shape) * 0.5
        sp, rf, tg = rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), rng.normal(size=(4, mcfg.out_dim))
        err = ad.gradcheck(lambda: mdn.mdn_nll(m.forward(sp, rf), tg), list(m.parameters().values()))
        worst["mixture_nll"] = max(worst.get("mixture_nll", 0.0), err)
    elapsed = time.time() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    record(1, not bad and elapsed < 60,
           f"{len(worst)} ops/losses x 50 seeds, worst rel err {max(worst.values()):.2e}, {elapsed:.1f}s"
           + (f", failing {bad}" if bad else ""))


# -- 2. normalisation ---------------------------------------------------------

def test_criterion_2_simplex():
    rng = np.random.default_rng(2)
    worst_sum, min_entry, min_sigma = 0.0, np.inf, np.inf
    for i in range(1000):
        k = int(rng.integers(1, 9))
        logits = rng.normal(size=(3, k)) * 10 ** rng.uniform(-2, 3)
        p = ad.softmax(logits, axis=1).data
        bank = sfe.MemoryBank(rng, k, 3)
        addr = Perceptron(rng, [4, 5, k])
        q, _ = sfe.memory_read(bank, addr, Tensor(rng.normal(size=(3, 4)) * rng.uniform(0.1, 50)))
        m = mdn.MdnModel(mdn.MdnConfig(speech_dim=3, ref_dim=2, n_components=k, n_points=2, hidden=4), rng)
        for head in (m.alpha_head, m.sigma_head):
            head.W.data[:] = rng.normal(size=head.W.shape) * rng.uniform(0.1, 30)
            head.b.data[:] = rng.normal(size=head.b.shape) * 10
        params = m.forward(rng.normal(size=(2, 3)) * 10, rng.normal(size=(2, 2)) * 10)
        for w in (p, q.data, params.alpha):
            worst_sum = max(worst_sum, float(np.abs(w.sum(axis=1) - 1).max()))
            min_entry = min(min_entry, float(w.min()))
        min_sigma = min(min_sigma, float(params.sigma.data.min()))
    ok = worst_sum <= 1e-9 and min_entry >= 0 and min_sigma >= 1e-3
    record(2, ok, f"1000 draws: max |sum-1| {worst_sum:.1e}, min weight {min_entry:.1e}, min sigma {min_sigma:.4g}")


# -- 3. geometry --------------------------------------------------------------

def test_criterion_3_geometry():
    rng = np.random.default_rng(3)
    tpl = face.canonical_face()
    rt, pose_err = 0.0, 0.0
    for _ in range(100):
        f = rng.normal(size=(68, 2)) * 2
        dec = geometry.align(f, tpl)
        rt = max(rt, float(np.abs(geometry.reconstruct(dec.p_align, dec.pose) - f).max()))
        theta, t = rng.uniform(-math.pi + 1e-3, math.pi), rng.normal(size=2) * 5
        got = geometry.align(geometry.apply_rigid(tpl, theta, t), tpl).pose
        pose_err = max(pose_err, abs(geometry.wrap_angle(got.theta - theta)), float(np.abs(got.t - t).max()))
    record(3, rt < 1e-9 and pose_err < 1e-9, f"round trip {rt:.1e}, pose recovery {pose_err:.1e}")


# -- 4. mixture vs single -----------------------------------------------------

def test_criterion_4_mixture_sweep():
    t0 = time.time()
    utts = data.generate_synthetic(data.SyntheticSpec(n_speakers=4, n_utterances=80, modes_per_phone=3, seed=4))
    sfe_cfg = trainer.TrainConfig(seed=4, stage="sfe", epochs=30, eval_every=10, sfe_hidden=32, feature_dim=32,
                                  address_hidden=32)
    mdn_cfg = trainer.TrainConfig(seed=4, stage="mdn", epochs=150, eval_every=10, sfe_hidden=32, feature_dim=32,
                                  address_hidden=32, mdn_hidden=64)
    report = trainer.run_ablation(utts, sfe_cfg, mdn_cfg, components=[1, 2, 3, 5, 8])
    elapsed = time.time() - t0
    lmd = {r.n_components: r.lmd for r in report.find(stage="mdn")}
    gain = 1 - lmd[3] / lmd[1]
    plateau = max(abs(lmd[m] - lmd[3]) / lmd[3] for m in (5, 8))
    ok = gain >= 0.2 and plateau <= 0.1 and elapsed < 600
    record(4, ok, "LMD " + ", ".join(f"M={m} {v:.4f}" for m, v in sorted(lmd.items()))
           + f"; gain M=3 vs M=1 {gain:+.3f} (need >= 0.2), plateau {plateau:.3f} (need <= 0.1), {elapsed:.0f}s")


# -- 5. bimodal gap -----------------------------------------------------------

def test_criterion_5_bimodal():
    t0 = time.time()
    eps = 0.1
    one, two = trainer.train_bimodal(1, seed=5, eps=eps), trainer.train_bimodal(2, seed=5, eps=eps)
    floor = 0.5 * math.log(2 * math.pi * math.e * (1 + eps ** 2))
    elapsed = time.time() - t0
    ok = two < one - 0.5 and elapsed < 60
    record(5, ok, f"NLL M=1 {one:.4f} (floor {floor:.4f}), M=2 {two:.4f}, gap {one - two:.3f} nats, {elapsed:.1f}s")


# -- 6. memory ordering -------------------------------------------------------

def test_criterion_6_memory_order():
    t0 = time.time()
    votes, details = 0, []
    for seed in range(3):
        utts = data.generate_synthetic(data.SyntheticSpec(n_speakers=8, n_utterances=384, modes_per_phone=3,
                                                          seed=seed))
        train_set, eval_set = utts[:192], utts[192:]
        eer = {}
        for memory in ("cs", "w", "wo"):
            cfg = trainer.TrainConfig(seed=seed, stage="sfe", epochs=60, eval_every=60, memory=memory,
                                      sfe_hidden=32, feature_dim=32, address_hidden=32, batch_size=8)
            eer[memory] = trainer.speaker_eer(trainer.train_sfe(cfg, train_set).model, eval_set)
        ordered = eer["cs"] <= eer["w"] <= eer["wo"]
        votes += ordered
        details.append(f"seed {seed}: cs {eer['cs']:.3f} w {eer['w']:.3f} wo {eer['wo']:.3f}")
    elapsed = time.time() - t0
    record(6, votes >= 2 and elapsed < 900, f"{votes}/3 seeds ordered; " + "; ".join(details) + f"; {elapsed:.0f}s")


# -- 7. regression mode -------------------------------------------------------

def _regression_pair(seed, head_motion):
    utts = data.generate_synthetic(data.SyntheticSpec(n_speakers=4, n_utterances=40, modes_per_phone=1, seed=seed,
                                                      head_motion=head_motion))
    base = trainer.TrainConfig(seed=seed, stage="sfe", epochs=40, eval_every=40, sfe_hidden=32, feature_dim=32,
                               address_hidden=32, mdn_hidden=64)
    sfe_ck = trainer.train_sfe(base, utts).checkpoint
    out = {}
    for reg in ("f_tt", "f_a"):
        res = trainer.train_mdn(base.replace(stage="mdn", epochs=200, eval_every=50, regression=reg), utts,
                                sfe_checkpoint=sfe_ck)
        out[reg] = res.checkpoint.meta["best_metrics"]
    return out


def test_criterion_7_regression_mode():
    wins, moving, still = 0, [], []
    for seed in range(3):
        r = _regression_pair(seed, head_motion=3.0)
        wins += r["f_tt"]["rd"] <= r["f_a"]["rd"]
        moving.append(f"{r['f_tt']['rd']:.3f}/{r['f_a']['rd']:.3f}")
    r0 = _regression_pair(0, head_motion=0.0)
    gap = abs(r0["f_tt"]["lmd_median"] - r0["f_a"]["lmd_median"])
    record(7, wins >= 2 and gap < 0.02,
           f"large motion RD f_tt/f_a per seed {', '.join(moving)} ({wins}/3 f_tt <= f_a); "
           f"zero motion median LMD gap {gap:.4f} (need < 0.02)")


# -- 8. metric oracles --------------------------------------------------------

def _naive_ssim(a, b):
    x = np.arange(11) - 5.0
    g = np.exp(-x ** 2 / 4.5)
    w = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va, vb, cv = (w * (pa - ma) ** 2).sum(), (w * (pb - mb) ** 2).sum(), (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + 1e-4) * (2 * cv + 9e-4) / ((ma ** 2 + mb ** 2 + 1e-4) * (va + vb + 9e-4)))
    return float(np.mean(vals))


def test_criterion_8_metric_oracles():
    rng = np.random.default_rng(8)
    t = face.canonical_face()[None] + 0.01 * rng.normal(size=(4, 68, 2))
    board = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)
    img = rng.uniform(size=(16, 16))
    scores, labels = rng.normal(size=10_000), rng.uniform(size=10_000) < 0.5

    def tr(pos, neg):
        return [ScoredTrial(s, True) for s in pos] + [ScoredTrial(s, False) for s in neg]

    checks = {
        "lmd identical": metrics.lmd(t, t) == 0.0,
        "lmd 3-4-5": abs(metrics.lmd(t + [3.0, 4.0], t, center=False) - 5.0) < 1e-12,
        "lmd centred offset": abs(metrics.lmd(t + [3.0, 4.0], t)) < 1e-12,
        "rd identical": metrics.rd([0.1, 0.2], [0.1, 0.2]) == 0.0,
        "rd quarter": abs(metrics.rd([0.0], [math.pi / 2]) - 1.5708) < 1e-4,
        "rd wrap": abs(metrics.rd([3.1], [-3.1]) - (2 * math.pi - 6.2)) < 1e-12,
        "psnr cap": metrics.psnr(img, img) == 100.0,
        "psnr 20 dB": abs(metrics.psnr(img, img + 0.1) - 20.0) < 1e-9,
        "psnr 0 dB": abs(metrics.psnr(np.zeros((4, 4)), np.ones((4, 4)))) < 1e-12,
        "ssim identical": abs(metrics.ssim(img, img) - 1.0) < 1e-12,
        "ssim checkerboard": metrics.ssim(board, 1 - board) < 0
                             and abs(metrics.ssim(board, 1 - board) - _naive_ssim(board, 1 - board)) < 1e-12,
        "ssim symmetric": abs(metrics.ssim(img, board) - metrics.ssim(board, img)) <= 1e-12,
        "eer separated": metrics.eer(tr([0.9, 0.8], [0.1, 0.2])) == 0.0,
        "eer random": abs(metrics.eer([ScoredTrial(float(s), bool(l)) for s, l in zip(scores, labels)]) - 0.5) <= 0.02,
        "eer hand": abs(metrics.eer(tr([0.8, 0.4], [0.6, 0.2])) - 0.25) < 1e-12,
    }
    failed = [k for k, v in checks.items() if not v]
    record(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} metric examples" +
           (f", failing {failed}" if failed else ""))


# -- 9. determinism -----------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    run = lambda *a: cli.main([str(x) for x in a])
    assert run("synth-data", "--out", tmp_path / "ds", "--n-utterances", 8, "--seed", 9) == 0
    m = tmp_path / "ds/manifest.jsonl"
    flags = ["--seed", 9, "--epochs", 20, "--eval-every", 5]
    for k in ("a", "b"):
        assert run("train-sfe", "--data", m, "--out", tmp_path / f"sfe_{k}", "--log", tmp_path / f"sfe_{k}.log", *flags) == 0
    for k in ("a", "b"):
        assert run("train-mdn", "--data", m, "--sfe", tmp_path / "sfe_a", "--out", tmp_path / f"mdn_{k}",
                   "--log", tmp_path / f"mdn_{k}.log", *flags) == 0
    same = all((tmp_path / f"{s}_a").read_bytes() == (tmp_path / f"{s}_b").read_bytes() for s in ("sfe", "mdn"))
    assert run("train-sfe", "--data", m, "--out", tmp_path / "sfe_p", "--stop-after", 7, *flags) == 0
    assert run("train-sfe", "--data", m, "--out", tmp_path / "sfe_r", "--resume", tmp_path / "sfe_p",
               "--log", tmp_path / "sfe_r.log", *flags) == 0
    assert run("train-mdn", "--data", m, "--sfe", tmp_path / "sfe_a", "--out", tmp_path / "mdn_p",
               "--stop-after", 11, *flags) == 0
    assert run("train-mdn", "--data", m, "--sfe", tmp_path / "sfe_a", "--out", tmp_path / "mdn_r",
               "--resume", tmp_path / "mdn_p", "--log", tmp_path / "mdn_r.log", *flags) == 0
    resumed = all((tmp_path / f"{s}_r.log").read_text() == (tmp_path / f"{s}_a.log").read_text()
                  and (tmp_path / f"{s}_r").read_bytes() == (tmp_path / f"{s}_a").read_bytes() for s in ("sfe", "mdn"))
    record(9, same and resumed, f"repeat runs bit-identical: {same}; resumed loss logs and checkpoints identical: {resumed}")


# -- 10. pipeline smoke -------------------------------------------------------

def test_criterion_10_pipeline(tmp_path):
    t0 = time.time()
    run = lambda *a: cli.main([str(x) for x in a])
    ok = run("synth-data", "--out", tmp_path / "ds", "--n-utterances", 8, "--seed", 10) == 0
    m = tmp_path / "ds/manifest.jsonl"
    ok &= run("train-sfe", "--data", m, "--out", tmp_path / "sfe.ckpt", "--seed", 10) == 0
    ok &= run("train-mdn", "--data", m, "--sfe", tmp_path / "sfe.ckpt", "--out", tmp_path / "mdn.ckpt", "--seed", 10) == 0
    val = trainer.load_checkpoint(tmp_path / "mdn.ckpt").meta["split"]["val"]
    gens, refs = [], []
    for uid in val:
        gen, ref = tmp_path / f"gen_{uid}.txt", tmp_path / f"ds/landmarks/{uid}.txt"
        ok &= run("infer", "--mdn", tmp_path / "mdn.ckpt", "--sfe", tmp_path / "sfe.ckpt",
                  "--wav", tmp_path / f"ds/wav/{uid}.wav", "--reference", ref, "--out", gen) == 0
        gens.append(gen)
        refs.append(ref)
    ok &= run("eval", "--generated", *gens, "--reference", *refs, "--mdn", tmp_path / "mdn.ckpt",
              "--out", tmp_path / "report.jsonl") == 0
    for gen in gens:
        ok &= run("render", "--track", gen, "--out-dir", tmp_path / "frames", "--prefix", gen.stem + "_") == 0
    report = (tmp_path / "report.jsonl").read_text().splitlines() if (tmp_path / "report.jsonl").exists() else []
    n_pgm = len(list((tmp_path / "frames").glob("*.pgm")))
    elapsed = time.time() - t0
    record(10, ok and len(report) == 4 and n_pgm >= 25 and elapsed < 900,
           f"all commands exit 0: {bool(ok)}; {len(report)} metric records; {n_pgm} PGM frames; {elapsed:.0f}s")
