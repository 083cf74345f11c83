"""Training loops for the speech feature extractor and the MDN regressor.

Randomness comes from one ``numpy.random.Generator`` per run, drawn in a
fixed order: train/validation split, parameter initialisation, then one
permutation of the training utterances per epoch.  The generator state is
checkpointed at epoch boundaries so an interrupted run resumes bit-exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import geometry, mdn, metrics, sfe
from .autodiff import Tensor
from .layers import Module

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"THCKPT\x00\x01"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# -- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update using each parameter's ``.grad``.

    Parameters without a gradient are left untouched.  A NaN gradient aborts
    before anything is modified.
    """
    for name, p in params.items():
        if p.grad is not None and np.isnan(p.grad).any():
            raise TrainingError(f"NaN gradient in parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def check_finite(params: dict[str, Tensor]) -> None:
    bad = ad.parameters_finite(params)
    if bad is not None:
        raise TrainingError(f"non-finite value in parameter {bad!r}")


# -- configuration -----------------------------------------------------------

STAGES = ("sfe", "mdn")


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    stage: str = "sfe"
    epochs: int = 200
    batch_size: int = 4
    lr: float = 1e-3
    val_fraction: float = 0.2
    eval_every: int = 10
    memory: str = "cs"
    n_components: int = 3
    regression: str = "f_tt"
    context_frames: int = 2
    sfe_hidden: int = 64
    feature_dim: int = 64
    content_slots: int = 8
    identity_slots: int = 8
    address_hidden: int = 64
    n_mels: int = 80
    mdn_hidden: int = 128
    sfe_bypass: bool = False
    finetune_sfe: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.memory not in sfe.MEMORY_MODES:
            raise ValueError(f"memory must be one of {sfe.MEMORY_MODES}")
        if self.regression not in mdn.REGRESSION_MODES:
            raise ValueError(f"regression must be one of {mdn.REGRESSION_MODES}")
        if not 1 <= self.n_components <= 8:
            raise ValueError("n_components must be in 1..8")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for key, val in values.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            out[key] = _coerce(val, types[key])
        if "seed" not in out:
            raise ValueError("config must set a seed")
        return cls(**out)


def _coerce(val, typ: str):
    if not isinstance(val, str):
        return val
    if typ == "bool":
        low = val.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {val!r}")
        return low in ("true", "1", "yes")
    if typ == "int":
        return int(val)
    if typ == "float":
        return float(val)
    return val.strip()


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    return values


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    rng_state: dict
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.version == other.version and self.config == other.config
                and self.rng_state == other.rng_state and self.meta == other.meta
                and self.tensors.keys() == other.tensors.keys()
                and all(self.tensors[k].shape == other.tensors[k].shape
                        and self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors))


def _canon(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<I", ck.version)]
    for blob in (_canon(ck.config), _canon(ck.rng_state), _canon(ck.meta)):
        out.append(struct.pack("<I", len(blob)))
        out.append(blob)
    out.append(struct.pack("<I", len(ck.tensors)))
    for name in sorted(ck.tensors):
        arr = np.asarray(ck.tensors[name], dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    blobs = []
    for _ in range(3):
        (n,) = struct.unpack("<I", take(4))
        blobs.append(json.loads(take(n).decode("utf-8")))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return Checkpoint(blobs[0], tensors, blobs[1], blobs[2], version)


# -- shared data preparation -------------------------------------------------

@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray, floor: float = 1e-3) -> "Standardizer":
        rows = np.asarray(rows, dtype=np.float64)
        return cls(rows.mean(axis=0), np.maximum(rows.std(axis=0), floor))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def dataset_template(utts: Sequence[data_mod.Utterance]) -> np.ndarray:
    frames = np.concatenate([u.landmarks for u in utts], axis=0)
    return geometry.generalized_procrustes(frames, iterations=5)


@dataclass
class SfeItem:
    utt: data_mod.Utterance
    fbank: np.ndarray
    content_in: np.ndarray
    identity_in: np.ndarray


def _sfe_item(u: data_mod.Utterance, template: np.ndarray) -> SfeItem:
    decs = data_mod.decompose(u.landmarks, template)
    p_align = np.stack([d.p_align for d in decs])
    poses = np.stack([d.pose.as_vector() for d in decs])
    return SfeItem(u, u.fbank.frames, sfe.content_target_input(p_align),
                   sfe.identity_target_input(p_align, poses, template))


def sfe_config(cfg: TrainConfig) -> sfe.SfeConfig:
    return sfe.SfeConfig(input_dim=cfg.n_mels, hidden=cfg.sfe_hidden, feature_dim=cfg.feature_dim,
                         content_slots=cfg.content_slots, identity_slots=cfg.identity_slots,
                         address_hidden=cfg.address_hidden, memory=cfg.memory)


def _crop_batch(items: Sequence[SfeItem], fb_stats: Standardizer, c_stats: Standardizer,
                s_stats: Standardizer):
    n_frames = min(it.content_in.shape[0] for it in items)
    n_steps = min(min(it.fbank.shape[0] for it in items), data_mod.FBANK_PER_VIDEO_FRAME * n_frames)
    xs = [fb_stats(it.fbank[:n_steps]) for it in items]
    cs = [c_stats(it.content_in[:n_frames]) for it in items]
    ids = np.stack([s_stats(it.identity_in) for it in items])
    return xs, cs, ids


def _batches(order: Sequence[int], size: int) -> list[list[int]]:
    """Consecutive batches; a trailing singleton joins the previous batch."""
    out = [list(order[i:i + size]) for i in range(0, len(order), size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2].extend(out.pop())
    return out


def identity_embeddings(model: sfe.SfeModel, utts: Sequence[data_mod.Utterance]) -> np.ndarray:
    fb = Standardizer(model.buffers["fbank_mean"], model.buffers["fbank_std"])
    out = []
    with ad.no_grad():
        for u in utts:
            x = fb(u.fbank.frames)
            _, ident = model.speech_features([x], u.n_frames)
            out.append(ident.data[0])
    return np.stack(out)


def speaker_eer(model: sfe.SfeModel, utts: Sequence[data_mod.Utterance]) -> float | None:
    labels = [u.speaker_id for u in utts]
    trials = metrics.pairwise_trials(identity_embeddings(model, utts), labels)
    kinds = {t.is_same for t in trials}
    if len(kinds) < 2:
        return None
    return metrics.eer(trials)


# -- run bookkeeping ---------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    model: Module
    finished: bool

    @property
    def losses(self) -> list[float]:
        return [r["value"] for r in self.log if r["split"] == "train" and r["metric"] == "loss"]

    def last(self, split: str, metric: str) -> float | None:
        vals = [r["value"] for r in self.log if r["split"] == split and r["metric"] == metric]
        return vals[-1] if vals else None

    def best(self, metric: str) -> float | None:
        return self.checkpoint.meta.get("best_metrics", {}).get(metric)


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def _make_checkpoint(cfg: TrainConfig, model: Module, opt: AdamState, rng: np.random.Generator,
                     meta: dict, best_state: dict | None, extra: dict | None = None) -> Checkpoint:
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"adam.m/{k}": v.copy() for k, v in opt.m.items()})
    tensors.update({f"adam.v/{k}": v.copy() for k, v in opt.v.items()})
    if best_state is not None:
        tensors.update({f"best/{k}": v.copy() for k, v in best_state.items()})
    if extra:
        tensors.update(extra)
    meta = dict(meta, adam={"step": opt.step, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                            "eps": opt.eps})
    return Checkpoint(cfg.to_dict(), tensors, rng.bit_generator.state, meta)


def _restore_optimizer(ck: Checkpoint) -> AdamState:
    a = ck.meta["adam"]
    return AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
                     m={k: v.copy() for k, v in ck.group("adam.m").items()},
                     v={k: v.copy() for k, v in ck.group("adam.v").items()})


def _check_resume(cfg: TrainConfig, ck: Checkpoint) -> None:
    if ck.version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {ck.version} != {CHECKPOINT_VERSION}")
    saved = dict(ck.config)
    mine = cfg.to_dict()
    saved.pop("epochs", None)
    mine.pop("epochs", None)
    if saved != mine:
        raise CheckpointError("checkpoint was produced with a different configuration")


def _log(log: list, epoch: int, split: str, metric: str, value: float, sink: Callable | None) -> None:
    rec = {"epoch": epoch, "split": split, "metric": metric, "value": float(value)}
    log.append(rec)
    if sink is not None:
        sink(rec)


# -- stage 1: speech feature extractor ---------------------------------------

def build_sfe(cfg: TrainConfig, rng: np.random.Generator) -> sfe.SfeModel:
    return sfe.SfeModel(sfe_config(cfg), rng)


def load_sfe(ck: Checkpoint, best: bool = True) -> sfe.SfeModel:
    cfg = TrainConfig.from_mapping(ck.config)
    model = build_sfe(cfg, np.random.default_rng(0))
    state = ck.group("best") if best and ck.group("best") else ck.group("param")
    model.load_state_dict(state)
    return model


def train_sfe(cfg: TrainConfig, utterances: Sequence[data_mod.Utterance], resume: Checkpoint | None = None,
              stop_after: int | None = None, log_sink: Callable | None = None) -> TrainResult:
    if cfg.stage != "sfe":
        raise ValueError("train_sfe needs stage=sfe")
    if len(utterances) < 2:
        raise TrainingError("SFE training needs at least 2 utterances")
    rng = np.random.default_rng(cfg.seed)
    train_utts, val_utts = data_mod.split_by_speaker(list(utterances), cfg.val_fraction, rng)
    if len(train_utts) < 2:
        raise TrainingError("SFE training split has fewer than 2 utterances")
    template = dataset_template(train_utts)
    train_items = [_sfe_item(u, template) for u in train_utts]
    val_items = [_sfe_item(u, template) for u in val_utts]
    fb_stats = Standardizer.fit(np.concatenate([it.fbank for it in train_items]))
    c_stats = Standardizer.fit(np.concatenate([it.content_in for it in train_items]))
    s_stats = Standardizer.fit(np.stack([it.identity_in for it in train_items]))

    model = build_sfe(cfg, rng)
    model.buffers = {"fbank_mean": fb_stats.mean, "fbank_std": fb_stats.std, "template": template}
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    log: list[dict] = []
    meta = {"epoch": 0, "best_value": None, "best_epoch": None, "best_metrics": {}}
    best_state = None
    if resume is not None:
        _check_resume(cfg, resume)
        model.load_state_dict(resume.group("param"))
        opt = _restore_optimizer(resume)
        rng = _rng_from_state(resume.rng_state)
        meta = {k: resume.meta[k] for k in ("epoch", "best_value", "best_epoch", "best_metrics")}
        log = list(resume.meta.get("log", []))
        best_state = resume.group("best") or None

    def evaluate(epoch: int) -> float:
        with ad.no_grad():
            if len(val_items) >= 2:
                xs, cs, ids = _crop_batch(val_items, fb_stats, c_stats, s_stats)
                lc, ls = model.loss(xs, cs, ids)
                val_loss = lc.item() + ls.item()
            else:
                xs, cs, ids = _crop_batch(train_items, fb_stats, c_stats, s_stats)
                lc, ls = model.loss(xs, cs, ids)
                val_loss = lc.item() + ls.item()
        _log(log, epoch, "val", "loss", val_loss, log_sink)
        metric_vals = {"loss": val_loss}
        e = speaker_eer(model, val_utts) if len(val_utts) >= 2 else None
        if e is not None:
            _log(log, epoch, "val", "eer", e, log_sink)
            metric_vals["eer"] = e
        return val_loss, metric_vals

    start = meta["epoch"]
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start + 1, end + 1):
        order = rng.permutation(len(train_items))
        total = 0.0
        batches = _batches(order.tolist(), cfg.batch_size)
        for batch in batches:
            xs, cs, ids = _crop_batch([train_items[i] for i in batch], fb_stats, c_stats, s_stats)
            model.zero_grad()
            lc, ls = model.loss(xs, cs, ids)
            loss = ad.add(lc, ls)
            ad.backward(loss)
            adam_step(params, opt)
            check_finite(params)
            total += loss.item()
        _log(log, epoch, "train", "loss", total / len(batches), log_sink)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            value, metric_vals = evaluate(epoch)
            if meta["best_value"] is None or value < meta["best_value"]:
                meta.update(best_value=value, best_epoch=epoch, best_metrics=metric_vals)
                best_state = model.state_dict()
        meta["epoch"] = epoch

    meta["log"] = log
    meta["split"] = {"train": [u.id for u in train_utts], "val": [u.id for u in val_utts]}
    ck = _make_checkpoint(cfg, model, opt, rng, meta, best_state)
    return TrainResult(ck, log, model, meta["epoch"] == cfg.epochs)


# -- stage 2: MDN regression -------------------------------------------------

def speech_rows(model: sfe.SfeModel | None, frames: np.ndarray, n_frames: int, context: int,
                fbank_stats: Standardizer | None = None) -> np.ndarray:
    """Per-video-frame speech features: content in a +-context window, plus identity.

    ``frames`` are raw fbank frames.  With ``model=None`` (bypass) the
    content feature is the pooled standardised fbank and identity is its
    sequence mean.
    """
    if model is None:
        x = fbank_stats(frames)
        content = sfe.pooling_matrix(x.shape[0], n_frames) @ x
        ident = x.mean(axis=0)
    else:
        fb = Standardizer(model.buffers["fbank_mean"], model.buffers["fbank_std"])
        with ad.no_grad():
            c, s = model.speech_features([fb(frames)], n_frames)
        content, ident = c[0].data, s.data[0]
    idx = np.arange(n_frames)
    cols = [content[np.clip(idx + k, 0, n_frames - 1)] for k in range(-context, context + 1)]
    cols.append(np.repeat(ident[None, :], n_frames, axis=0))
    return np.concatenate(cols, axis=1)


@dataclass
class MdnItem:
    utt: data_mod.Utterance
    speech: np.ndarray  # raw rows
    ref_frame: np.ndarray
    ref: np.ndarray
    target: np.ndarray


def build_mdn(cfg: TrainConfig, speech_dim: int, rng: np.random.Generator, n_points: int = 68) -> mdn.MdnModel:
    mc = mdn.MdnConfig(speech_dim=speech_dim, ref_dim=2 * n_points + 3, n_components=cfg.n_components,
                       n_points=n_points, hidden=cfg.mdn_hidden, regression=cfg.regression)
    return mdn.MdnModel(mc, rng)


def load_mdn(ck: Checkpoint, best: bool = True) -> mdn.MdnModel:
    cfg = TrainConfig.from_mapping(ck.config)
    state = ck.group("best") if best and ck.group("best") else ck.group("param")
    speech_dim = state["trunk.layers.0.W"].shape[0] - state["buffer.ref_mean"].shape[0]
    n_points = (state["buffer.ref_mean"].shape[0] - 3) // 2
    model = build_mdn(cfg, speech_dim, np.random.default_rng(0), n_points)
    model.load_state_dict(state)
    return model


def evaluate_mdn(model: mdn.MdnModel, items: Sequence[MdnItem]) -> dict[str, float]:
    """LMD and RD of max-component predictions against the ground-truth tracks."""
    template = model.buffers["template"]
    preds, gts = [], []
    for it in items:
        preds.append(mdn.predict_frames(model, it.speech, it.ref_frame))
        gts.append(it.utt.landmarks)
    pred, gt = np.concatenate(preds), np.concatenate(gts)
    theta_p = [geometry.align(f, template).pose.theta for f in pred]
    theta_g = [geometry.align(f, template).pose.theta for f in gt]
    per_frame = [metrics.lmd(p[None], g[None]) for p, g in zip(pred, gt)]
    return {"lmd": metrics.lmd(pred, gt), "lmd_median": float(np.median(per_frame)),
            "rd": metrics.rd(theta_p, theta_g)}


def train_mdn(cfg: TrainConfig, utterances: Sequence[data_mod.Utterance], sfe_checkpoint: Checkpoint | None = None,
              resume: Checkpoint | None = None, stop_after: int | None = None,
              log_sink: Callable | None = None) -> TrainResult:
    if cfg.stage != "mdn":
        raise ValueError("train_mdn needs stage=mdn")
    if not utterances:
        raise TrainingError("dataset is empty")
    if sfe_checkpoint is None and not cfg.sfe_bypass:
        raise TrainingError("MDN stage needs an SFE checkpoint (or sfe_bypass=true)")
    if cfg.finetune_sfe:
        raise TrainingError("finetune_sfe is not supported together with precomputed features; "
                            "train with the SFE frozen")
    rng = np.random.default_rng(cfg.seed)
    train_utts, val_utts = data_mod.split_by_speaker(list(utterances), cfg.val_fraction, rng)
    template = dataset_template(train_utts)
    sfe_model = None if cfg.sfe_bypass else load_sfe(sfe_checkpoint)
    fb_stats = None
    if sfe_model is None:
        fb_stats = Standardizer.fit(np.concatenate([u.fbank.frames for u in train_utts]))

    def item(u):
        target = np.stack([mdn.target_vector(f, template, cfg.regression) for f in u.landmarks])
        return MdnItem(u, speech_rows(sfe_model, u.fbank.frames, u.n_frames, cfg.context_frames, fb_stats), u.landmarks[0],
                       mdn.reference_feature(u.landmarks[0], template), target)

    train_items = [item(u) for u in train_utts]
    val_items = [item(u) for u in val_utts] or train_items
    sp_stats = Standardizer.fit(np.concatenate([it.speech for it in train_items]))
    ref_stats = Standardizer.fit(np.stack([it.ref for it in train_items]))
    tg_stats = Standardizer.fit(np.concatenate([it.target for it in train_items]))
    std_items = [(sp_stats(it.speech), np.repeat(ref_stats(it.ref)[None], len(it.target), axis=0),
                  tg_stats(it.target)) for it in train_items]
    val_std = [(sp_stats(it.speech), np.repeat(ref_stats(it.ref)[None], len(it.target), axis=0),
                tg_stats(it.target)) for it in val_items]

    n_points = train_utts[0].landmarks.shape[1]
    model = build_mdn(cfg, train_items[0].speech.shape[1], rng, n_points)
    model.buffers = {"template": template, "speech_mean": sp_stats.mean, "speech_std": sp_stats.std,
                     "ref_mean": ref_stats.mean, "ref_std": ref_stats.std,
                     "target_mean": tg_stats.mean, "target_std": tg_stats.std}
    if fb_stats is not None:
        model.buffers.update(fbank_mean=fb_stats.mean, fbank_std=fb_stats.std)
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    log: list[dict] = []
    meta = {"epoch": 0, "best_value": None, "best_epoch": None, "best_metrics": {}}
    best_state = None
    if resume is not None:
        _check_resume(cfg, resume)
        model.load_state_dict(resume.group("param"))
        opt = _restore_optimizer(resume)
        rng = _rng_from_state(resume.rng_state)
        meta = {k: resume.meta[k] for k in ("epoch", "best_value", "best_epoch", "best_metrics")}
        log = list(resume.meta.get("log", []))
        best_state = resume.group("best") or None

    def nll_of(batch):
        sp = np.concatenate([b[0] for b in batch])
        rf = np.concatenate([b[1] for b in batch])
        tg = np.concatenate([b[2] for b in batch])
        return mdn.mdn_nll(model.forward(sp, rf), tg)

    start = meta["epoch"]
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start + 1, end + 1):
        order = rng.permutation(len(std_items)).tolist()
        batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        total = 0.0
        for batch in batches:
            model.zero_grad()
            loss = nll_of([std_items[i] for i in batch])
            ad.backward(loss)
            adam_step(params, opt)
            check_finite(params)
            total += loss.item()
        _log(log, epoch, "train", "loss", total / len(batches), log_sink)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            with ad.no_grad():
                val_nll = nll_of(val_std).item()
            scores = evaluate_mdn(model, val_items)
            _log(log, epoch, "val", "nll", val_nll, log_sink)
            _log(log, epoch, "val", "lmd", scores["lmd"], log_sink)
            _log(log, epoch, "val", "rd", scores["rd"], log_sink)
            if meta["best_value"] is None or val_nll < meta["best_value"]:
                meta.update(best_value=val_nll, best_epoch=epoch, best_metrics=dict(scores, nll=val_nll))
                best_state = model.state_dict()
        meta["epoch"] = epoch

    meta["log"] = log
    meta["split"] = {"train": [u.id for u in train_utts], "val": [u.id for u in val_utts]}
    ck = _make_checkpoint(cfg, model, opt, rng, meta, best_state)
    return TrainResult(ck, log, model, meta["epoch"] == cfg.epochs)


def train(cfg: TrainConfig, dataset, **kw) -> TrainResult:
    if cfg.stage == "sfe":
        return train_sfe(cfg, dataset, **kw)
    return train_mdn(cfg, dataset, **kw)


def write_metric_log(path, log: Sequence[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log))


# -- ablation grid -----------------------------------------------------------

@dataclass
class AblationRow:
    config_hash: str
    stage: str
    memory: str
    n_components: int | None
    regression: str | None
    lmd: float | None = None
    rd: float | None = None
    eer: float | None = None
    error: str | None = None
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def find(self, **kw) -> list[AblationRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in kw.items())]

    def value(self, metric: str, **kw) -> float | None:
        hits = [r for r in self.find(**kw) if getattr(r, metric) is not None]
        return getattr(hits[0], metric) if hits else None


def _mdn_cell(cfg: TrainConfig, dataset, sfe_ck: Checkpoint | None) -> AblationRow:
    row = AblationRow(cfg.hash(), "mdn", cfg.memory, cfg.n_components, cfg.regression, config=cfg.to_dict())
    try:
        res = train_mdn(cfg, dataset, sfe_checkpoint=sfe_ck)
        best = res.checkpoint.meta["best_metrics"]
        row.lmd, row.rd = best["lmd"], best["rd"]
    except Exception as exc:  # a failing cell is reported, the grid goes on
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def run_ablation(dataset: Sequence[data_mod.Utterance], sfe_base: TrainConfig, mdn_base: TrainConfig,
                 components: Sequence[int] = (3,), memories: Sequence[str] = ("cs",),
                 regressions: Sequence[str] = ("f_tt",), eval_set: Sequence[data_mod.Utterance] | None = None,
                 workers: int = 1) -> AblationReport:
    """Train every grid cell and collect LMD/RD (MDN cells) and EER (SFE cells).

    The SFE is trained once per memory mode and shared by that mode's MDN
    cells.  EER is measured on ``eval_set`` when given, otherwise on the SFE
    validation split.  Rows are sorted by config hash, so the report does
    not depend on completion order.
    """
    rows: list[AblationRow] = []
    jobs = []
    for memory in memories:
        sfe_ck = None
        if not mdn_base.sfe_bypass:
            cfg = sfe_base.replace(stage="sfe", memory=memory)
            row = AblationRow(cfg.hash(), "sfe", memory, None, None, config=cfg.to_dict())
            try:
                res = train_sfe(cfg, dataset)
                sfe_ck = res.checkpoint
                model = load_sfe(sfe_ck)
                if eval_set is not None:
                    row.eer = speaker_eer(model, eval_set)
                else:
                    val_ids = set(sfe_ck.meta["split"]["val"])
                    row.eer = speaker_eer(model, [u for u in dataset if u.id in val_ids])
            except Exception as exc:
                row.error = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            if row.error is not None:
                continue
        for m in components:
            for reg in regressions:
                jobs.append((mdn_base.replace(stage="mdn", memory=memory, n_components=m, regression=reg), sfe_ck))
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_mdn_cell, cfg, list(dataset), ck) for cfg, ck in jobs]
            rows.extend(f.result() for f in futures)
    else:
        rows.extend(_mdn_cell(cfg, dataset, ck) for cfg, ck in jobs)
    rows.sort(key=lambda r: r.config_hash)
    return AblationReport(rows)


@dataclass(frozen=True)
class TrendCheck:
    name: str
    passed: bool
    detail: str


def check_trends(report: AblationReport, memory: str = "cs", regression: str = "f_tt") -> list[TrendCheck]:
    """Evaluate whichever monotone-trend assertions the grid covers."""
    out = []
    lmd = {r.n_components: r.lmd for r in report.find(stage="mdn", memory=memory, regression=regression)
           if r.lmd is not None}
    if {1, 2, 3} <= lmd.keys():
        ok = lmd[3] <= lmd[2] <= lmd[1]
        out.append(TrendCheck("lmd_monotone_1_2_3", ok, f"LMD M=1 {lmd[1]:.4f}, M=2 {lmd[2]:.4f}, M=3 {lmd[3]:.4f}"))
    if {1, 3} <= lmd.keys():
        gain = 1.0 - lmd[3] / lmd[1]
        out.append(TrendCheck("lmd_mixture_gain", gain >= 0.2, f"relative gain of M=3 over M=1: {gain:.3f}"))
    for m in (5, 8):
        if {3, m} <= lmd.keys():
            rel = abs(lmd[m] - lmd[3]) / lmd[3]
            out.append(TrendCheck(f"lmd_plateau_{m}", rel <= 0.1, f"|LMD(M={m}) - LMD(M=3)| / LMD(M=3) = {rel:.3f}"))
    eer = {r.memory: r.eer for r in report.find(stage="sfe") if r.eer is not None}
    if {"cs", "w", "wo"} <= eer.keys():
        ok = eer["cs"] <= eer["w"] <= eer["wo"]
        out.append(TrendCheck("eer_memory_order", ok,
                              f"EER cs {eer['cs']:.4f}, w {eer['w']:.4f}, wo {eer['wo']:.4f}"))
    rd = {r.regression: r.rd for r in report.find(stage="mdn", memory=memory) if r.rd is not None
          and r.n_components == 3}
    if {"f_tt", "f_a"} <= rd.keys():
        out.append(TrendCheck("rd_decomposition", rd["f_tt"] <= rd["f_a"],
                              f"RD f_tt {rd['f_tt']:.4f}, f_a {rd['f_a']:.4f}"))
    return out


# -- 1-D bimodal sanity task -------------------------------------------------

def bimodal_data(n: int, eps: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Inputs carry no information; targets are +-1 (equal odds) plus N(0, eps^2)."""
    x = rng.normal(size=(n, 1))
    y = rng.choice([-1.0, 1.0], size=(n, 1)) + eps * rng.normal(size=(n, 1))
    return x, y


def single_gaussian_floor(eps: float) -> float:
    return 0.5 * np.log(2.0 * np.pi * np.e * (1.0 + eps ** 2))


def train_bimodal(n_components: int, seed: int, n: int = 512, eps: float = 0.1, steps: int = 600,
                  lr: float = 0.05) -> float:
    """Fit a small MDN to the bimodal task; returns the final full-batch NLL."""
    from .layers import Linear
    rng = np.random.default_rng(seed)
    x, y = bimodal_data(n, eps, rng)
    heads = {"alpha": Linear(rng, 1, n_components, zero=True), "mu": Linear(rng, 1, n_components),
             "sigma": Linear(rng, 1, n_components, zero=True)}
    heads["mu"].b.data = rng.normal(size=n_components)
    params = {f"{k}.{n_}": p for k, h in heads.items() for n_, p in h.parameters().items()}
    opt = AdamState(lr=lr)
    xt = Tensor(x)

    def nll():
        mix = mdn.mixture_from_raw(heads["alpha"](xt), heads["mu"](xt), heads["sigma"](xt), n_components, 1)
        return mdn.mdn_nll(mix, y)

    for _ in range(steps):
        for p in params.values():
            p.grad = None
        loss = nll()
        ad.backward(loss)
        adam_step(params, opt)
        check_finite(params)
    with ad.no_grad():
        return nll().item()


def predict_track(mdn_model: mdn.MdnModel, sfe_model: sfe.SfeModel | None, waveform, ref_frame: np.ndarray,
                  n_frames: int, context: int, use_mixture: bool = False) -> np.ndarray:
    """Landmark track for a waveform, through the same path as validation."""
    from . import audio
    fb_stats = None
    if sfe_model is None:
        fb_stats = Standardizer(mdn_model.buffers["fbank_mean"], mdn_model.buffers["fbank_std"])
    rows = speech_rows(sfe_model, audio.fbank(waveform).frames, n_frames, context, fb_stats)
    return mdn.predict_frames(mdn_model, rows, ref_frame, use_mixture)
