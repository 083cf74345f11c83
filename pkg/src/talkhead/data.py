"""Paired audio/landmark utterances: file formats, loading, synthetic data.

Manifest: one JSON object per line with keys ``id``, ``speaker``, ``wav`` and
``landmarks``; relative paths resolve against the manifest's directory.

Landmark track file: a header line ``# landmarks topology=ibug68 points=68``
followed by one row per frame of ``2 * points`` whitespace-separated floats
(x0 y0 x1 y1 ...).
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio, face, geometry

logger = logging.getLogger(__name__)

FPS = 25
SAMPLES_PER_VIDEO_FRAME = audio.SAMPLE_RATE // FPS
FBANK_PER_VIDEO_FRAME = 4
RATE_TOLERANCE = 3
TOPOLOGY = "ibug68"


class DataError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    speaker_id: str
    waveform: audio.Waveform
    landmarks: np.ndarray  # T x L x 2, scale-normalised
    wav_path: str | None = None
    meta: dict = field(default_factory=dict)
    _fbank: audio.FbankSequence | None = field(default=None, repr=False)

    @property
    def fbank(self) -> audio.FbankSequence:
        if self._fbank is None:
            self._fbank = audio.fbank(self.waveform)
        return self._fbank

    @property
    def n_frames(self) -> int:
        return self.landmarks.shape[0]


def decompose(track: np.ndarray, template: np.ndarray) -> list[geometry.AlignedDecomposition]:
    return [geometry.align(f, template) for f in track]


# -- landmark tracks ---------------------------------------------------------

def write_landmarks(path, track: np.ndarray) -> None:
    track = np.asarray(track, dtype=np.float64)
    n_points = track.shape[1]
    lines = [f"# landmarks topology={TOPOLOGY if n_points == face.N_POINTS else 'custom'} points={n_points}"]
    for frame in track:
        lines.append(" ".join(repr(float(v)) for v in frame.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_landmarks(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# landmarks"):
        raise DataError(f"{path}: missing '# landmarks' header")
    fields = dict(kv.split("=", 1) for kv in text[0].split()[2:] if "=" in kv)
    try:
        n_points = int(fields["points"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: header lacks points=<int>") from exc
    rows = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 2 * n_points:
            raise DataError(f"{path}:{lineno}: expected {2 * n_points} values, got {len(vals)}")
        rows.append([float(v) for v in vals])
    track = np.array(rows, dtype=np.float64).reshape(-1, n_points, 2)
    if not np.isfinite(track).all():
        raise DataError(f"{path}: non-finite coordinates")
    return track


def normalize_scale(track: np.ndarray) -> np.ndarray:
    """Scale a track so its mean inter-ocular distance is 1 (idempotent)."""
    iod = np.mean([face.interocular_distance(f) for f in track])
    if not iod > 0:
        raise DataError("zero inter-ocular distance")
    return track / iod


def check_rate_pairing(n_video: int, n_fbank: int) -> bool:
    return abs(FBANK_PER_VIDEO_FRAME * n_video - n_fbank) <= RATE_TOLERANCE


# -- manifest loading --------------------------------------------------------

@dataclass
class LoadResult:
    utterances: list[Utterance]
    errors: list[str]

    def __iter__(self):
        return iter(self.utterances)

    def __len__(self) -> int:
        return len(self.utterances)


def _load_record(base: Path, lineno: int, line: str) -> Utterance:
    try:
        rec = json.loads(line)
        uid, spk, wav, lm = rec["id"], rec["speaker"], rec["wav"], rec["landmarks"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"line {lineno}: bad manifest record ({exc})") from exc
    try:
        wav_path = (base / wav).resolve()
        w = audio.read_wav(wav_path)
        track = normalize_scale(read_landmarks(base / lm))
        n_fbank = audio.num_frames(len(w.samples))
    except (OSError, ValueError) as exc:
        raise DataError(f"utterance {uid}: {exc}") from exc
    if not check_rate_pairing(track.shape[0], n_fbank):
        raise DataError(f"utterance {uid}: {track.shape[0]} landmark frames vs {n_fbank} fbank frames")
    return Utterance(str(uid), str(spk), w, track, wav_path=str(wav_path))


def load_dataset(manifest_path, workers: int = 1) -> LoadResult:
    """Load every manifest line; failures are collected, not raised."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    lines = [(i, ln) for i, ln in enumerate(manifest_path.read_text().splitlines(), start=1) if ln.strip()]

    def attempt(item):
        try:
            return _load_record(base, *item), None
        except DataError as exc:
            return None, str(exc)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(attempt, lines))
    else:
        results = [attempt(item) for item in lines]
    utts = [u for u, _ in results if u is not None]
    errors = [e for _, e in results if e is not None]
    for e in errors:
        logger.warning(e)
    return LoadResult(utts, errors)


def write_dataset(utterances: list[Utterance], out_dir) -> Path:
    """Write WAVs, landmark tracks and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "landmarks").mkdir(parents=True, exist_ok=True)
    records = []
    for u in utterances:
        wav_rel, lm_rel = f"wav/{u.id}.wav", f"landmarks/{u.id}.txt"
        audio.write_wav(out / wav_rel, u.waveform)
        write_landmarks(out / lm_rel, u.landmarks)
        records.append(json.dumps({"id": u.id, "speaker": u.speaker_id, "wav": wav_rel, "landmarks": lm_rel},
                                  sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(r + "\n" for r in records))
    return manifest


# -- synthetic one-to-many data ----------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_speakers: int = 4
    n_utterances: int = 8
    modes_per_phone: int = 1
    noise_sigma: float = 0.01
    seed: int = 0
    n_phones: int = 6
    segments: int = 4
    frames_per_phone: int = 4
    head_motion: float = 1.0
    audio_noise: float = 0.01

    def __post_init__(self):
        for name in ("n_speakers", "n_utterances", "modes_per_phone", "n_phones", "segments", "frames_per_phone"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_sigma < 0 or self.head_motion < 0 or self.audio_noise < 0:
            raise ValueError("noise levels and head_motion must be nonnegative")


@dataclass(frozen=True)
class _World:
    chords: np.ndarray  # n_phones x 3 frequencies (Hz)
    pitch: np.ndarray  # per speaker
    speaker_shape: np.ndarray  # per speaker: jaw width, chin length, brow raise, mouth width
    speaker_pose: np.ndarray  # per speaker: theta, tx, ty
    camera_scale: np.ndarray
    rest_mouth: np.ndarray  # modes x (opening, width, smile)
    phone_mouth: np.ndarray  # phones x modes x (opening, width, smile)
    phone_pose: np.ndarray  # phones x modes x (theta, tx, ty)


def _make_world(spec: SyntheticSpec, rng: np.random.Generator) -> _World:
    m, p, s = spec.modes_per_phone, spec.n_phones, spec.n_speakers
    chords = np.sort(rng.uniform(300.0, 2600.0, size=(p, 3)), axis=1)
    pitch = rng.uniform(0.85, 1.2, size=s)
    speaker_shape = np.column_stack([rng.uniform(0.85, 1.15, s), rng.uniform(0.85, 1.15, s),
                                     rng.uniform(-0.06, 0.06, s), rng.uniform(0.9, 1.1, s)])
    speaker_pose = np.column_stack([rng.uniform(-0.15, 0.15, s), rng.uniform(-0.2, 0.2, (s, 2))])
    camera_scale = rng.uniform(0.8, 1.25, s)
    rest_mouth = np.column_stack([np.zeros(m), rng.uniform(0.85, 1.15, m), rng.uniform(-0.5, 0.5, m)])
    phone_mouth = np.stack([rng.uniform(0.0, 0.4, (p, m)), rng.uniform(0.75, 1.25, (p, m)),
                            rng.uniform(-0.6, 0.6, (p, m))], axis=-1)
    phone_pose = np.concatenate([rng.uniform(-0.3, 0.3, (p, m, 1)), rng.uniform(-0.15, 0.15, (p, m, 2))], axis=-1)
    return _World(chords, pitch, speaker_shape, speaker_pose, camera_scale, rest_mouth, phone_mouth, phone_pose)


def _face_for(world: _World, speaker: int, mouth_params) -> np.ndarray:
    jaw, chin, brow, mwidth = world.speaker_shape[speaker]
    opening, width, smile = mouth_params
    return face.canonical_face(jaw, chin, brow, face.mouth_points(opening, width * mwidth, smile))


def generate_synthetic(spec: SyntheticSpec) -> list[Utterance]:
    """Utterances whose lips/pose are a one-to-many function of the audio.

    Each utterance starts with one silent rest frame, then ``segments``
    phones of ``frames_per_phone`` video frames.  A per-utterance style
    index (``modes_per_phone`` choices, uniform) selects which realisation of
    each phone's mouth shape and head pose is used; the rest frame shows the
    style's neutral mouth.  Speakers differ in voice pitch, face contour,
    mouth width and pose bias.
    """
    rng = np.random.default_rng(spec.seed)
    world = _make_world(spec, rng)
    n_frames = 1 + spec.segments * spec.frames_per_phone
    spf = SAMPLES_PER_VIDEO_FRAME
    time = np.arange(spf) / audio.SAMPLE_RATE
    utts = []
    for i in range(spec.n_utterances):
        spk = i % spec.n_speakers
        style = int(rng.integers(spec.modes_per_phone))
        phones = rng.integers(spec.n_phones, size=spec.segments)
        frame_phone = np.concatenate([[-1], np.repeat(phones, spec.frames_per_phone)])
        phase = rng.uniform(0, 2 * np.pi, size=3)

        samples = np.zeros(n_frames * spf)
        track = np.zeros((n_frames, face.N_POINTS, 2))
        for j, ph in enumerate(frame_phone):
            if ph < 0:
                mouth, pose = world.rest_mouth[style], world.speaker_pose[spk]
            else:
                t0 = time + j * spf / audio.SAMPLE_RATE
                freqs = world.chords[ph] * world.pitch[spk]
                samples[j * spf:(j + 1) * spf] = 0.3 * np.sin(2 * np.pi * freqs[:, None] * t0 + phase[:, None]).sum(0)
                mouth = world.phone_mouth[ph, style]
                pose = world.speaker_pose[spk] + world.phone_pose[ph, style]
            pose = spec.head_motion * pose
            pts = geometry.apply_rigid(_face_for(world, spk, mouth), pose[0], pose[1:])
            track[j] = pts
        track += rng.normal(0.0, spec.noise_sigma, size=track.shape)
        samples += rng.normal(0.0, spec.audio_noise, size=samples.shape)
        samples = np.clip(samples, -1.0, 1.0)
        track = normalize_scale(track * world.camera_scale[spk])
        utts.append(Utterance(
            id=f"utt{i:04d}", speaker_id=f"spk{spk:02d}", waveform=audio.Waveform(samples),
            landmarks=track,
            meta={"style": style, "phones": frame_phone.tolist(), "speaker": spk},
        ))
    return utts


def split_by_speaker(utterances: list[Utterance], val_fraction: float, rng: np.random.Generator):
    """Stratified utterance-level split holding out ``round(val_fraction * N)`` utterances.

    Quotas are spread over speakers by largest remainder (ties to the larger
    speaker, then by name); no speaker gives up its last utterance.
    """
    by_spk: dict[str, list[int]] = {}
    for i, u in enumerate(utterances):
        by_spk.setdefault(u.speaker_id, []).append(i)
    names = sorted(by_spk)
    cap = {s: max(len(by_spk[s]) - 1, 0) for s in names}
    exact = {s: val_fraction * len(by_spk[s]) for s in names}
    quota = {s: min(int(exact[s]), cap[s]) for s in names}
    target = min(int(round(val_fraction * len(utterances))), sum(cap.values()))
    order = sorted(names, key=lambda s: (-(exact[s] - int(exact[s])), -len(by_spk[s]), s))
    while sum(quota.values()) < target:
        grew = False
        for s in order:
            if sum(quota.values()) >= target:
                break
            if quota[s] < cap[s]:
                quota[s] += 1
                grew = True
        if not grew:
            break
    val = []
    for s in names:
        val.extend(rng.permutation(by_spk[s])[:quota[s]].tolist())
    val_set = set(val)
    train = [u for i, u in enumerate(utterances) if i not in val_set]
    return train, [utterances[i] for i in sorted(val_set)]
