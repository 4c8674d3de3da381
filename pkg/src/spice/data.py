"""Manifests, speaker-level splits, and the synthetic desk-scale corpus.

A manifest is a UTF-8 CSV with header
``utterance_id,audio_path,speaker_id,label[,etiology][,split]``. Ratings are
per speaker: every row of a speaker must carry the same label, and splits are
assigned to speakers, never to individual utterances.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import write_wav
from .labels import IntelligibilityClass, parse_label

SPLITS = ("train", "val", "test")

# degradation schedule per class 0..4
SNR_DB = (30.0, 20.0, 12.0, 6.0, 0.0)
TILT_DB_PER_OCT = (0.0, 3.0, 6.0, 9.0, 12.0)
JITTER_PCT = (0.0, 2.0, 4.0, 8.0, 12.0)

_ETIOLOGIES = ("als", "cp", "pd", "ataxia", "ms")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRow:
    utterance_id: str
    audio_path: str
    speaker_id: str
    label: IntelligibilityClass
    etiology: str | None = None
    split: str | None = None


@dataclass
class SpeakerRecord:
    speaker_id: str
    label: IntelligibilityClass
    count: int
    etiology: str | None = None


@dataclass
class ManifestReport:
    n_rows: int
    n_speakers: int
    warnings: list[str]


def parse_manifest(path: str | Path) -> tuple[list[ManifestRow], ManifestReport]:
    """Parse and validate a manifest CSV.

    Hard errors: missing header columns, duplicate utterance_id, unknown
    label strings, label disagreement within a speaker, no rows.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        required = ["utterance_id", "audio_path", "speaker_id", "label"]
        missing = [c for c in required if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing header columns {missing}")
        raw = list(reader)

    if not raw:
        raise ManifestError(f"{path}: no rows")

    rows: list[ManifestRow] = []
    seen_ids: set[str] = set()
    speaker_label: dict[str, IntelligibilityClass] = {}
    warnings: list[str] = []
    for i, r in enumerate(raw, start=2):  # header is line 1
        uid = (r["utterance_id"] or "").strip()
        if not uid:
            raise ManifestError(f"{path}:{i}: empty utterance_id")
        if uid in seen_ids:
            raise ManifestError(f"{path}:{i}: duplicate utterance_id {uid!r}")
        seen_ids.add(uid)
        spk = (r["speaker_id"] or "").strip()
        if not spk:
            raise ManifestError(f"{path}:{i}: empty speaker_id")
        try:
            label = parse_label(r["label"])
        except ValueError as e:
            raise ManifestError(f"{path}:{i}: {e}") from None
        if spk in speaker_label and speaker_label[spk] != label:
            raise ManifestError(
                f"{path}: speaker {spk!r} has conflicting labels "
                f"{speaker_label[spk].name} and {label.name}"
            )
        speaker_label[spk] = label
        split = (r.get("split") or "").strip() or None
        if split is not None and split not in SPLITS:
            raise ManifestError(f"{path}:{i}: unknown split {split!r}")
        audio_path = (r["audio_path"] or "").strip()
        if audio_path and not Path(audio_path).is_absolute():
            audio_path = str(path.parent / audio_path)
        rows.append(
            ManifestRow(
                utterance_id=uid,
                audio_path=audio_path,
                speaker_id=spk,
                label=label,
                etiology=(r.get("etiology") or "").strip() or None,
                split=split,
            )
        )

    n_missing_et = sum(1 for r in rows if r.etiology is None)
    if 0 < n_missing_et < len(rows):
        warnings.append(f"{n_missing_et} rows without etiology")
    report = ManifestReport(len(rows), len(speaker_label), warnings)
    return rows, report


def write_manifest(rows: list[ManifestRow], path: str | Path, audio_relative_to: Path | None = None) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["utterance_id", "audio_path", "speaker_id", "label", "etiology", "split"])
        for r in rows:
            ap = r.audio_path
            if audio_relative_to is not None:
                try:
                    ap = str(Path(ap).relative_to(audio_relative_to))
                except ValueError:
                    pass
            w.writerow([r.utterance_id, ap, r.speaker_id, r.label.name, r.etiology or "", r.split or ""])


def speaker_records(rows: list[ManifestRow]) -> list[SpeakerRecord]:
    by_spk: dict[str, list[ManifestRow]] = {}
    for r in rows:
        by_spk.setdefault(r.speaker_id, []).append(r)
    return [
        SpeakerRecord(s, rs[0].label, len(rs), rs[0].etiology)
        for s, rs in sorted(by_spk.items())
    ]


def _largest_remainder(n: int, ratios: tuple[float, ...]) -> list[int]:
    """Seat allocation: every nonzero-ratio split gets one seat when enough
    speakers exist, the rest go by largest remainder (ties to the
    earlier-listed split)."""
    nonzero = [i for i, r in enumerate(ratios) if r > 0]
    counts = [0] * len(ratios)
    if n >= len(nonzero):
        for i in nonzero:
            counts[i] = 1
        seats = n - len(nonzero)
        adj = [max(n * r - 1.0, 0.0) if r > 0 else 0.0 for r in ratios]
        total = sum(adj)
        if total > seats and total > 0:
            adj = [a * seats / total for a in adj]
    else:
        seats = n
        adj = [n * r for r in ratios]
    floors = [math.floor(a) for a in adj]
    left = seats - sum(floors)
    remainders = sorted(
        range(len(ratios)), key=lambda i: (-(adj[i] - floors[i]), i)
    )
    for i in range(len(ratios)):
        counts[i] += floors[i]
    for i in remainders[:left]:
        counts[i] += 1
    return counts


def speaker_split(
    rows: list[ManifestRow],
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
    stratify: bool = True,
) -> list[ManifestRow]:
    """Assign train/val/test per speaker (never per utterance).

    Speakers are canonically sorted before the seeded shuffle, so the result
    does not depend on manifest row order. Counts per split follow
    largest-remainder allocation; with ``stratify`` the allocation runs
    independently inside each label group.
    """
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    nonzero = sum(1 for r in ratios if r > 0)
    if nonzero == 0:
        raise ValueError("at least one ratio must be positive")

    by_spk: dict[str, IntelligibilityClass] = {}
    for r in rows:
        by_spk.setdefault(r.speaker_id, r.label)
    speakers = sorted(by_spk)
    if len(speakers) < nonzero:
        raise ValueError(
            f"cannot split {len(speakers)} speakers across {nonzero} nonzero splits"
        )

    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}

    def assign_group(group: list[str]) -> None:
        group = sorted(group)
        rng.shuffle(group)
        counts = _largest_remainder(len(group), ratios)
        pos = 0
        for split_name, c in zip(SPLITS, counts):
            for s in group[pos : pos + c]:
                assignment[s] = split_name
            pos += c

    if stratify:
        for label in sorted({v for v in by_spk.values()}):
            assign_group([s for s, v in by_spk.items() if v == label])
    else:
        assign_group(speakers)

    return [replace(r, split=assignment[r.speaker_id]) for r in rows]


@dataclass
class Voice:
    """Per-speaker source/filter parameters for the synthetic corpus."""

    f0: float
    formants: tuple[float, float, float]
    bandwidths: tuple[float, float, float]


def sample_voice(rng: np.random.Generator) -> Voice:
    # ranges kept moderate so class-driven spectral differences dominate
    # speaker-driven ones (the generator's contract is separability)
    return Voice(
        f0=float(rng.uniform(90.0, 220.0)),
        formants=(
            float(rng.uniform(420, 680)),
            float(rng.uniform(1100, 1700)),
            float(rng.uniform(2400, 2900)),
        ),
        bandwidths=tuple(float(rng.uniform(70, 110)) for _ in range(3)),
    )


def synth_utterance(
    voice: Voice,
    degradation: int,
    duration: float,
    rng: np.random.Generator,
    sample_rate: int = 16000,
) -> np.ndarray:
    """One synthetic utterance of a voice at degradation level 0..4.

    Source-filter synthesis: a jittered impulse train through three formant
    resonators, then spectral tilt and additive noise at the class's SNR.
    """
    n = int(round(duration * sample_rate))
    jitter = JITTER_PCT[degradation] / 100.0

    # pitch moves per utterance and drifts within it, so a speaker's harmonic
    # comb never becomes a stable fingerprint for their class
    f0 = voice.f0 * (1.0 + 0.15 * rng.uniform(-1.0, 1.0))
    glide = rng.uniform(-0.15, 0.15)
    period = sample_rate / f0

    src = np.zeros(n)
    t = rng.uniform(0, period)
    while t < n:
        src[int(t)] = 1.0
        local = period * (1.0 + glide * (t / n))
        t += local * (1.0 + jitter * rng.uniform(-1.0, 1.0))

    x = src
    for f in voice.formants:
        # vowel-like variety: formants move substantially between utterances
        # and resonance bandwidths are redrawn every time
        fc = f * (1.0 + 0.25 * rng.uniform(-1.0, 1.0))
        bw = rng.uniform(70.0, 110.0)
        r = math.exp(-math.pi * bw / sample_rate)
        theta = 2 * math.pi * fc / sample_rate
        a = [1.0, -2 * r * math.cos(theta), r * r]
        x = lfilter([1.0 - r], a, x)

    tilt = TILT_DB_PER_OCT[degradation]
    if tilt > 0:
        spec = np.fft.rfft(x)
        freqs = np.fft.rfftfreq(n, 1 / sample_rate)
        octaves = np.log2(np.maximum(freqs, 62.5) / 1000.0)
        spec *= 10.0 ** (-tilt * octaves / 20.0)
        x = np.fft.irfft(spec, n)

    # headroom chosen so the safety clamp below almost never engages; a
    # per-utterance rescale would blur the class-determined noise floor
    rms = float(np.sqrt(np.mean(x * x)))
    if rms > 0:
        x = x * (0.04 / rms)
    noise_rms = 0.04 * 10.0 ** (-SNR_DB[degradation] / 20.0)
    # pink noise: the floor then shows at every frequency, not just up top
    white = rng.normal(0.0, 1.0, n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1 / sample_rate)
    spec /= np.sqrt(np.maximum(freqs, freqs[1]) / 1000.0)
    noise = np.fft.irfft(spec, n)
    noise *= noise_rms / np.sqrt(np.mean(noise * noise))
    x = x + noise

    peak = float(np.max(np.abs(x)))
    if peak > 0.98:
        x = x * (0.98 / peak)
    return x


def synth_corpus(
    n_speakers_per_class: int,
    utterances_per_speaker: int,
    seed: int,
    out_dir: str | Path,
    sample_rate: int = 16000,
) -> tuple[list[ManifestRow], Path]:
    """Generate the synthetic five-class corpus and its manifest.

    Fully reproducible from the seed: per-utterance RNG streams are derived
    from (seed, class, speaker, utterance), so outputs are byte-identical
    across runs. The manifest is written last and lists only files that were
    actually written.
    """
    if n_speakers_per_class < 1 or utterances_per_speaker < 1:
        raise ValueError("counts must be >= 1")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    rows: list[ManifestRow] = []
    spk_counter = 0
    for klass in range(5):
        for i in range(n_speakers_per_class):
            spk_rng = np.random.default_rng(np.random.SeedSequence([seed, klass, i]))
            voice = sample_voice(spk_rng)
            speaker_id = f"spk_c{klass}_{i:03d}"
            etiology = _ETIOLOGIES[spk_counter % len(_ETIOLOGIES)]
            spk_counter += 1
            for j in range(utterances_per_speaker):
                utt_rng = np.random.default_rng(
                    np.random.SeedSequence([seed, klass, i, j])
                )
                duration = float(utt_rng.uniform(1.0, 3.0))
                x = synth_utterance(voice, klass, duration, utt_rng, sample_rate)
                uid = f"{speaker_id}_u{j:03d}"
                wav_path = wav_dir / f"{uid}.wav"
                write_wav(wav_path, x, sample_rate)
                rows.append(
                    ManifestRow(
                        utterance_id=uid,
                        audio_path=str(wav_path),
                        speaker_id=speaker_id,
                        label=IntelligibilityClass(klass),
                        etiology=etiology,
                    )
                )

    manifest_path = out_dir / "manifest.csv"
    write_manifest(rows, manifest_path, audio_relative_to=out_dir)
    return rows, manifest_path
