"""Extract utterance embeddings from a speech backbone into an SPCE file.

Reads the standard manifest CSV, runs each utterance through a wav2vec2-style
backbone, mean-pools the chosen layer's frames over time, and writes the
records in the SPCE container. The SPCE bytes written here follow the format
specification independently; the output is then validated by re-reading it
with the primary toolkit's reader, which is the contract between the two
packages.

Backbone identifiers:
  - any huggingface model id or local path -> transformers.from_pretrained
  - "untrained-base" or "untrained-base:<seed>" -> a locally constructed,
    randomly initialized wav2vec2 base architecture (12 layers, 768-d) for
    offline use; deterministic given the seed.
"""

from __future__ import annotations

import argparse
import csv
import math
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly

from spice.embeddings import read_embeddings

BACKBONE_RATE = 16000


class ExportError(Exception):
    pass


@dataclass
class ExportJob:
    manifest: Path
    backbone: str
    output: Path
    layer: int | str = "final"  # index into hidden states, or "final"
    batch_size: int = 8
    device: str = "cpu"


@dataclass
class ExportSummary:
    count: int
    dim: int
    failures: list[tuple[str, str]] = field(default_factory=list)


def _read_manifest(path: Path) -> list[tuple[str, Path]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        cols = reader.fieldnames or []
        for required in ("utterance_id", "audio_path"):
            if required not in cols:
                raise ExportError(f"{path}: missing column {required!r}")
        rows = []
        seen = set()
        for r in reader:
            uid = r["utterance_id"].strip()
            if uid in seen:
                raise ExportError(f"{path}: duplicate utterance_id {uid!r}")
            seen.add(uid)
            ap = Path(r["audio_path"].strip())
            if not ap.is_absolute():
                ap = path.parent / ap
            rows.append((uid, ap))
    if not rows:
        raise ExportError(f"{path}: no rows")
    return rows


def load_backbone(identifier: str, device: str = "cpu"):
    from transformers import Wav2Vec2Config, Wav2Vec2Model

    if identifier.startswith("untrained-base"):
        seed = 0
        if ":" in identifier:
            seed = int(identifier.split(":", 1)[1])
        torch.manual_seed(seed)
        model = Wav2Vec2Model(Wav2Vec2Config())
    else:
        try:
            model = Wav2Vec2Model.from_pretrained(identifier)
        except Exception as e:  # backbone load failure is fatal
            raise ExportError(f"cannot load backbone {identifier!r}: {e}") from e
    return model.to(device).eval()


def _load_audio(path: Path) -> np.ndarray:
    rate, data = wavfile.read(path)
    x = np.asarray(data, dtype=np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if np.issubdtype(np.asarray(data).dtype, np.integer):
        x = x / 32768.0
    if len(x) == 0:
        raise ExportError(f"{path}: empty audio")
    if rate != BACKBONE_RATE:
        g = math.gcd(BACKBONE_RATE, int(rate))
        x = resample_poly(x, BACKBONE_RATE // g, int(rate) // g, window=("kaiser", 8.6))
    return x


def _resolve_layer(layer, n_hidden_states: int) -> int:
    if layer == "final":
        return n_hidden_states - 1
    idx = int(layer)
    if not 0 <= idx < n_hidden_states:
        raise ExportError(f"layer {idx} outside backbone depth {n_hidden_states}")
    return idx


def extract_frames(model, x: np.ndarray, layer) -> torch.Tensor:
    """Frame features [n_frames, dim] of one utterance at the chosen layer.

    Utterances run one at a time, so every frame is real and the mean below
    never sees padding.
    """
    with torch.no_grad():
        wav = torch.from_numpy(x).float().unsqueeze(0)
        out = model(wav, output_hidden_states=True)
    states = out.hidden_states
    idx = _resolve_layer(layer, len(states))
    return states[idx][0]


def mean_pool(frames: torch.Tensor) -> np.ndarray:
    """Mean over time; duplicating the frame sequence leaves this fixed."""
    return frames.mean(dim=0).numpy().astype(np.float32)


def _embed(model, x: np.ndarray, layer) -> np.ndarray:
    return mean_pool(extract_frames(model, x, layer))


def _write_spce(records: list[tuple[str, np.ndarray]], path: Path) -> None:
    # independent implementation of the SPCE layout: magic, version, dim,
    # count, then (id_len u16, id, dim x f32 LE) in ascending id order
    dim = len(records[0][1]) if records else 0
    parts = [struct.pack("<4sIII", b"SPCE", 1, dim, len(records))]
    for uid, vec in sorted(records, key=lambda r: r[0]):
        raw = uid.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(np.asarray(vec, dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))


def export(job: ExportJob) -> ExportSummary:
    """Run the job; per-utterance failures are collected, not fatal."""
    rows = _read_manifest(Path(job.manifest))
    model = load_backbone(job.backbone, job.device)

    records: list[tuple[str, np.ndarray]] = []
    failures: list[tuple[str, str]] = []
    for uid, audio_path in rows:
        try:
            x = _load_audio(audio_path)
            records.append((uid, _embed(model, x, job.layer)))
        except ExportError as e:
            failures.append((uid, str(e)))
        except (OSError, ValueError) as e:
            failures.append((uid, f"{type(e).__name__}: {e}"))

    if not records:
        raise ExportError("every utterance failed; nothing to write")
    _write_spce(records, Path(job.output))

    back = read_embeddings(job.output)  # primary reader validates the bytes
    if len(back) != len(records):
        raise ExportError("output failed validation by the primary reader")
    return ExportSummary(count=len(back), dim=len(back[0].vector), failures=failures)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="spice-export", description=__doc__)
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", default="final")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--device", default="cpu")
    args = p.parse_args(argv)
    try:
        summary = export(
            ExportJob(
                manifest=Path(args.manifest),
                backbone=args.backbone,
                output=Path(args.out),
                layer=args.layer,
                batch_size=args.batch_size,
                device=args.device,
            )
        )
    except (ExportError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {summary.count} embeddings (dim {summary.dim}) to {args.out}")
    for uid, reason in summary.failures:
        print(f"failed {uid}: {reason}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
