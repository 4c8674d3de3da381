"""Command-line entry point: synth, split, train-cnn, embed-train, predict,
evaluate, report.

Exit codes: 0 success, 1 usage error, 2 data/validation error. Heavy imports
happen inside subcommands so the SPICE_THREADS cap can be applied before
numpy's thread pools spin up.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys


def _apply_thread_cap() -> None:
    cap = os.environ.get("SPICE_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _write_scores_csv(path, rows):
    """rows: list of (utterance_id, scores)."""
    k = len(rows[0][1]) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["utterance_id"] + [f"score_{i}" for i in range(k)])
        for uid, scores in sorted(rows):
            w.writerow([uid] + [f"{s:.8f}" for s in scores])


def _read_scores_csv(path):
    import numpy as np

    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        cols = [c for c in (reader.fieldnames or []) if c.startswith("score_")]
        if "utterance_id" not in (reader.fieldnames or []) or not cols:
            raise ValueError(f"{path}: expected utterance_id and score_* columns")
        cols.sort(key=lambda c: int(c.split("_")[1]))
        out = {}
        for row in reader:
            out[row["utterance_id"]] = np.array([float(row[c]) for c in cols])
    if not out:
        raise ValueError(f"{path}: no score rows")
    return out


def _filter_split(rows, split):
    if split is None:
        return rows
    kept = [r for r in rows if r.split == split]
    if not kept:
        raise ValueError(f"manifest has no rows with split {split!r}")
    return kept


def cmd_synth(args) -> int:
    from .data import synth_corpus

    rows, manifest = synth_corpus(
        args.speakers_per_class, args.utts, seed=args.seed, out_dir=args.out
    )
    print(f"wrote {len(rows)} utterances, manifest at {manifest}")
    return 0


def cmd_split(args) -> int:
    from .data import parse_manifest, speaker_split, write_manifest

    rows, _ = parse_manifest(args.manifest)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    if len(ratios) != 3:
        raise ValueError(f"--ratios needs 3 values, got {args.ratios!r}")
    rows = speaker_split(rows, ratios=ratios, seed=args.seed, stratify=args.stratify)
    write_manifest(rows, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_train_cnn(args) -> int:
    from . import cnn
    from .checkpoint import save_cnn
    from .data import parse_manifest
    from .frontend import init_gabor_mel

    rows, _ = parse_manifest(args.manifest)
    train_rows = [r for r in rows if r.split == "train"]
    val_rows = [r for r in rows if r.split == "val"]
    if not train_rows or not val_rows:
        raise ValueError(f"{args.manifest}: needs rows with split train and val")

    config = (
        cnn.paper_scale_config(args.task)
        if args.arch == "paper"
        else cnn.default_config(args.task)
    )
    tc = cnn.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
    )
    fp = init_gabor_mel(args.channels, 16000)

    def progress(st):
        print(
            f"epoch {st.epoch}: train {st.train_loss:.4f} "
            f"val {st.val_loss:.4f} acc {st.val_accuracy:.3f}"
        )

    model, _ = cnn.train(train_rows, val_rows, config, tc, frontend_params=fp, progress=progress)
    save_cnn(model, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_embed_train(args) -> int:
    from .checkpoint import save_head
    from .data import parse_manifest
    from .embeddings import read_embeddings
    from .heads import train_forest, train_lda, train_logreg
    from .metrics import binarize_mildplus

    rows, _ = parse_manifest(args.manifest)
    rows = _filter_split(rows, args.split)
    records = read_embeddings(args.embeddings)
    by_id = {r.utterance_id for r in records}
    rows = [r for r in rows if r.utterance_id in by_id]
    if not rows:
        raise ValueError(
            f"no manifest rows match embeddings in {args.embeddings}"
        )
    keep = {r.utterance_id for r in rows}
    records = [r for r in records if r.utterance_id in keep]
    labels = {
        r.utterance_id: (binarize_mildplus(r.label) if args.task == 2 else int(r.label))
        for r in rows
    }
    if args.head == "logreg":
        model = train_logreg(records, labels, args.task, l2_lambda=args.l2)
    elif args.head == "lda":
        model = train_lda(records, labels, args.task, shrinkage=args.shrinkage)
    else:
        model = train_forest(
            records, labels, args.task, n_trees=args.trees, seed=args.seed
        )
    save_head(model, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_predict(args) -> int:
    from .checkpoint import load_model
    from .data import parse_manifest

    rows, _ = parse_manifest(args.manifest)
    rows = _filter_split(rows, args.split)
    model = load_model(args.model)

    out_rows = []
    if getattr(model, "kind", "cnn") in ("logreg", "lda", "forest"):
        from .embeddings import read_embeddings
        from .heads import predict_scores

        if not args.embeddings:
            raise ValueError("--embeddings is required for head models")
        records = {r.utterance_id: r for r in read_embeddings(args.embeddings)}
        for r in rows:
            if r.utterance_id not in records:
                raise ValueError(f"no embedding for utterance {r.utterance_id!r}")
            out_rows.append(
                (r.utterance_id, predict_scores(model, records[r.utterance_id]))
            )
    else:
        from .audio import load_wav
        from .cnn import predict_utterance

        for r in rows:
            clip = load_wav(r.audio_path)
            out_rows.append((r.utterance_id, predict_utterance(clip, model)))

    _write_scores_csv(args.out, out_rows)
    print(f"wrote {len(out_rows)} predictions to {args.out}")
    return 0


def _read_extra_column(manifest_path, column):
    with open(manifest_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if column not in (reader.fieldnames or []):
            raise ValueError(f"{manifest_path}: no column {column!r}")
        return {row["utterance_id"]: row[column] for row in reader}


def cmd_evaluate(args) -> int:
    import numpy as np

    from .data import parse_manifest
    from .metrics import binarize_mildplus, build_report, intelligibility_percent, pearson

    rows, _ = parse_manifest(args.manifest)
    rows = _filter_split(rows, args.split)
    scores_by_id = _read_scores_csv(args.scores)
    missing = [r.utterance_id for r in rows if r.utterance_id not in scores_by_id]
    if missing:
        raise ValueError(f"{args.scores}: no scores for {missing[0]!r} "
                         f"(+{len(missing) - 1} more)" if len(missing) > 1 else
                         f"{args.scores}: no scores for {missing[0]!r}")
    rows = sorted(rows, key=lambda r: r.utterance_id)
    scores = np.stack([scores_by_id[r.utterance_id] for r in rows])
    if scores.shape[1] != args.task:
        raise ValueError(
            f"{args.scores}: {scores.shape[1]} score columns for task {args.task}"
        )
    refs = [
        binarize_mildplus(r.label) if args.task == 2 else int(r.label) for r in rows
    ]
    report = build_report(
        args.task,
        refs,
        scores,
        speaker_ids=[r.speaker_id for r in rows],
        utterance_ids=[r.utterance_id for r in rows],
        slice_values=[getattr(r, args.slice_by) for r in rows] if args.slice_by else None,
    )
    doc = report.to_dict()

    if args.ref_percent_column:
        class_map = tuple(float(v) for v in args.class_map.split(","))
        if len(class_map) != args.task:
            raise ValueError(
                f"--class-map has {len(class_map)} values for task {args.task}"
            )
        ref_col = _read_extra_column(args.manifest, args.ref_percent_column)
        by_speaker: dict[str, list] = {}
        for r in rows:
            by_speaker.setdefault(r.speaker_id, []).append(r)
        speakers, pred_pct, ref_pct = [], [], []
        for spk in sorted(by_speaker):
            group = by_speaker[spk]
            preds = [int(np.argmax(scores_by_id[r.utterance_id])) for r in group]
            ref_vals = {ref_col[r.utterance_id] for r in group}
            if len(ref_vals) != 1:
                raise ValueError(f"speaker {spk!r}: inconsistent {args.ref_percent_column}")
            speakers.append(spk)
            pred_pct.append(intelligibility_percent(preds, class_map))
            ref_pct.append(float(ref_vals.pop()))
        doc["intelligibility"] = {
            "pearson": pearson(pred_pct, ref_pct),
            "class_map": list(class_map),
            "speakers": [
                {"speaker_id": s, "predicted_pct": p, "reference_pct": rp}
                for s, p, rp in zip(speakers, pred_pct, ref_pct)
            ],
        }

    text = json.dumps(doc, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    return 0


def cmd_report(args) -> int:
    with open(args.input, encoding="utf-8") as f:
        doc = json.load(f)

    def fmt(v):
        return "NA" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))

    print(f"task: {doc['task']}-class   utterances: {doc['n_utterances']}")
    print(f"accuracy:     {fmt(doc['accuracy'])}")
    print(f"macro F1:     {fmt(doc['macro_f1'])}")
    print(f"mean 1vR AUC: {fmt(doc['mean_ovr_auc'])}")
    print(f"per-class AUC: [{', '.join(fmt(a) for a in doc['per_class_auc'])}]")
    if doc.get("speakers"):
        print("\nspeaker        pred  binarized-acc%")
        for s in doc["speakers"]:
            print(
                f"{s['speaker_id']:<14} {s['predicted_class']:<5}"
                f" {s['binarized_accuracy_pct']:.1f}"
            )
    for name, sub in sorted(doc.get("slices", {}).items()):
        print(
            f"\nslice {name}: n={sub['n_utterances']} acc={fmt(sub['accuracy'])} "
            f"f1={fmt(sub['macro_f1'])} auc={fmt(sub['mean_ovr_auc'])}"
        )
    intel = doc.get("intelligibility")
    if intel:
        print(f"\nintelligibility pearson: {fmt(intel['pearson'])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spice", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="generate the synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--speakers-per-class", type=int, default=4)
    s.add_argument("--utts", type=int, default=25)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="assign speaker-level train/val/test splits")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ratios", default="0.70,0.15,0.15")
    s.add_argument("--stratify", action=argparse.BooleanOptionalAction, default=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train-cnn", help="train the learnable frontend + CNN")
    s.add_argument("--manifest", required=True)
    s.add_argument("--task", type=int, choices=(2, 5), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--patience", type=int, default=5)
    s.add_argument("--channels", type=int, default=40, help="frontend channels")
    s.add_argument("--arch", choices=("desk", "paper"), default="desk")
    s.set_defaults(func=cmd_train_cnn)

    s = sub.add_parser("embed-train", help="train a head on an SPCE embedding file")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--head", choices=("logreg", "lda", "forest"), required=True)
    s.add_argument("--task", type=int, choices=(2, 5), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default=None)
    s.add_argument("--l2", type=float, default=1e-4)
    s.add_argument("--shrinkage", type=float, default=0.1)
    s.add_argument("--trees", type=int, default=100)
    s.set_defaults(func=cmd_embed_train)

    s = sub.add_parser("predict", help="per-utterance class scores to CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--embeddings", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default=None)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="full evaluation report (JSON)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--scores", required=True)
    s.add_argument("--task", type=int, choices=(2, 5), required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--split", default=None)
    s.add_argument("--slice-by", default=None, choices=("etiology",))
    s.add_argument("--ref-percent-column", default=None)
    s.add_argument("--class-map", default="100,90,60,40,20")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="render a report JSON as a table")
    s.add_argument("--in", dest="input", required=True)
    s.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1

    from .checkpoint import CheckpointError
    from .data import ManifestError
    from .embeddings import EmbeddingFileError

    try:
        return args.func(args)
    except (
        ManifestError,
        EmbeddingFileError,
        CheckpointError,
        FileNotFoundError,
        ValueError,
        OSError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
