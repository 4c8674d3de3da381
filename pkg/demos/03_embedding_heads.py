"""Train the three shallow heads on utterance embeddings and compare them.

Embeddings here are log-mel frame means written through the SPCE container,
standing in for a pretrained backbone's pooled representations.

Run: python3 demos/03_embedding_heads.py [work_dir]
"""

import sys
from pathlib import Path

import numpy as np

from spice.audio import load_wav
from spice.data import speaker_split, synth_corpus
from spice.embeddings import EmbeddingRecord, read_embeddings, write_embeddings
from spice.frontend import logmel_forward
from spice.heads import predict_scores, train_forest, train_lda, train_logreg
from spice.metrics import build_report

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out") / "heads"
work.mkdir(parents=True, exist_ok=True)

rows, _ = synth_corpus(6, 8, seed=21, out_dir=work)
rows = speaker_split(rows, seed=2, stratify=True)


def embed(row):
    fm = logmel_forward(load_wav(row.audio_path), n_mels=40)
    return EmbeddingRecord(row.utterance_id, fm.values.mean(axis=1).astype(np.float32))


records = [embed(r) for r in rows]
spce_path = work / "logmel_means.spce"
write_embeddings(records, spce_path)
records = {r.utterance_id: r for r in read_embeddings(spce_path)}
print(f"wrote and re-read {len(records)} embeddings ({spce_path})")

labels = {r.utterance_id: int(r.label) for r in rows}
train_recs = [records[r.utterance_id] for r in rows if r.split == "train"]
test_rows = [r for r in rows if r.split == "test"]

heads = {
    "logreg": train_logreg(train_recs, labels, 5),
    "lda": train_lda(train_recs, labels, 5),
    "forest": train_forest(train_recs, labels, 5, n_trees=100, seed=0),
}

for name, model in heads.items():
    scores = np.stack(
        [predict_scores(model, records[r.utterance_id]) for r in test_rows]
    )
    rep = build_report(5, [int(r.label) for r in test_rows], scores)
    auc = "NA" if rep.mean_ovr_auc is None else f"{rep.mean_ovr_auc:.3f}"
    print(f"{name:>7}: acc {rep.accuracy:.3f}  F1 {rep.macro_f1:.3f}  AUC {auc}")
