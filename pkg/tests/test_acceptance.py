"""Acceptance criteria, one test per criterion.

Each test prints a single `[ACCEPTANCE] <name>: PASS/FAIL` line (visible with
`pytest -s` or in the captured output) and enforces the stated tolerance and
runtime budget.
"""

import time

import numpy as np
import pytest

from spice import cnn
from spice.checkpoint import load_checkpoint, save_checkpoint
from spice.embeddings import EmbeddingFileError, EmbeddingRecord, read_embeddings, write_embeddings
from spice.frontend import LEARNABLE_FIELDS, _backward_batch, _forward_batch, init_gabor_mel
from spice.heads import forest_oob_accuracy, predict_scores, train_forest, train_lda, train_logreg
from spice.labels import IntelligibilityClass
from spice.metrics import (
    binarize_mildplus,
    binarized_accuracy,
    build_report,
    intelligibility_percent,
    ovr_auc,
    speaker_aggregate,
)


def _report(name, ok, detail):
    line = f"[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# Gradient fidelity: frontend parameter groups and CNN weight tensors vs
# central finite differences, through the full model on a 0.2 s clip,
# 10 seeds, 64-bit. Tolerance 1e-4 relative; budget 2 minutes.
# ---------------------------------------------------------------------------

def test_gradient_fidelity():
    t0 = time.time()
    sr = 16000
    config = cnn.CnnConfig(5, [("time", 4, "max2"), ("freq", 4, "none")])
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.normal(0, 0.1, 3200)
        lengths = np.array([3200])
        fp = init_gabor_mel(6, sr)
        weights = cnn.init_weights(config, rng, np.float64)
        label = int(rng.integers(0, 5))

        def loss_of(fparams, ws):
            feats, nf, _ = _forward_batch(x[None, :], lengths, fparams, sr, np.float64)
            logits, _ = cnn._forward_batch(feats, nf, ws, config)
            return cnn.cross_entropy(logits[0], label)[0]

        feats, nf, fcache = _forward_batch(x[None, :], lengths, fp, sr, np.float64)
        logits, ccache = cnn._forward_batch(feats, nf, weights, config)
        _, dlogit = cnn.cross_entropy(logits[0], label)
        cnn_grads, dfeats = cnn._backward_batch(dlogit[None, :], weights, config, ccache)
        fgrads = _backward_batch(fcache, dfeats)

        for name in LEARNABLE_FIELDS:
            arr = getattr(fp, name)
            for idx in rng.choice(len(arr), size=2, replace=False):
                h = 1e-5 * abs(arr[idx])
                q1, q2 = fp.copy(), fp.copy()
                getattr(q1, name)[idx] += h
                getattr(q2, name)[idx] -= h
                fd = (loss_of(q1, weights) - loss_of(q2, weights)) / (2 * h)
                an = fgrads[name][idx]
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-10)
                worst = max(worst, rel)

        for name, w in weights.items():
            flat = w.ravel()
            for ix in rng.choice(flat.size, size=min(2, flat.size), replace=False):
                h = 1e-5 * max(abs(flat[ix]), 1e-3)
                w2 = {k: v.copy() for k, v in weights.items()}
                w2[name].ravel()[ix] += h
                up = loss_of(fp, w2)
                w2[name].ravel()[ix] -= 2 * h
                down = loss_of(fp, w2)
                fd = (up - down) / (2 * h)
                an = cnn_grads[name].ravel()[ix]
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-10)
                worst = max(worst, rel)

    dt = time.time() - t0
    _report(
        "gradient-fidelity",
        worst < 1e-4 and dt < 120,
        f"worst rel err {worst:.2e}, {dt:.0f}s < 120s",
    )


# ---------------------------------------------------------------------------
# AUC oracle: rank-based ovr_auc vs O(n^2) brute force, 50 seeded instances
# (n=200, K=5), tie-heavy included, agreement within 1e-12; budget 10 s.
# ---------------------------------------------------------------------------

def test_auc_oracle():
    t0 = time.time()

    def brute(scores, positive):
        pos = scores[positive]
        neg = scores[~positive]
        if len(pos) == 0 or len(neg) == 0:
            return None
        wins = 0.0
        for p in pos:
            wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
        return wins / (len(pos) * len(neg))

    worst = 0.0
    rng = np.random.default_rng(2718)
    for trial in range(50):
        n, k = 200, 5
        scores = rng.random((n, k))
        if trial % 2:
            scores = np.round(scores, 1)  # heavy ties
        ref = rng.integers(0, k, n)
        _, per_class = ovr_auc(scores, ref, k)
        for c in range(k):
            oracle = brute(scores[:, c], ref == c)
            if oracle is None:
                assert per_class[c] is None
            else:
                worst = max(worst, abs(per_class[c] - oracle))
    dt = time.time() - t0
    _report("auc-oracle", worst < 1e-12 and dt < 10, f"worst |diff| {worst:.2e}, {dt:.1f}s < 10s")


# ---------------------------------------------------------------------------
# Head oracles: LDA matches an independent closed-form implementation
# exactly; logistic regression separates blobs perfectly; forest OOB >= 95%.
# Budget 1 minute.
# ---------------------------------------------------------------------------

def test_head_oracles():
    t0 = time.time()
    rng = np.random.default_rng(77)

    # seeded 3-class Gaussians, d=5, n=300
    k, d, n = 3, 5, 300
    centers = rng.normal(0, 3, (k, d))
    x = np.concatenate([rng.normal(0, 1, (n // k, d)) + centers[c] for c in range(k)])
    y = np.repeat(np.arange(k), n // k)
    recs = [EmbeddingRecord(f"u{i:04d}", v.astype(np.float32)) for i, v in enumerate(x)]
    labels = {f"u{i:04d}": int(c) for i, c in enumerate(y)}
    gamma = 0.1
    lda = train_lda(recs, labels, k, shrinkage=gamma)

    classes = np.unique(y)
    means = {c: x[y == c].mean(axis=0) for c in classes}
    priors = {c: float(np.mean(y == c)) for c in classes}
    cov = np.zeros((d, d))
    for c in classes:
        for row in x[y == c]:
            diff = (row - means[c])[:, None]
            cov += diff @ diff.T
    cov /= n - len(classes)
    shrunk = (1 - gamma) * cov + gamma * (np.trace(cov) / d) * np.eye(d)
    inv = np.linalg.inv(shrunk)

    def oracle(v):
        deltas = [
            (v @ inv @ means[c] - 0.5 * means[c] @ inv @ means[c] + np.log(priors[c]), c)
            for c in classes
        ]
        return max(deltas)[1]

    lda_exact = all(
        int(np.argmax(predict_scores(lda, EmbeddingRecord("q", x[i].astype(np.float32)))))
        == oracle(x[i])
        for i in range(n)
    )

    # separable blobs, margin >= 1
    xb = np.concatenate([rng.normal(0, 0.4, (100, 2)), rng.normal(0, 0.4, (100, 2)) + [4, 0]])
    yb = np.array([0] * 100 + [1] * 100)
    brecs = [EmbeddingRecord(f"b{i:04d}", v.astype(np.float32)) for i, v in enumerate(xb)]
    blabels = {f"b{i:04d}": int(c) for i, c in enumerate(yb)}
    logreg = train_logreg(brecs, blabels, 2)
    train_acc = np.mean(
        [
            np.argmax(predict_scores(logreg, EmbeddingRecord("q", v.astype(np.float32)))) == c
            for v, c in zip(xb, yb)
        ]
    )

    forest = train_forest(brecs, blabels, 2, n_trees=100, seed=5)
    oob = forest_oob_accuracy(forest, brecs, blabels)

    dt = time.time() - t0
    _report(
        "head-oracles",
        lda_exact and train_acc == 1.0 and oob >= 0.95 and dt < 60,
        f"lda exact={lda_exact}, logreg train acc={train_acc:.3f}, "
        f"forest oob={oob:.3f}, {dt:.0f}s < 60s",
    )


# ---------------------------------------------------------------------------
# End-to-end synthetic task: synth(4/class x 25) -> stratified split ->
# LEAF+CNN 5-class training reaches >= 90% val accuracy within 30 epochs;
# evaluate reports test accuracy >= 85% and mean 1-vs-rest AUC >= 0.95.
# Budget 10 minutes, fixed seed.
# ---------------------------------------------------------------------------

def test_end_to_end_synthetic(tmp_path, capsys):
    # the whole pipeline runs through the CLI: synth -> split -> train-cnn ->
    # predict -> evaluate
    import json
    import re

    from spice.cli import main

    t0 = time.time()
    corpus = tmp_path / "corpus"
    assert main(["synth", "--out", str(corpus), "--speakers-per-class", "4",
                 "--utts", "25", "--seed", "33"]) == 0
    split_csv = tmp_path / "split.csv"
    assert main(["split", "--manifest", str(corpus / "manifest.csv"),
                 "--out", str(split_csv), "--seed", "5"]) == 0
    model = tmp_path / "model.spck"
    capsys.readouterr()
    assert main(["train-cnn", "--manifest", str(split_csv), "--task", "5",
                 "--out", str(model), "--seed", "0", "--epochs", "12",
                 "--patience", "5", "--channels", "24", "--batch-size", "16"]) == 0
    train_log = capsys.readouterr().out
    val_accs = [float(m) for m in re.findall(r"acc (\d\.\d+)", train_log)]
    best_val = max(val_accs)
    n_epochs = len(val_accs)

    scores_csv = tmp_path / "scores.csv"
    assert main(["predict", "--model", str(model), "--manifest", str(split_csv),
                 "--split", "test", "--out", str(scores_csv)]) == 0
    report_json = tmp_path / "report.json"
    assert main(["evaluate", "--manifest", str(split_csv), "--scores", str(scores_csv),
                 "--task", "5", "--split", "test", "--out", str(report_json)]) == 0
    doc = json.loads(report_json.read_text())

    dt = time.time() - t0
    _report(
        "end-to-end-synthetic",
        best_val >= 0.90 and doc["accuracy"] >= 0.85
        and doc["mean_ovr_auc"] is not None and doc["mean_ovr_auc"] >= 0.95
        and n_epochs <= 30 and dt < 600,
        f"val acc {best_val:.3f} in {n_epochs} epochs, test acc "
        f"{doc['accuracy']:.3f}, mean AUC {doc['mean_ovr_auc']:.3f}, {dt:.0f}s < 600s",
    )


# ---------------------------------------------------------------------------
# Protocol fidelity: hand-computed speaker tables, the exact class->percent
# map, and the binary grouping. Budget 1 second.
# ---------------------------------------------------------------------------

def test_protocol_fidelity():
    t0 = time.time()
    ok = True

    # case 1: single-utterance speaker passes through unchanged
    out = speaker_aggregate(["u1"], ["s"], [[0.1, 0.5, 0.2, 0.1, 0.1]])
    ok &= out[0].predicted_class == 1

    # case 2: exact tie resolves toward the less severe class
    out = speaker_aggregate(
        ["u1", "u2"], ["s", "s"], [[1, 0, 0, 0, 0], [0, 1, 0, 0, 0]]
    )
    ok &= out[0].predicted_class == 0 and np.array_equal(out[0].mean_scores, [0.5, 0.5, 0, 0, 0])

    # case 3: mean of three utterances, hand-computed argmax = 3
    s3 = [[0.1, 0.1, 0.2, 0.5, 0.1], [0.0, 0.0, 0.1, 0.8, 0.1], [0.2, 0.0, 0.1, 0.6, 0.1]]
    out = speaker_aggregate(["a", "b", "c"], ["s"] * 3, s3)
    ok &= out[0].predicted_class == 3
    ok &= np.allclose(out[0].mean_scores, np.mean(s3, axis=0))

    # case 4: tie between classes 2 and 3 resolves to 2
    s4 = [[0, 0, 0.5, 0.5, 0], [0, 0, 0.5, 0.5, 0]]
    out = speaker_aggregate(["a", "b"], ["s"] * 2, s4)
    ok &= out[0].predicted_class == 2

    # case 5: two speakers aggregated independently, sorted by id
    s5 = [[0.9, 0.1, 0, 0, 0], [0, 0, 0, 0.1, 0.9], [0.8, 0.2, 0, 0, 0]]
    out = speaker_aggregate(["a", "b", "c"], ["sp1", "sp2", "sp1"], s5)
    ok &= [o.speaker_id for o in out] == ["sp1", "sp2"]
    ok &= out[0].predicted_class == 0 and out[1].predicted_class == 4

    # binarized accuracy: argmax-then-binarize, per the protocol
    scores = np.array([[0.6, 0.4, 0, 0, 0]] * 3 + [[0.1, 0.9, 0, 0, 0]])
    ok &= binarized_accuracy(scores, 0) == 75.0

    # the exact class -> percentage map
    ok &= intelligibility_percent([0]) == 100.0
    ok &= intelligibility_percent([1]) == 90.0
    ok &= intelligibility_percent([2]) == 60.0
    ok &= intelligibility_percent([3]) == 40.0
    ok &= intelligibility_percent([4]) == 20.0
    ok &= intelligibility_percent([1, 1, 2]) == pytest.approx(80.0)

    # binary grouping of all five classes
    ok &= binarize_mildplus(IntelligibilityClass.TYPICAL) == 0
    ok &= all(
        binarize_mildplus(c) == 1
        for c in (IntelligibilityClass.MILD, IntelligibilityClass.MODERATE,
                  IntelligibilityClass.SEVERE, IntelligibilityClass.PROFOUND)
    )

    dt = time.time() - t0
    _report("protocol-fidelity", ok and dt < 1.0, f"5 speaker cases + map + binarization, {dt:.2f}s < 1s")


# ---------------------------------------------------------------------------
# Determinism: CLI-level bit reproducibility, byte-idempotent containers,
# reader fuzzing.
# ---------------------------------------------------------------------------

def test_determinism(small_corpus, tmp_path):
    import hashlib

    from spice.cli import main
    from spice.data import write_manifest

    def tree_hash(root):
        h = hashlib.sha256()
        for p in sorted(root.rglob("*")):
            if p.is_file():
                h.update(p.name.encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    details = []

    # synth
    for d in ("s1", "s2"):
        assert main(["synth", "--out", str(tmp_path / d), "--speakers-per-class", "1",
                     "--utts", "2", "--seed", "3"]) == 0
    synth_ok = tree_hash(tmp_path / "s1") == tree_hash(tmp_path / "s2")
    details.append(f"synth={synth_ok}")

    # split
    manifest = small_corpus["manifest"]
    for d in ("p1.csv", "p2.csv"):
        assert main(["split", "--manifest", str(manifest), "--out", str(tmp_path / d),
                     "--seed", "9"]) == 0
    split_ok = (tmp_path / "p1.csv").read_bytes() == (tmp_path / "p2.csv").read_bytes()
    details.append(f"split={split_ok}")

    # train-cnn
    full_manifest = tmp_path / "m.csv"
    write_manifest(small_corpus["rows"], full_manifest)
    for d in ("c1.spck", "c2.spck"):
        assert main(["train-cnn", "--manifest", str(full_manifest), "--task", "5",
                     "--out", str(tmp_path / d), "--seed", "4", "--epochs", "2",
                     "--patience", "2", "--channels", "8", "--batch-size", "16"]) == 0
    cnn_ok = (tmp_path / "c1.spck").read_bytes() == (tmp_path / "c2.spck").read_bytes()
    details.append(f"train-cnn={cnn_ok}")

    # embed-train (forest exercises the seeded bootstrap)
    rng = np.random.default_rng(0)
    recs = []
    for r in small_corpus["rows"]:
        v = rng.normal(0, 0.3, 16)
        v[int(r.label)] += 4.0
        recs.append(EmbeddingRecord(r.utterance_id, v.astype(np.float32)))
    spce = tmp_path / "e.spce"
    write_embeddings(recs, spce)
    for d in ("h1.spck", "h2.spck"):
        assert main(["embed-train", "--embeddings", str(spce), "--manifest", str(full_manifest),
                     "--head", "forest", "--task", "5", "--out", str(tmp_path / d),
                     "--seed", "6", "--trees", "15"]) == 0
    head_ok = (tmp_path / "h1.spck").read_bytes() == (tmp_path / "h2.spck").read_bytes()
    details.append(f"embed-train={head_ok}")

    # SPCE and SPCK round-trips are byte-idempotent
    back = read_embeddings(spce)
    spce2 = tmp_path / "e2.spce"
    write_embeddings(back, spce2)
    spce_ok = spce.read_bytes() == spce2.read_bytes()
    task, cfg, tensors = load_checkpoint(tmp_path / "h1.spck")
    save_checkpoint(tmp_path / "h3.spck", task, cfg, tensors)
    spck_ok = (tmp_path / "h1.spck").read_bytes() == (tmp_path / "h3.spck").read_bytes()
    details.append(f"spce-idempotent={spce_ok}")
    details.append(f"spck-idempotent={spck_ok}")

    # SPCE fuzzing: 1000 random files never crash the reader
    fuzz_rng = np.random.default_rng(99)
    crashes = 0
    fuzz = tmp_path / "fuzz.spce"
    for i in range(1000):
        blob = fuzz_rng.integers(0, 256, int(fuzz_rng.integers(0, 300)), dtype=np.uint8).tobytes()
        if i % 3 == 0:
            blob = b"SPCE" + blob
        fuzz.write_bytes(blob)
        try:
            read_embeddings(fuzz)
        except EmbeddingFileError:
            pass
        except Exception:
            crashes += 1
    fuzz_ok = crashes == 0
    details.append(f"fuzz-crashes={crashes}")

    ok = synth_ok and split_ok and cnn_ok and head_ok and spce_ok and spck_ok and fuzz_ok
    _report("determinism", ok, ", ".join(details))


# ---------------------------------------------------------------------------
# Metric edge semantics: a single-class slice yields NA mean AUC while
# accuracy stays defined.
# ---------------------------------------------------------------------------

def test_metric_edge_semantics():
    scores = np.array([[0.7, 0.1, 0.1, 0.05, 0.05]] * 4)
    refs = [0, 0, 0, 0]
    report = build_report(5, refs, scores)
    import json

    doc = json.loads(report.to_json())
    ok = (
        report.mean_ovr_auc is None
        and doc["mean_ovr_auc"] is None
        and report.accuracy == 1.0
    )
    _report(
        "metric-edge-semantics",
        ok,
        f"mean AUC NA (json null), accuracy {report.accuracy}",
    )
