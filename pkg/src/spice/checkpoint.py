"""SPCK model checkpoints: one container format for CNN models and embedding
heads.

Layout: magic "SPCK", u32 version (=1), u32 task (number of classes), u32
config length + config JSON (UTF-8, sorted keys), then named tensors sorted
by name: u16 name length, UTF-8 name, u32 rank, u32 dims, 32-bit IEEE-754 LE
values. Loaders reject unknown versions.

Forest trees keep the pinned node byte layout (feature i32, threshold f32,
left/right i32, class counts u32 x K); the raw node bytes ride inside an
f32-shaped tensor without any arithmetic, so the bit patterns survive
round-trips.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from . import cnn as cnn_mod
from . import frontend as fe
from . import heads as heads_mod

MAGIC = b"SPCK"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | Path, task: int, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Atomic write: a crash mid-save never leaves a partial checkpoint."""
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<III", VERSION, task, len(cfg)), cfg]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[int, dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an SPCK checkpoint")
    version, task, cfg_len = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    if pos + cfg_len > len(raw):
        raise CheckpointError(f"{path}: truncated config")
    config = json.loads(raw[pos : pos + cfg_len].decode("utf-8"))
    pos += cfg_len

    tensors: dict[str, np.ndarray] = {}
    while pos < len(raw):
        if pos + 2 > len(raw):
            raise CheckpointError(f"{path}: truncated tensor header")
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if rank > 8:
            raise CheckpointError(f"{path}: implausible rank {rank} for {name!r}")
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        nbytes = 4 * count
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += nbytes
    return task, config, tensors


# --- CNN models ----------------------------------------------------------------

def save_cnn(model: cnn_mod.CnnModel, path: str | Path) -> None:
    fp = model.frontend
    config = {
        "model_kind": "cnn",
        "blocks": [list(b) for b in model.config.blocks],
        "sample_rate": model.sample_rate,
        "frontend": {
            "filter_len": fp.filter_len,
            "hop": fp.hop,
            "pcen_smooth": fp.pcen_smooth,
            "pcen_eps": fp.pcen_eps,
        },
    }
    tensors = dict(model.weights)
    for name in fe.LEARNABLE_FIELDS:
        tensors[f"frontend/{name}"] = getattr(fp, name)
    save_checkpoint(path, model.config.n_classes, config, tensors)


def load_cnn(path: str | Path) -> cnn_mod.CnnModel:
    task, config, tensors = load_checkpoint(path)
    if config.get("model_kind") != "cnn":
        raise CheckpointError(f"{path}: not a CNN checkpoint")
    fcfg = config["frontend"]
    fields = {
        name: tensors.pop(f"frontend/{name}").astype(np.float64)
        for name in fe.LEARNABLE_FIELDS
    }
    frontend = fe.GaborFrontendParams(
        **fields,
        pcen_smooth=fcfg["pcen_smooth"],
        pcen_eps=fcfg["pcen_eps"],
        filter_len=fcfg["filter_len"],
        hop=fcfg["hop"],
    )
    cfg = cnn_mod.CnnConfig(task, [tuple(b) for b in config["blocks"]])
    weights = {name: np.array(arr) for name, arr in tensors.items()}
    return cnn_mod.CnnModel(cfg, weights, frontend, config["sample_rate"])


# --- heads -----------------------------------------------------------------------

def _tree_dtype(k: int) -> np.dtype:
    return np.dtype(
        [
            ("feature", "<i4"),
            ("threshold", "<f4"),
            ("left", "<i4"),
            ("right", "<i4"),
            ("counts", "<u4", (k,)),
        ]
    )


def _pack_tree(tree: heads_mod.Tree, k: int) -> np.ndarray:
    n = len(tree.feature)
    rec = np.empty(n, dtype=_tree_dtype(k))
    rec["feature"] = tree.feature
    rec["threshold"] = tree.threshold
    rec["left"] = tree.left
    rec["right"] = tree.right
    rec["counts"] = tree.counts
    # raw node bytes carried in an f32-shaped tensor; no arithmetic touches
    # them, so this is bit-exact
    return np.frombuffer(rec.tobytes(), dtype="<f4")


def _unpack_tree(flat: np.ndarray, k: int) -> heads_mod.Tree:
    rec = np.frombuffer(flat.tobytes(), dtype=_tree_dtype(k))
    return heads_mod.Tree(
        feature=rec["feature"].copy(),
        threshold=rec["threshold"].copy(),
        left=rec["left"].copy(),
        right=rec["right"].copy(),
        counts=rec["counts"].copy(),
    )


def save_head(model: heads_mod.HeadModel, path: str | Path) -> None:
    k = model.n_classes
    if isinstance(model, heads_mod.LogRegHead):
        config = {"model_kind": "head", "head_kind": "logreg"}
        tensors = {"weights": model.weights, "biases": model.biases}
    elif isinstance(model, heads_mod.LdaHead):
        config = {
            "model_kind": "head",
            "head_kind": "lda",
            "shrinkage": model.shrinkage,
        }
        tensors = {
            "classes": model.classes.astype(np.float32),
            "coef": model.coef,
            "intercepts": model.intercepts,
            "means": model.means,
            "priors": model.priors,
            "cov_chol": model.cov_chol,
        }
    elif isinstance(model, heads_mod.ForestHead):
        config = {
            "model_kind": "head",
            "head_kind": "forest",
            "dim": model.dim,
            "n_trees": len(model.trees),
        }
        tensors = {
            f"tree_{i:05d}": _pack_tree(t, k) for i, t in enumerate(model.trees)
        }
    else:
        raise TypeError(f"unknown head model {type(model).__name__}")
    save_checkpoint(path, k, config, tensors)


def load_head(path: str | Path) -> heads_mod.HeadModel:
    task, config, tensors = load_checkpoint(path)
    if config.get("model_kind") != "head":
        raise CheckpointError(f"{path}: not a head checkpoint")
    kind = config.get("head_kind")
    if kind == "logreg":
        return heads_mod.LogRegHead(
            n_classes=task,
            weights=tensors["weights"].astype(np.float64),
            biases=tensors["biases"].astype(np.float64),
        )
    if kind == "lda":
        return heads_mod.LdaHead(
            n_classes=task,
            classes=tensors["classes"].astype(int),
            coef=tensors["coef"].astype(np.float64),
            intercepts=tensors["intercepts"].astype(np.float64),
            means=tensors["means"].astype(np.float64),
            priors=tensors["priors"].astype(np.float64),
            cov_chol=tensors["cov_chol"].astype(np.float64),
            shrinkage=config["shrinkage"],
        )
    if kind == "forest":
        trees = [
            _unpack_tree(tensors[f"tree_{i:05d}"], task)
            for i in range(config["n_trees"])
        ]
        return heads_mod.ForestHead(
            n_classes=task, dim=config["dim"], trees=trees, in_bag=None
        )
    raise CheckpointError(f"{path}: unknown head kind {kind!r}")


def load_model(path: str | Path):
    """Load either checkpoint flavor, dispatching on model_kind."""
    _, config, _ = load_checkpoint(path)
    if config.get("model_kind") == "cnn":
        return load_cnn(path)
    return load_head(path)
