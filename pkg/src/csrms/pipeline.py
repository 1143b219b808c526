"""Stage orchestration: synth -> cluster -> graph -> train -> eval, plus exports.

Configuration is a flat JSON object; every key can be overridden from the
command line. A (config, seed) pair fully determines every artifact byte
except the ``created`` timestamp in manifests. Metrics are appended as one
JSON object per line so partial runs stay parseable.
"""

from __future__ import annotations

import datetime as _dt
import json
from pathlib import Path

import numpy as np

from . import cags, crm, rgrl
from .data_io import FeatureSet, SynthSpec, generate_synthetic, load_featureset, save_featureset
from .errors import ContractError


class ConfigError(ValueError):
    def __init__(self, field: str, message: str = ""):
        super().__init__(f"invalid config field {field!r}" + (f": {message}" if message else ""))
        self.field = field


class MissingArtifact(FileNotFoundError):
    def __init__(self, path):
        super().__init__(str(path))
        self.path = str(path)


DEFAULTS: dict = {
    # artifact paths
    "features": "features.fsb",
    "graph": "graph.json",
    "checkpoint": "checkpoint",
    "metrics": "metrics.jsonl",
    "representations": "representations.csv",
    # synthetic data recipe
    "classes": 10,
    "modes_per_class": 2,
    "dim": 16,
    "samples_per_mode": 100,
    "mode_spread": 0.25,
    "overlap": 0.3,
    # clustering (vigilance swept 0.5-0.95 in the robustness echo)
    "vigilance": 0.85,
    "cluster_lr": 0.1,
    "cluster_epochs": 5,
    "cluster_metric": "cosine",
    "sigma": 1.0,
    "rho1": 0.8,  # difficulty threshold, paper range 0.75-0.85 for many-class data
    "rho2": 0.55,  # dominance threshold, paper range 0.5-0.55
    # sampling
    "n_pos": 5,
    "m_neg": 5,
    "metric": "euclidean",
    # smoothing model (the op-level softmax default stays on; runs default to
    # the documented off switch so representations keep the feature scale)
    "knn_k": 5,
    "hidden": 64,
    "use_output_softmax": False,
    "use_smoothing": True,
    "use_alignment": True,
    "alpha_u": 0.3,
    "beta_u": 0.7,
    "alpha_a": 0.3,
    "beta_a": 0.7,
    # losses
    "theta": 1.0,
    "mu": 1.0,
    "gamma_nega": 1.0,
    "gamma_inter": 0.1,
    "dispersion_sign": "repulsive",
    # optimization (paper: lr in 5e-3..1e-1, decay 0.1 every 20 epochs, batch 32)
    "batch_size": 32,
    "epochs": 10,
    "lr": 0.01,
    "lr_decay": 0.1,
    "lr_decay_interval": 20,
    # curriculum
    "use_curriculum": True,
    "alpha_i": 0.95,
    "alpha_f": 0.95,
    "decay_step": 0.05,
    "alpha_floor": 0.2,
    "lambda_e": 1.0,
    "lambda_m": 1.0,
    "lambda_h": 1.0,
    # run control
    "seed": None,  # mandatory
    "eval_fraction": 0.2,
    "workers": 1,
}

_NONE_TYPES = {"seed": int}


def coerce_value(key: str, raw: str):
    """Coerce a CLI override string to the key's configured type."""
    if key not in DEFAULTS:
        raise ConfigError(key, "unknown field")
    default = DEFAULTS[key]
    target = _NONE_TYPES.get(key, type(default)) if default is None else type(default)
    if target is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(key, f"expected a boolean, got {raw!r}")
    try:
        return target(raw)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {target.__name__}, got {raw!r}")


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(p)
        loaded = json.loads(p.read_text())
        for key, val in loaded.items():
            if key not in DEFAULTS:
                raise ConfigError(key, "unknown field")
            cfg[key] = val
    for key, val in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown field")
        cfg[key] = val
    return validate_config(cfg)


def validate_config(cfg: dict) -> dict:
    def fail(field, msg):
        raise ConfigError(field, msg)

    if cfg["seed"] is None:
        fail("seed", "a seed is mandatory")
    if not (0.0 < cfg["vigilance"] < 1.0):
        fail("vigilance", "must lie in (0, 1)")
    if not (0.5 < cfg["rho1"] <= 1.0):
        fail("rho1", "must lie in (0.5, 1]")
    if not (0.0 < cfg["rho2"] <= 1.0):
        fail("rho2", "must lie in (0, 1]")
    for key in ("n_pos", "m_neg", "knn_k", "hidden", "batch_size", "samples_per_mode", "classes", "modes_per_class", "dim"):
        if int(cfg[key]) < 1:
            fail(key, "must be >= 1")
    if cfg["epochs"] < 0:
        fail("epochs", "must be >= 0")
    if cfg["lr"] <= 0.0:
        fail("lr", "must be positive")
    if not (0.0 < cfg["eval_fraction"] < 1.0):
        fail("eval_fraction", "must lie in (0, 1)")
    if cfg["metric"] not in (cags.EUCLIDEAN, cags.COSINE):
        fail("metric", "must be 'euclidean' or 'cosine'")
    if cfg["cluster_metric"] not in (crm.COSINE, crm.EUCLIDEAN_GAUSSIAN):
        fail("cluster_metric", "must be 'cosine' or 'euclidean-gaussian'")
    if cfg["dispersion_sign"] not in (rgrl.PAPER_LITERAL, rgrl.REPULSIVE):
        fail("dispersion_sign", "must be 'paper-literal' or 'repulsive'")
    if cfg["theta"] <= 0 or cfg["mu"] <= 0:
        fail("theta" if cfg["theta"] <= 0 else "mu", "must be positive")
    if not (0.0 <= cfg["overlap"] < 1.0):
        fail("overlap", "must lie in [0, 1)")
    if cfg["workers"] < 1:
        fail("workers", "must be >= 1")
    return cfg


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def split_indices(labels: np.ndarray, eval_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic stratified split; every class keeps at least one train sample."""
    rng = np.random.Generator(np.random.PCG64(seed))
    train, evaluation = [], []
    for cls in range(int(labels.max()) + 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(eval_fraction * len(idx)))
        k = min(k, len(idx) - 1)
        evaluation.extend(idx[:k].tolist())
        train.extend(idx[k:].tolist())
    return np.sort(np.asarray(train, dtype=np.intp)), np.sort(np.asarray(evaluation, dtype=np.intp))


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(p)
    return p


def _load_features(cfg: dict) -> FeatureSet:
    return load_featureset(_require(cfg["features"]))


def cmd_synth(cfg: dict) -> dict:
    spec = SynthSpec(
        classes=cfg["classes"],
        modes_per_class=cfg["modes_per_class"],
        d=cfg["dim"],
        samples_per_mode=cfg["samples_per_mode"],
        mode_spread=cfg["mode_spread"],
        overlap=cfg["overlap"],
        seed=cfg["seed"],
    )
    fs = generate_synthetic(spec)
    manifest = {
        "source": "synthetic",
        "backbone": "none",
        "split": "all",
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    save_featureset(fs, cfg["features"], manifest=manifest)
    return {"stage": "synth", "path": cfg["features"], "n": fs.n, "d": fs.d, "c": fs.c}


def cmd_cluster(cfg: dict) -> dict:
    fs = _load_features(cfg)
    train_idx, _ = split_indices(fs.labels, cfg["eval_fraction"], cfg["seed"])
    fs_train = fs.subset(train_idx)
    model = crm.art_fit(
        fs_train,
        vigilance=cfg["vigilance"],
        learning_rate=cfg["cluster_lr"],
        max_epochs=cfg["cluster_epochs"],
        seed=cfg["seed"],
        metric=cfg["cluster_metric"],
        sigma=cfg["sigma"],
    )
    crm.save_graph(cfg["graph"], model)
    return {"stage": "cluster", "path": cfg["graph"], "clusters": len(model.clusters)}


def cmd_graph(cfg: dict) -> dict:
    fs = _load_features(cfg)
    train_idx, _ = split_indices(fs.labels, cfg["eval_fraction"], cfg["seed"])
    fs_train = fs.subset(train_idx)
    model, _ = crm.load_graph(_require(cfg["graph"]))
    graph = crm.build_relation_graph(model, fs_train.labels, cfg["rho2"])
    crm.save_graph(cfg["graph"], model, graph)
    dominated = sum(1 for d in graph.dominance.values() if d is not None)
    return {
        "stage": "graph",
        "path": cfg["graph"],
        "clusters": len(model.clusters),
        "dominated": dominated,
    }


def _load_graph_stage(cfg: dict, fs_train: FeatureSet) -> crm.RelationGraph:
    path = _require(cfg["graph"])
    _, graph = crm.load_graph(path, fs_train.labels)
    if graph is None:
        raise MissingArtifact(f"{path} lacks relation data; run the graph stage")
    return graph


def _anchor_blocks(fs_train: FeatureSet, positives: list[list[int]]) -> list[np.ndarray]:
    return [
        np.concatenate([fs_train.features[i][None, :], fs_train.features[pos]], axis=0)
        for i, pos in enumerate(positives)
    ]


def batched_anchor_smoothing(
    model: rgrl.SmoothingModel, blocks: list[np.ndarray], chunk: int = 256
) -> np.ndarray:
    """Row-0 smoothing output per block, via chunked block-diagonal forwards.

    Matches per-block :func:`rgrl.graphical_smoothing` up to matmul rounding.
    """
    out_rows = []
    for start in range(0, len(blocks), chunk):
        part = blocks[start : start + chunk]
        sizes = [b.shape[0] for b in part]
        total = sum(sizes)
        X = np.concatenate(part, axis=0)
        A = np.zeros((total, total))
        at = 0
        offsets = []
        for b in part:
            rows = b.shape[0]
            A[at : at + rows, at : at + rows] = rgrl.knn_adjacency(b, model.knn_k)
            offsets.append(at)
            at += rows
        hidden = np.maximum(A @ X @ model.w_in, 0.0)
        full = A @ hidden @ model.w_out
        if model.use_output_softmax:
            shifted = full - full.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            full = e / e.sum(axis=1, keepdims=True)
        out_rows.append(full[offsets])
    return np.concatenate(out_rows, axis=0)


def training_representations(
    model: rgrl.SmoothingModel,
    prototypes: rgrl.PrototypeBank,
    fs_train: FeatureSet,
    positives: list[list[int]],
    flags: rgrl.TrainFlags,
) -> np.ndarray:
    """F_a rows for every training anchor (training-style, label-aligned)."""
    if flags.use_smoothing:
        fg = batched_anchor_smoothing(model, _anchor_blocks(fs_train, positives))
    else:
        fg = fs_train.features.copy()
    if not flags.use_alignment:
        return fg
    fu = prototypes.alpha_u * fg + prototypes.beta_u * prototypes.cluster_prototypes[fs_train.labels]
    return prototypes.alpha_a * fu + prototypes.beta_a * prototypes.class_prototypes[fs_train.labels]


def representation_stats(X: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(mean same-class pairwise distance, mean class-centroid pairwise distance)."""
    intra_sum, intra_count = 0.0, 0
    centroids = []
    for cls in np.unique(labels):
        rows = X[labels == cls]
        centroids.append(rows.mean(axis=0))
        if len(rows) < 2:
            continue
        sq = np.sum(rows * rows, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * rows @ rows.T, 0.0)
        iu = np.triu_indices(len(rows), k=1)
        intra_sum += float(np.sum(np.sqrt(d2[iu])))
        intra_count += len(iu[0])
    cent = np.asarray(centroids)
    iu = np.triu_indices(len(cent), k=1)
    inter = float(np.mean(np.linalg.norm(cent[iu[0]] - cent[iu[1]], axis=1))) if len(cent) > 1 else 0.0
    intra = intra_sum / intra_count if intra_count else 0.0
    return intra, inter


def evaluate(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Top-1 and top-5 accuracy (k clamped to the class count)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) != len(labels):
        raise ContractError("scores and labels must have equal length")
    k = min(5, scores.shape[1])
    top1_hits = 0
    topk_hits = 0
    for row, label in zip(scores, labels):
        ranked = np.lexsort((np.arange(len(row)), -row))  # score desc, index asc
        top1_hits += int(ranked[0] == label)
        topk_hits += int(label in ranked[:k])
    return top1_hits / len(labels), topk_hits / len(labels)


def cmd_train(cfg: dict) -> dict:
    fs = _load_features(cfg)
    train_idx, eval_idx = split_indices(fs.labels, cfg["eval_fraction"], cfg["seed"])
    fs_train, fs_eval = fs.subset(train_idx), fs.subset(eval_idx)
    graph = _load_graph_stage(cfg, fs_train)

    rng = np.random.Generator(np.random.PCG64(cfg["seed"]))
    model = rgrl.init_model(
        fs.d, cfg["hidden"], fs.c, cfg["knn_k"], cfg["use_output_softmax"], rng
    )
    prototypes = rgrl.compute_prototypes(
        graph, fs_train, cfg["alpha_u"], cfg["beta_u"], cfg["alpha_a"], cfg["beta_a"]
    )
    loss_cfg = rgrl.LossConfig(
        theta=cfg["theta"],
        mu=cfg["mu"],
        gamma_nega=cfg["gamma_nega"],
        gamma_inter=cfg["gamma_inter"],
        dispersion_sign=cfg["dispersion_sign"],
    ).validate()
    flags = rgrl.TrainFlags(cfg["use_smoothing"], cfg["use_alignment"])
    state = cags.CurriculumState(
        alpha_i=cfg["alpha_i"],
        alpha_f=cfg["alpha_f"],
        lambda_e=cfg["lambda_e"],
        lambda_m=cfg["lambda_m"],
        lambda_h=cfg["lambda_h"],
        decay_step=cfg["decay_step"],
        alpha_floor=cfg["alpha_floor"],
    )

    # Positives, negatives and difficulty depend only on the static graph, so
    # they are sampled once through the samplers and reused each epoch.
    need_negatives = cfg["gamma_nega"] > 0.0
    positives, negatives, difficulties = [], [], []
    for i in range(fs_train.n):
        positives.append(
            cags.sample_positives(graph, fs_train, i, cfg["n_pos"], cfg["metric"])
            if flags.use_smoothing
            else []
        )
        negatives.append(
            cags.sample_negatives(graph, fs_train, i, cfg["m_neg"], cfg["metric"])
            if need_negatives
            else []
        )
        difficulties.append(cags.difficulty_of(graph, i, cfg["rho1"]))

    metrics_path = Path(cfg["metrics"])
    metrics_path.write_text("")
    lr = cfg["lr"]
    last_record: dict = {}
    for epoch in range(cfg["epochs"]):
        if epoch > 0 and cfg["lr_decay_interval"] > 0 and epoch % cfg["lr_decay_interval"] == 0:
            lr *= cfg["lr_decay"]
        order = rng.permutation(fs_train.n)
        sums = {"ce": 0.0, "nega": 0.0, "inter": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, fs_train.n, cfg["batch_size"]):
            anchors = order[start : start + cfg["batch_size"]]
            diffs = [difficulties[i] for i in anchors]
            if cfg["use_curriculum"]:
                weights = np.asarray([cags.curriculum_weight(state, d) for d in diffs])
            else:
                weights = np.ones(len(anchors))
            batch = cags.Batch(
                anchors=np.asarray(anchors, dtype=np.int64),
                positives=[positives[i] for i in anchors],
                negatives=[negatives[i] for i in anchors],
                difficulties=diffs,
                weights=weights,
            )
            breakdown = rgrl.train_step(batch, model, prototypes, loss_cfg, fs_train, lr, flags)
            for key in sums:
                sums[key] += breakdown[key]
            n_batches += 1
        means = {key: sums[key] / n_batches for key in sums}
        if cfg["use_curriculum"]:
            cags.update_curriculum(state, means["total"])

        preds, scores = rgrl.infer(
            fs_eval, graph, fs_train, model, prototypes, flags, workers=cfg["workers"]
        )
        top1, top5 = evaluate(scores, fs_eval.labels)
        reps = training_representations(model, prototypes, fs_train, positives, flags)
        intra, inter = representation_stats(reps, fs_train.labels)
        counts = {
            "easy": sum(1 for d in difficulties if d is cags.Difficulty.EASY),
            "medium": sum(1 for d in difficulties if d is cags.Difficulty.MEDIUM),
            "hard": sum(1 for d in difficulties if d is cags.Difficulty.HARD),
        }
        record = {
            "epoch": epoch,
            "losses": means,
            **cags.curriculum_snapshot(state),
            "difficulty_counts": counts,
            "top1": top1,
            "top5": top5,
            "intra_class_distance": intra,
            "inter_class_centroid_distance": inter,
        }
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        last_record = record

    rgrl.save_checkpoint(cfg["checkpoint"], model, prototypes, _public_config(cfg))
    return {"stage": "train", "checkpoint": cfg["checkpoint"], **{k: last_record.get(k) for k in ("top1", "top5")}}


def _public_config(cfg: dict) -> dict:
    return {k: cfg[k] for k in sorted(cfg)}


def cmd_eval(cfg: dict) -> dict:
    fs = _load_features(cfg)
    train_idx, eval_idx = split_indices(fs.labels, cfg["eval_fraction"], cfg["seed"])
    fs_train, fs_eval = fs.subset(train_idx), fs.subset(eval_idx)
    graph = _load_graph_stage(cfg, fs_train)
    _require(Path(cfg["checkpoint"]).with_suffix(".json"))
    model, prototypes, _ = rgrl.load_checkpoint(cfg["checkpoint"])
    flags = rgrl.TrainFlags(cfg["use_smoothing"], cfg["use_alignment"])
    preds, scores = rgrl.infer(
        fs_eval, graph, fs_train, model, prototypes, flags, workers=cfg["workers"]
    )
    top1, top5 = evaluate(scores, fs_eval.labels)
    return {"stage": "eval", "top1": top1, "top5": top5, "n_eval": fs_eval.n}


def cmd_export_repr(cfg: dict, out: str | None = None) -> dict:
    fs = _load_features(cfg)
    train_idx, _ = split_indices(fs.labels, cfg["eval_fraction"], cfg["seed"])
    fs_train = fs.subset(train_idx)
    graph = _load_graph_stage(cfg, fs_train)
    _require(Path(cfg["checkpoint"]).with_suffix(".json"))
    model, prototypes, _ = rgrl.load_checkpoint(cfg["checkpoint"])
    flags = rgrl.TrainFlags(cfg["use_smoothing"], cfg["use_alignment"])
    positives = [
        cags.sample_positives(graph, fs_train, i, cfg["n_pos"], cfg["metric"])
        if flags.use_smoothing
        else []
        for i in range(fs_train.n)
    ]
    reps = training_representations(model, prototypes, fs_train, positives, flags)

    path = Path(out if out is not None else cfg["representations"])
    header = "id,label," + ",".join(f"f{j}" for j in range(reps.shape[1]))
    lines = [header]
    for row_idx in range(fs_train.n):
        values = ",".join(repr(float(v)) for v in reps[row_idx])
        lines.append(f"{int(train_idx[row_idx])},{int(fs_train.labels[row_idx])},{values}")
    path.write_text("\n".join(lines) + "\n")
    return {"stage": "export-repr", "path": str(path), "rows": fs_train.n}
