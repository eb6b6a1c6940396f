"""Three-stage training: graph convolutions first, then two hypergraph
stages whose k-NN graphs come from the previous stage's embedding tap.

Stage 1 trains on the normalized spatial-graph operator. Its embeddings
build a k-NN graph that combines with the spatial graph into a hypergraph
for stage 2, and stage 2's embeddings do the same for stage 3. Stages are
trained strictly sequentially; earlier parameters are frozen. All
randomness flows from one master seed through sha256-derived per-purpose
streams, so identical inputs reproduce identical outputs bitwise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .errors import EmptySupervisionError, ShapeMismatchError
from .graphs import (PartitionPlan, build_hypergraph, build_knn_graph,
                     build_spatial_graph, hypergraph_propagator,
                     normalized_graph_operator, plan_partition,
                     round_half_away)
from .layers import StageModel
from .optim import Adam, PlateauScheduler
from .superpixel import (SuperpixelMap, UNLABELED, builtin_feature_extract,
                         pool_features, weak_labels_to_nodes)

MASK_UNLABELED = 0
MASK_TRAIN = 1
MASK_VAL = 2


def derive_seed(master: int, purpose: str, index: int = 0) -> int:
    """Stable per-purpose stream seed: sha256("{master}:{purpose}:{index}")."""
    digest = hashlib.sha256(f"{master}:{purpose}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def split_weak_labels(labels: np.ndarray, val_fraction: float, seed: int) -> np.ndarray:
    """Assign labeled nodes to TRAIN or VAL, stratified per class.

    Classes with a single labeled node keep it in TRAIN. The total VAL count
    targets round(val_fraction * labeled), at least 1 when any class can
    spare a node. Deterministic for a given seed.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    labeled = np.nonzero(labels != UNLABELED)[0]
    if labeled.size < 2:
        raise EmptySupervisionError("need at least 2 labeled nodes to split")

    mask = np.full(labels.shape[0], MASK_UNLABELED, dtype=np.int8)
    mask[labeled] = MASK_TRAIN

    classes, counts = np.unique(labels[labeled], return_counts=True)
    eligible = classes[counts >= 2]
    caps = {int(c): int(n) - 1 for c, n in zip(classes, counts) if n >= 2}
    if not caps:
        return mask

    target = max(1, round_half_away(val_fraction * labeled.size))
    target = min(target, sum(caps.values()))
    quota = {c: min(caps[c], int(np.floor(val_fraction * (caps[c] + 1)))) for c in caps}
    remainder = [(-(val_fraction * (caps[c] + 1) % 1.0), c) for c in sorted(caps)]
    remainder.sort()
    while sum(quota.values()) < target:
        for _, c in remainder:
            if quota[c] < caps[c]:
                quota[c] += 1
                break
        else:
            break
    while sum(quota.values()) > target:
        for _, c in reversed(remainder):
            if quota[c] > 0:
                quota[c] -= 1
                break

    rng = np.random.default_rng(seed)
    for c in sorted(int(x) for x in eligible):
        idx = labeled[labels[labeled] == c]
        chosen = rng.permutation(idx)[:quota[c]]
        mask[chosen] = MASK_VAL
    return mask


@dataclass
class StageConfig:
    stage_id: int
    n_conv_layers: int
    hidden: int = 256
    dropout: float = 0.5
    max_epochs: int = 1000
    lr: float = 0.01
    weight_decay: float = 5e-4
    lr_factor: float = 0.5
    patience: int = 25
    min_lr: float = 1e-6
    improvement_threshold: float = 1e-4

    def __post_init__(self):
        if self.min_lr >= self.lr:
            raise ValueError("min_lr must be below lr")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class StageTrainState:
    """Everything needed to continue a stage mid-training."""

    epoch: int  # last completed epoch
    model_arrays: dict[str, np.ndarray]
    adam_state: dict
    sched_state: dict
    rng_state: dict
    best_val: float
    best_epoch: int
    best_snapshot: dict[str, np.ndarray]


@dataclass
class StageOutput:
    model: StageModel
    log_probs: list[np.ndarray]
    embeddings: list[np.ndarray]
    trace: list[dict]
    best_val: float
    best_epoch: int


def _masked(labels: np.ndarray, mask: np.ndarray, which: int) -> np.ndarray:
    return np.where(mask == which, labels, ag.IGNORE)


def train_stage(cfg: StageConfig, operators: list, features: list[np.ndarray],
                node_labels: list[np.ndarray], masks: list[np.ndarray],
                n_classes: int, seed: int, log: Callable | None = None,
                resume: StageTrainState | None = None,
                checkpoint_cb: Callable[[StageTrainState], None] | None = None,
                checkpoint_every: int = 0) -> StageOutput:
    """Full-batch training over the partition graphs of one stage.

    Partitions are visited in ascending index with one optimizer step each;
    the summed per-partition validation loss drives the plateau scheduler
    and the best-validation parameters are restored at the end.
    """
    n_parts = len(operators)
    if not (n_parts == len(features) == len(node_labels) == len(masks)):
        raise ShapeMismatchError("per-partition inputs have different lengths")
    train_labels = [_masked(node_labels[p], masks[p], MASK_TRAIN) for p in range(n_parts)]
    val_labels = [_masked(node_labels[p], masks[p], MASK_VAL) for p in range(n_parts)]
    for p in range(n_parts):
        if not np.any(train_labels[p] != ag.IGNORE):
            raise EmptySupervisionError(f"partition {p} has no TRAIN nodes")
    has_val = [bool(np.any(v != ag.IGNORE)) for v in val_labels]

    f_in = features[0].shape[1]
    model = StageModel.create(
        np.random.default_rng(derive_seed(seed, "init", cfg.stage_id)),
        f_in, cfg.hidden, n_classes, cfg.n_conv_layers, cfg.dropout)
    adam = Adam(model.trainable(), cfg.lr, cfg.weight_decay, model.decay_mask())
    sched = PlateauScheduler(cfg.lr, cfg.lr_factor, cfg.patience, cfg.min_lr,
                             cfg.improvement_threshold)
    rng_drop = np.random.default_rng(derive_seed(seed, "dropout", cfg.stage_id))

    best_snapshot = model.snapshot()
    best_val = np.inf
    best_epoch = -1
    start_epoch = 0
    if resume is not None:
        model.load_snapshot(resume.model_arrays)
        adam.load_state_dict(resume.adam_state)
        sched.load_state_dict(resume.sched_state)
        rng_drop.bit_generator.state = resume.rng_state
        best_snapshot = {k: v.copy() for k, v in resume.best_snapshot.items()}
        best_val = resume.best_val
        best_epoch = resume.best_epoch
        start_epoch = resume.epoch + 1

    def epoch_val_loss() -> float:
        total = 0.0
        for p in range(n_parts):
            if not has_val[p]:
                continue
            logp, _ = model.forward(operators[p], features[p], "eval", rng_drop)
            loss, _ = ag.nll_loss(logp, val_labels[p])
            total += float(loss.value)
        return total

    trace: list[dict] = []
    for epoch in range(start_epoch, cfg.max_epochs):
        train_sum, train_n = 0.0, 0
        adam.lr = sched.lr
        for p in range(n_parts):
            adam.zero_grad()
            logp, _ = model.forward(operators[p], features[p], "train", rng_drop)
            loss, n = ag.nll_loss(logp, train_labels[p])
            ag.backward(loss)
            adam.step()
            train_sum += float(loss.value) * n
            train_n += n
        train_nll = train_sum / train_n
        val_nll = epoch_val_loss() if any(has_val) else train_nll
        if val_nll < best_val:
            best_val = val_nll
            best_epoch = epoch
            best_snapshot = model.snapshot()
        lr_now, stop = sched.step(val_nll)
        trace.append({"epoch": epoch, "train_nll": train_nll,
                      "val_nll": val_nll, "lr": lr_now})
        if log is not None:
            log(f"stage {cfg.stage_id} epoch {epoch} "
                f"train_nll {train_nll:.6f} val_nll {val_nll:.6f} lr {lr_now:g}")
        if checkpoint_cb is not None and checkpoint_every > 0 \
                and (epoch + 1) % checkpoint_every == 0:
            checkpoint_cb(StageTrainState(
                epoch=epoch, model_arrays=model.snapshot(),
                adam_state=adam.state_dict(), sched_state=sched.state_dict(),
                rng_state=rng_drop.bit_generator.state,
                best_val=best_val, best_epoch=best_epoch,
                best_snapshot={k: v.copy() for k, v in best_snapshot.items()}))
        if stop:
            break

    model.load_snapshot(best_snapshot)
    log_probs, embeddings = [], []
    for p in range(n_parts):
        logp, emb = model.forward(operators[p], features[p], "eval", rng_drop)
        log_probs.append(logp.value)
        embeddings.append(emb.value)
    return StageOutput(model, log_probs, embeddings, trace, best_val, best_epoch)


# ---------------------------------------------------------------------------
# clicks and pseudo-labels

def sample_clicks(gts: list[np.ndarray], spmaps: list[SuperpixelMap],
                  fraction: float, seed: int) -> list[np.ndarray]:
    """Per image, click round(fraction * node_count) superpixels chosen
    uniformly without replacement; each click marks the ground-truth class at
    the superpixel's centroid pixel (nearest in-region pixel if the centroid
    falls outside). Returns per-pixel annotations with UNLABELED elsewhere."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    out = []
    for i, (gt, sp) in enumerate(zip(gts, spmaps)):
        if gt is None:
            raise EmptySupervisionError(f"image {i}: clicks need dense ground truth")
        rng = np.random.default_rng(derive_seed(seed, "clicks", i))
        n = min(sp.node_count, round_half_away(fraction * sp.node_count))
        ann = np.full(sp.labels.shape, UNLABELED, dtype=np.int64)
        if n == 0:
            out.append(ann)
            continue
        chosen = rng.choice(sp.node_count, size=n, replace=False)
        cents = sp.centroids()
        for node in chosen:
            cy, cx = cents[node]
            py = int(np.clip(np.rint(cy), 0, sp.height - 1))
            px = int(np.clip(np.rint(cx), 0, sp.width - 1))
            if sp.labels[py, px] != node:
                ys, xs = np.nonzero(sp.labels == node)
                k = np.argmin((ys - cy) ** 2 + (xs - cx) ** 2)
                py, px = int(ys[k]), int(xs[k])
            cls = int(gt[py, px])
            if cls != 255:
                ann[py, px] = cls
        out.append(ann)
    return out


def node_predictions(log_probs: np.ndarray, weak: np.ndarray) -> np.ndarray:
    """Argmax class per node (ties pick the lowest class index), overridden
    by the weak label where one exists."""
    if not np.allclose(np.log(np.exp(log_probs).sum(axis=1)), 0.0, atol=1e-6):
        raise ShapeMismatchError("log-probability rows are not normalized")
    pred = log_probs.argmax(axis=1).astype(np.int64)
    return np.where(weak != UNLABELED, weak, pred)


def generate_pseudo_labels(log_probs: list[np.ndarray], weak: list[np.ndarray],
                           origins: list[np.ndarray],
                           spmaps: list[SuperpixelMap],
                           n_images: int) -> list[np.ndarray]:
    """Project per-node predictions back to dense per-pixel class maps."""
    per_image_classes: list[np.ndarray | None] = [None] * n_images
    for logp, wk, orig in zip(log_probs, weak, origins):
        pred = node_predictions(logp, wk)
        for img in np.unique(orig[:, 0]):
            rows = orig[:, 0] == img
            sp_idx = orig[rows, 1]
            classes = np.empty(sp_idx.max() + 1, dtype=np.int64)
            classes[sp_idx] = pred[rows]
            per_image_classes[int(img)] = classes
    out = []
    for img in range(n_images):
        classes = per_image_classes[img]
        if classes is None or classes.size < spmaps[img].node_count:
            raise ShapeMismatchError(f"image {img}: missing node predictions")
        out.append(classes[spmaps[img].labels])
    return out


# ---------------------------------------------------------------------------
# the full pipeline

@dataclass
class PipelineConfig:
    n_superpixels: int = 100
    compactness: float = 10.0
    slic_iters: int = 10
    feature_cell: int = 2
    knn_k: int = 10
    max_nodes: int = 40000
    weak_mode: str = "scribbles"       # "scribbles" | "clicks"
    click_fraction: float = 0.125
    val_fraction: float | None = None  # default 0.05 scribbles / 0.01 clicks
    hidden: int = 256
    dropout: float = 0.5
    max_epochs: int = 1000
    lr: float = 0.01
    weight_decay: float = 5e-4
    lr_factor: float = 0.5
    patience: int = 25
    min_lr: float = 1e-6
    improvement_threshold: float = 1e-4
    stage_sizes: tuple[int, int, int] = (3, 2, 2)  # conv layers per stage
    stage_input: str = "raw"           # "raw" | "embedding"
    hypergraph_style: str = "star"

    def resolved_val_fraction(self) -> float:
        if self.val_fraction is not None:
            return self.val_fraction
        return 0.05 if self.weak_mode == "scribbles" else 0.01

    def stage_config(self, stage_id: int) -> StageConfig:
        return StageConfig(
            stage_id=stage_id, n_conv_layers=self.stage_sizes[stage_id - 1],
            hidden=self.hidden, dropout=self.dropout, max_epochs=self.max_epochs,
            lr=self.lr, weight_decay=self.weight_decay, lr_factor=self.lr_factor,
            patience=self.patience, min_lr=self.min_lr,
            improvement_threshold=self.improvement_threshold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_sizes"] = list(self.stage_sizes)
        return d

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        d = dict(d)
        d["stage_sizes"] = tuple(d.get("stage_sizes", (3, 2, 2)))
        return PipelineConfig(**d)

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class PipelineResult:
    pseudo_labels: list[np.ndarray]          # stage-3 dense maps per image
    stage_pseudo_labels: dict[str, list[np.ndarray]]
    stage_mious: dict[str, float | None]
    stage_outputs: list[StageOutput]
    plan: PartitionPlan
    node_weak: list[np.ndarray]              # per partition
    origins: list[np.ndarray]                # per partition
    spmaps: list[SuperpixelMap] = field(default_factory=list)


@dataclass
class PreparedData:
    """Deterministic pipeline inputs shared by training and inference."""

    spmaps: list[SuperpixelMap]
    features: list[np.ndarray]      # per partition, stacked node features
    node_weak: list[np.ndarray]     # per partition
    masks: list[np.ndarray]         # per partition
    spatial: list
    origins: list[np.ndarray]
    plan: PartitionPlan
    gts: list[np.ndarray | None]


def prepare_data(manifest, config: PipelineConfig, seed: int) -> PreparedData:
    """Segment, pool, project weak labels, partition, and build the spatial
    graphs; everything downstream is derived from this plus the models."""
    from .dataio import load_annotation, load_feature_file, load_image

    n_classes = manifest.n_classes
    images = [load_image(r.image) for r in manifest.records]
    spmaps = [ _segment(img, config) for img in images]
    featmaps = []
    for img, rec in zip(images, manifest.records):
        if rec.features is not None:
            featmaps.append(load_feature_file(rec.features))
        else:
            featmaps.append(builtin_feature_extract(img, config.feature_cell))
    node_feats = [pool_features(fm, sp) for fm, sp in zip(featmaps, spmaps)]
    gts = [load_annotation(r.annotation, "dense", n_classes)
           if r.annotation is not None else None for r in manifest.records]

    if config.weak_mode == "clicks":
        weak_maps = sample_clicks(gts, spmaps, config.click_fraction,
                                  derive_seed(seed, "weak"))
    elif config.weak_mode == "scribbles":
        weak_maps = []
        for rec, sp in zip(manifest.records, spmaps):
            if rec.weak is not None:
                weak_maps.append(load_annotation(rec.weak, "scribble", n_classes))
            else:
                weak_maps.append(np.full(sp.labels.shape, UNLABELED, dtype=np.int64))
    else:
        raise ValueError(f"unknown weak mode: {config.weak_mode}")
    node_weak_img = [weak_labels_to_nodes(w, sp) for w, sp in zip(weak_maps, spmaps)]

    plan = plan_partition(len(images), config.n_superpixels, config.max_nodes)
    features, node_weak, masks, spatial, origins = [], [], [], [], []
    for p, (start, stop) in enumerate(plan.image_ranges()):
        feats = np.vstack(node_feats[start:stop])
        weak = np.concatenate(node_weak_img[start:stop])
        graph = build_spatial_graph(spmaps[start:stop], feats,
                                    image_ids=list(range(start, stop)))
        mask = split_weak_labels(weak, config.resolved_val_fraction(),
                                 derive_seed(seed, "split", p))
        features.append(feats)
        node_weak.append(weak)
        masks.append(mask)
        spatial.append(graph)
        origins.append(graph.node_origins)
    return PreparedData(spmaps, features, node_weak, masks, spatial,
                        origins, plan, gts)


def _segment(img: np.ndarray, config: PipelineConfig) -> SuperpixelMap:
    from .superpixel import slic_segment
    return slic_segment(img, config.n_superpixels, config.compactness,
                        config.slic_iters)


def _stage_operator(stage_id: int, data: PreparedData, prev: StageOutput | None,
                    config: PipelineConfig) -> list:
    if stage_id == 1:
        return [normalized_graph_operator(g) for g in data.spatial]
    ops = []
    for p, graph in enumerate(data.spatial):
        knn = build_knn_graph(prev.embeddings[p], config.knn_k,
                              node_origins=data.origins[p])
        hg = build_hypergraph(graph, knn, style=config.hypergraph_style)
        ops.append(hypergraph_propagator(hg))
    return ops


def _stage_features(stage_id: int, data: PreparedData,
                    prev: StageOutput | None, config: PipelineConfig) -> list[np.ndarray]:
    if stage_id == 1 or config.stage_input == "raw":
        return data.features
    return prev.embeddings


def run_pipeline(manifest, config: PipelineConfig, seed: int,
                 log: Callable | None = None,
                 checkpoint_cb: Callable | None = None,
                 checkpoint_every: int = 0,
                 resume: dict | None = None) -> PipelineResult:
    """Execute segment -> pool -> partition -> three training stages ->
    pseudo-label projection, reporting per-stage train-set mIoU.

    ``resume`` holds {"stage": int, "completed": {stage_id: arrays},
    "stage_state": StageTrainState | None} as rebuilt by the CLI from a
    checkpoint; earlier stages are restored instead of retrained.
    """
    from .metrics import evaluate_miou

    n_classes = manifest.n_classes
    data = prepare_data(manifest, config, seed)

    stage_outputs: list[StageOutput] = []
    stage_pseudo: dict[str, list[np.ndarray]] = {}
    stage_mious: dict[str, float | None] = {}
    prev: StageOutput | None = None
    for stage_id in (1, 2, 3):
        cfg = config.stage_config(stage_id)
        operators = _stage_operator(stage_id, data, prev, config)
        feats = _stage_features(stage_id, data, prev, config)
        completed = (resume or {}).get("completed", {})
        if stage_id in completed:
            out = _restore_stage(cfg, operators, feats, completed[stage_id],
                                 n_classes, seed)
        else:
            stage_resume = None
            if resume is not None and resume.get("stage") == stage_id:
                stage_resume = resume.get("stage_state")
            cb = None
            if checkpoint_cb is not None:
                cb = lambda st, sid=stage_id: checkpoint_cb(sid, False, st, stage_outputs)
            out = train_stage(cfg, operators, feats, data.node_weak, data.masks,
                              n_classes, seed, log=log, resume=stage_resume,
                              checkpoint_cb=cb, checkpoint_every=checkpoint_every)
            if checkpoint_cb is not None:
                checkpoint_cb(stage_id, True, None, stage_outputs + [out])
        stage_outputs.append(out)
        prev = out

        key = f"L{stage_id}"
        pseudo = generate_pseudo_labels(out.log_probs, data.node_weak,
                                        data.origins, data.spmaps,
                                        len(manifest.records))
        stage_pseudo[key] = pseudo
        scored = [(p, g) for p, g in zip(pseudo, data.gts) if g is not None]
        if scored:
            report = evaluate_miou([p for p, _ in scored], [g for _, g in scored],
                                   n_classes)
            stage_mious[key] = report["miou"]
        else:
            stage_mious[key] = None
        if log is not None and stage_mious[key] is not None:
            log(f"stage {stage_id} train-set miou {stage_mious[key]:.4f}")

    return PipelineResult(stage_pseudo["L3"], stage_pseudo, stage_mious,
                          stage_outputs, data.plan, data.node_weak,
                          data.origins, data.spmaps)


def _restore_stage(cfg: StageConfig, operators: list, features: list[np.ndarray],
                   arrays: dict[str, np.ndarray], n_classes: int,
                   seed: int) -> StageOutput:
    """Rebuild a completed stage from stored parameters (no training)."""
    model = StageModel.create(
        np.random.default_rng(derive_seed(seed, "init", cfg.stage_id)),
        features[0].shape[1], cfg.hidden, n_classes, cfg.n_conv_layers, cfg.dropout)
    model.load_snapshot(arrays)
    rng = np.random.default_rng(0)  # eval mode consumes no randomness
    log_probs, embeddings = [], []
    for op, x in zip(operators, features):
        logp, emb = model.forward(op, x, "eval", rng)
        log_probs.append(logp.value)
        embeddings.append(emb.value)
    return StageOutput(model, log_probs, embeddings, [], np.nan, -1)
