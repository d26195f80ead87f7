"""Desk-scale branch-drop network for embedding training.

Pipeline: a per-cell two-layer encoder lifts each (h, w) cell of the input
grid to feature space (spatial layout untouched, so masks align with input
rows); each branch multiplies the feature map by its drop mask, runs one
shared per-cell residual layer, average-pools over all cells (zeros
included, no renormalization), and projects to the descriptor space. A
classifier head shared across branches provides the id logits. The training
objective is the metric loss over all branch descriptor batches plus the sum
of per-branch cross entropies; inference is the mask-free path
encoder -> resblock -> pool -> embed, nothing else.

All backward passes are explicit and accumulate into ParamTensor.grad;
training is plain Adam with linear warmup and staged decay, fully
deterministic given the config seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dropmask
from .data_synth import Sample, pk_batches, stack_images
from .dropmask import (BatchDropBlock, BatchDropout, DropBlock, DropStrategyKind,
                       ElementDropout, NoDrop, OverlapRowDrop, SpatialDropout,
                       UniformRowDrop)
from .elastic_loss import (DescriptorBatch, ElasticParams, batch_elastic_loss,
                           batch_hard_triplet_loss)
from .errors import ConfigError, ShapeError
from .numerics import (Array, ParamTensor, adam_step, init_linear, linear_backward,
                       linear_forward, relu_backward, relu_forward,
                       softmax_cross_entropy)

LOSS_MODES = ("elastic", "triplet")


@dataclass(frozen=True)
class ModelConfig:
    height: int = 8
    width: int = 4
    in_channels: int = 6
    feat_channels: int = 32
    embed_dim: int = 16
    branches: int = 4
    num_classes: int = 30
    eta: float = 3.0
    detach_weight: bool = False
    use_global_branch: bool = False
    use_resblock: bool = True
    loss: str = "elastic"
    drop_scheme: DropStrategyKind = UniformRowDrop(m=4)
    base_lr: float = 1e-3
    warmup_epochs: int = 5
    decay_epochs: tuple[int, ...] = (25, 35)
    decay_factor: float = 0.1
    epochs: int = 40
    batch_p: int = 8
    batch_k: int = 4
    seed: int = 0
    # use only the first keep_branches masks of the schedule (None = all)
    keep_branches: int | None = None

    def __post_init__(self):
        if min(self.height, self.width, self.in_channels, self.feat_channels,
               self.embed_dim, self.branches) < 1:
            raise ConfigError("ModelConfig: dimensions must be positive")
        if self.num_classes < 2:
            raise ConfigError("ModelConfig: need at least 2 classes")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"ModelConfig: loss must be one of {LOSS_MODES}")
        if isinstance(self.drop_scheme, UniformRowDrop):
            if self.drop_scheme.m != self.branches:
                raise ConfigError(
                    f"ModelConfig: branches={self.branches} disagrees with "
                    f"uniform scheme m={self.drop_scheme.m}")
            if self.height % self.branches != 0:
                raise ConfigError(
                    f"ModelConfig: branches={self.branches} must divide "
                    f"height={self.height}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("ModelConfig: epochs must be non-negative")
        if self.batch_p < 2 or self.batch_k < 2:
            raise ConfigError("ModelConfig: need batch_p >= 2 and batch_k >= 2")
        if self.keep_branches is not None and self.keep_branches < 1:
            raise ConfigError("ModelConfig: keep_branches must be >= 1")


@dataclass
class ModelParams:
    enc_w1: ParamTensor
    enc_b1: ParamTensor
    enc_w2: ParamTensor
    enc_b2: ParamTensor
    emb_w: ParamTensor
    emb_b: ParamTensor
    cls_w: ParamTensor
    cls_b: ParamTensor
    res_w: ParamTensor | None = None
    res_b: ParamTensor | None = None

    def named(self) -> dict[str, ParamTensor]:
        out = {
            "enc_w1": self.enc_w1, "enc_b1": self.enc_b1,
            "enc_w2": self.enc_w2, "enc_b2": self.enc_b2,
        }
        if self.res_w is not None:
            out["res_w"] = self.res_w
            out["res_b"] = self.res_b
        out.update({"emb_w": self.emb_w, "emb_b": self.emb_b,
                    "cls_w": self.cls_w, "cls_b": self.cls_b})
        return out

    def zero_grads(self) -> None:
        for p in self.named().values():
            p.zero_grad()


@dataclass
class ForwardOutput:
    branch_descriptors: list[Array]
    branch_logits: list[Array]
    global_descriptor: Array | None
    elastic_loss: float
    ce_loss: float
    total_loss: float


def init_params(config: ModelConfig, rng: np.random.Generator | None = None
                ) -> ModelParams:
    rng = rng or np.random.default_rng(config.seed)
    enc_w1, enc_b1 = init_linear(rng, config.in_channels, config.feat_channels)
    enc_w2, enc_b2 = init_linear(rng, config.feat_channels, config.feat_channels)
    res_w = res_b = None
    if config.use_resblock:
        res_w, res_b = init_linear(rng, config.feat_channels, config.feat_channels)
    emb_w, emb_b = init_linear(rng, config.feat_channels, config.embed_dim)
    cls_w, cls_b = init_linear(rng, config.embed_dim, config.num_classes)
    return ModelParams(enc_w1=enc_w1, enc_b1=enc_b1, enc_w2=enc_w2, enc_b2=enc_b2,
                       emb_w=emb_w, emb_b=emb_b, cls_w=cls_w, cls_b=cls_b,
                       res_w=res_w, res_b=res_b)


def resolved_branch_masks(config: ModelConfig) -> list[Array] | None:
    """Fixed (H, W) masks for deterministic schemes, None for randomized ones."""
    scheme = config.drop_scheme
    if isinstance(scheme, dropmask.RANDOM_KINDS):
        return None
    masks = dropmask.branch_masks(scheme, config.height, config.width)
    if config.keep_branches is not None:
        if config.keep_branches > len(masks):
            raise ConfigError(
                f"keep_branches={config.keep_branches} exceeds the schedule's "
                f"{len(masks)} branches")
        masks = masks[:config.keep_branches]
    return masks


def _check_images(images: Array, config: ModelConfig) -> Array:
    images = np.asarray(images, dtype=np.float64)
    expected = (config.height, config.width, config.in_channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(
            f"images {images.shape} do not match (N, {expected[0]}, "
            f"{expected[1]}, {expected[2]})")
    return images


def encode(images, params: ModelParams, config: ModelConfig) -> Array:
    """Per-cell two-layer transform, identical at every (h, w) location."""
    images = _check_images(images, config)
    n = images.shape[0]
    cells = images.reshape(-1, config.in_channels)
    a1 = linear_forward(cells, params.enc_w1, params.enc_b1)
    feat = linear_forward(relu_forward(a1), params.enc_w2, params.enc_b2)
    return feat.reshape(n, config.height, config.width, config.feat_channels)


def _resblock_forward(cells: Array, params: ModelParams):
    """out = cells + relu(cells w + b); returns (out, pre-activation cache)."""
    pre = linear_forward(cells, params.res_w, params.res_b)
    return cells + relu_forward(pre), pre


def _branch_forward(fmap: Array, mask: Array, params: ModelParams,
                    config: ModelConfig):
    """Mask, shared resblock, average pool, embed and classify one branch."""
    n = fmap.shape[0]
    cell_count = config.height * config.width
    masked = fmap * mask if mask.ndim == 4 else dropmask.apply_mask(fmap, mask)
    z = masked.reshape(-1, config.feat_channels)
    if config.use_resblock:
        y, res_pre = _resblock_forward(z, params)
    else:
        y, res_pre = z, None
    pooled = y.reshape(n, cell_count, config.feat_channels).mean(axis=1)
    desc = linear_forward(pooled, params.emb_w, params.emb_b)
    logits = linear_forward(desc, params.cls_w, params.cls_b)
    cache = {"mask": mask, "z": z, "res_pre": res_pre, "pooled": pooled,
             "desc": desc}
    return desc, logits, cache


def _branch_backward(d_desc: Array, d_logits: Array, cache: dict,
                     params: ModelParams, config: ModelConfig,
                     d_fmap: Array) -> None:
    """Accumulate parameter grads for one branch; adds the map grad to d_fmap."""
    n = d_desc.shape[0]
    cell_count = config.height * config.width
    if d_logits is not None:
        gd, gw, gb = linear_backward(cache["desc"], params.cls_w, d_logits)
        params.cls_w.grad += gw
        params.cls_b.grad += gb
        d_desc = d_desc + gd
    d_pooled, gw, gb = linear_backward(cache["pooled"], params.emb_w, d_desc)
    params.emb_w.grad += gw
    params.emb_b.grad += gb
    d_y = np.repeat(d_pooled[:, None, :] / cell_count, cell_count, axis=1)
    d_y = d_y.reshape(-1, config.feat_channels)
    if config.use_resblock:
        d_res = relu_backward(cache["res_pre"], d_y)
        d_z, gw, gb = linear_backward(cache["z"], params.res_w, d_res)
        params.res_w.grad += gw
        params.res_b.grad += gb
        d_z = d_z + d_y
    else:
        d_z = d_y
    d_masked = d_z.reshape(n, config.height, config.width, config.feat_channels)
    mask = cache["mask"]
    d_fmap += d_masked * mask if mask.ndim == 4 else \
        dropmask.apply_mask(d_masked, mask)


def forward_train(images, ids, params: ModelParams, config: ModelConfig,
                  rng: np.random.Generator | None = None
                  ) -> tuple[float, ForwardOutput]:
    """One fused forward/backward pass; grads accumulate into params.

    Branch masks come from the configured scheme (randomized schemes draw a
    fresh batch of masks from ``rng``). The total is the metric loss over
    all branch descriptor batches plus the per-branch mean cross entropies
    summed over branches.
    """
    images = _check_images(images, config)
    ids = np.asarray(ids, dtype=np.int64)
    n = images.shape[0]
    if ids.shape != (n,):
        raise ShapeError(f"ids {ids.shape} vs {n} images")

    masks = resolved_branch_masks(config)
    if masks is None:
        if rng is None:
            raise ConfigError("randomized drop scheme requires an rng")
        masks = [dropmask.baseline_mask(config.drop_scheme, config.height,
                                        config.width, config.feat_channels,
                                        rng, batch_size=n)]
    if config.use_global_branch:
        masks = masks + [np.ones((config.height, config.width))]

    cells = images.reshape(-1, config.in_channels)
    a1 = linear_forward(cells, params.enc_w1, params.enc_b1)
    h1 = relu_forward(a1)
    feat = linear_forward(h1, params.enc_w2, params.enc_b2)
    fmap = feat.reshape(n, config.height, config.width, config.feat_channels)

    descs, logits, caches = [], [], []
    for mask in masks:
        d, lg, cache = _branch_forward(fmap, mask, params, config)
        descs.append(d)
        logits.append(lg)
        caches.append(cache)

    branches = [DescriptorBatch(vectors=d, ids=ids) for d in descs]
    if config.loss == "elastic":
        metric_loss, metric_grads = batch_elastic_loss(
            branches, ElasticParams(eta=config.eta,
                                    detach_weight=config.detach_weight))
    else:
        metric_loss, metric_grads = batch_hard_triplet_loss(branches, eta=config.eta)

    ce_total = 0.0
    d_logits = []
    for lg in logits:
        ce, g = softmax_cross_entropy(lg, ids)
        ce_total += ce
        d_logits.append(g)
    total = metric_loss + ce_total

    d_fmap = np.zeros_like(fmap)
    for i, cache in enumerate(caches):
        _branch_backward(metric_grads[i], d_logits[i], cache, params, config,
                         d_fmap)
    d_feat = d_fmap.reshape(-1, config.feat_channels)
    d_h1, gw, gb = linear_backward(h1, params.enc_w2, d_feat)
    params.enc_w2.grad += gw
    params.enc_b2.grad += gb
    d_a1 = relu_backward(a1, d_h1)
    _, gw, gb = linear_backward(cells, params.enc_w1, d_a1)
    params.enc_w1.grad += gw
    params.enc_b1.grad += gb

    global_desc = descs[-1] if config.use_global_branch else None
    out = ForwardOutput(
        branch_descriptors=descs,
        branch_logits=logits,
        global_descriptor=global_desc,
        elastic_loss=metric_loss,
        ce_loss=ce_total,
        total_loss=total,
    )
    return total, out


def infer(images, params: ModelParams, config: ModelConfig) -> Array:
    """Mask-free descriptors: encoder -> resblock -> average pool -> embed."""
    images = _check_images(images, config)
    n = images.shape[0]
    fmap = encode(images, params, config)
    z = fmap.reshape(-1, config.feat_channels)
    if config.use_resblock:
        y, _ = _resblock_forward(z, params)
    else:
        y = z
    pooled = y.reshape(n, config.height * config.width,
                       config.feat_channels).mean(axis=1)
    return linear_forward(pooled, params.emb_w, params.emb_b)


def learning_rate(config: ModelConfig, epoch: int) -> float:
    """Linear warmup to base_lr, then multiply by decay_factor at each decay epoch."""
    if epoch < 1:
        raise ConfigError(f"learning_rate: epochs are 1-based, got {epoch}")
    if config.warmup_epochs > 0 and epoch <= config.warmup_epochs:
        lr = config.base_lr * epoch / config.warmup_epochs
    else:
        lr = config.base_lr
    for d in config.decay_epochs:
        if epoch >= d:
            lr *= config.decay_factor
    return lr


def train(samples: list[Sample], config: ModelConfig
          ) -> tuple[ModelParams, list[dict]]:
    """Adam training over PK-sampled batches; returns params and per-epoch log."""
    if not samples:
        raise ConfigError("train: empty dataset")
    images, ids, _ = stack_images(samples)
    if ids.max() >= config.num_classes:
        raise ConfigError(
            f"train: id {ids.max()} outside num_classes={config.num_classes}")
    params = init_params(config, np.random.default_rng([config.seed, 0]))
    mask_rng = np.random.default_rng([config.seed, 1])
    log: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        lr = learning_rate(config, epoch)
        batches = pk_batches(ids, config.batch_p, config.batch_k,
                             seed=[config.seed, 2, epoch])
        if not batches:
            raise ConfigError("train: PK sampler produced no batches")
        sums = np.zeros(3)
        for idx in batches:
            _, out = forward_train(images[idx], ids[idx], params, config,
                                   rng=mask_rng)
            for p in params.named().values():
                adam_step(p, lr)
            sums += (out.elastic_loss, out.ce_loss, out.total_loss)
        k = len(batches)
        log.append({"epoch": epoch, "lr": lr,
                    "elastic_loss": float(sums[0] / k),
                    "ce_loss": float(sums[1] / k),
                    "total_loss": float(sums[2] / k)})
    return params, log


# --- checkpoint (versioned json; textual floats round-trip exactly) --------

CHECKPOINT_VERSION = 1


def scheme_to_dict(scheme: DropStrategyKind) -> dict:
    if isinstance(scheme, UniformRowDrop):
        return {"kind": "uniform", "m": scheme.m}
    if isinstance(scheme, OverlapRowDrop):
        return {"kind": "overlap", "patch_h": scheme.patch_h,
                "overlap": scheme.overlap}
    if isinstance(scheme, NoDrop):
        return {"kind": "none"}
    if isinstance(scheme, ElementDropout):
        return {"kind": "element_dropout", "rate": scheme.rate}
    if isinstance(scheme, SpatialDropout):
        return {"kind": "spatial_dropout", "rate": scheme.rate}
    if isinstance(scheme, BatchDropout):
        return {"kind": "batch_dropout", "rate": scheme.rate}
    if isinstance(scheme, DropBlock):
        return {"kind": "dropblock", "block_h": scheme.block_h,
                "block_w": scheme.block_w, "rate": scheme.rate}
    if isinstance(scheme, BatchDropBlock):
        return {"kind": "batch_dropblock", "rows_fraction": scheme.rows_fraction}
    raise ConfigError(f"unknown drop scheme {scheme!r}")


_SCHEME_FIELDS = {
    "uniform": ("m",),
    "overlap": ("patch_h", "overlap"),
    "none": (),
    "element_dropout": ("rate",),
    "spatial_dropout": ("rate",),
    "batch_dropout": ("rate",),
    "dropblock": ("block_h", "block_w", "rate"),
    "batch_dropblock": ("rows_fraction",),
}

_SCHEME_TYPES = {
    "uniform": UniformRowDrop,
    "overlap": OverlapRowDrop,
    "none": NoDrop,
    "element_dropout": ElementDropout,
    "spatial_dropout": SpatialDropout,
    "batch_dropout": BatchDropout,
    "dropblock": DropBlock,
    "batch_dropblock": BatchDropBlock,
}


def scheme_from_dict(d: dict) -> DropStrategyKind:
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError(f"drop_scheme must be an object with a 'kind', got {d!r}")
    kind = d["kind"]
    if kind not in _SCHEME_TYPES:
        raise ConfigError(
            f"unknown drop_scheme kind {kind!r}; expected one of "
            f"{sorted(_SCHEME_TYPES)}")
    allowed = set(_SCHEME_FIELDS[kind])
    extra = set(d) - allowed - {"kind"}
    if extra:
        raise ConfigError(f"drop_scheme {kind!r}: unknown keys {sorted(extra)}")
    kwargs = {k: d[k] for k in allowed if k in d}
    try:
        return _SCHEME_TYPES[kind](**kwargs)
    except TypeError as exc:
        raise ConfigError(f"drop_scheme {kind!r}: {exc}") from exc


def config_to_dict(config: ModelConfig) -> dict:
    d = {
        "height": config.height, "width": config.width,
        "in_channels": config.in_channels, "feat_channels": config.feat_channels,
        "embed_dim": config.embed_dim, "branches": config.branches,
        "num_classes": config.num_classes, "eta": config.eta,
        "detach_weight": config.detach_weight,
        "use_global_branch": config.use_global_branch,
        "use_resblock": config.use_resblock, "loss": config.loss,
        "drop_scheme": scheme_to_dict(config.drop_scheme),
        "base_lr": config.base_lr, "warmup_epochs": config.warmup_epochs,
        "decay_epochs": list(config.decay_epochs),
        "decay_factor": config.decay_factor, "epochs": config.epochs,
        "batch_p": config.batch_p, "batch_k": config.batch_k,
        "seed": config.seed, "keep_branches": config.keep_branches,
    }
    return d


def config_from_dict(d: dict) -> ModelConfig:
    known = set(config_to_dict(ModelConfig()))
    extra = set(d) - known
    if extra:
        raise ConfigError(f"model config: unknown keys {sorted(extra)}")
    kwargs = dict(d)
    if "drop_scheme" in kwargs:
        kwargs["drop_scheme"] = scheme_from_dict(kwargs["drop_scheme"])
    if "decay_epochs" in kwargs:
        kwargs["decay_epochs"] = tuple(kwargs["decay_epochs"])
    return ModelConfig(**kwargs)


def save_checkpoint(path, params: ModelParams, config: ModelConfig,
                    config_hash: str = "") -> None:
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "config": config_to_dict(config),
        "params": {
            name: {"shape": list(p.value.shape),
                   "data": p.value.reshape(-1).tolist()}
            for name, p in params.named().items()
        },
    }
    Path(path).write_text(json.dumps(blob, sort_keys=True))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    blob = json.loads(Path(path).read_text())
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint version {blob.get('format_version')} unsupported")
    config = config_from_dict(blob["config"])
    params = init_params(config, np.random.default_rng(0))
    named = params.named()
    if set(blob["params"]) != set(named):
        raise ConfigError("checkpoint parameter names do not match the config")
    for name, entry in blob["params"].items():
        value = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if value.shape != named[name].value.shape:
            raise ConfigError(f"checkpoint param {name}: shape {value.shape} "
                              f"vs expected {named[name].value.shape}")
        named[name].value = value
    return params, config
