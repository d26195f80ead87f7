"""Command-line entry point: train, eval, gradcheck, masks and ablation grids.

Every command is driven by a json run config with strict key validation
(unknown keys are an error) and is deterministic given the seeds inside the
config. All emitted files carry a short sha256 hash of the effective config
so results stay traceable to their settings.

Exit codes: 0 success, 1 configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import statistics
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data_synth import SynthConfig, generate, stack_images
from .dropmask import (BatchDropBlock, BatchDropout, DropBlock, ElementDropout,
                       NoDrop, SpatialDropout, UniformRowDrop, drop_patch_mask,
                       overlap_row_partition, uniform_row_partition)
from .errors import ConfigError, NumericError
from .gradcheck import run_gradient_checks
from .model import (ModelConfig, ModelParams, config_from_dict, config_to_dict,
                    infer, load_checkpoint, save_checkpoint, scheme_from_dict,
                    train)
from .retrieval_eval import (EvalMetrics, QuerySet, GallerySet,
                             clamped_rerank_params, evaluate,
                             k_reciprocal_rerank)
from .elastic_loss import sq_dist_matrix


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = (1, 5, 10)
    rerank: bool = False
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3


@dataclass(frozen=True)
class RunConfig:
    data: SynthConfig
    model: ModelConfig
    eval: EvalConfig
    output_dir: str = "runs/out"


_DATA_KEYS = set(SynthConfig.__dataclass_fields__)
_EVAL_KEYS = {"ks", "rerank", "k1", "k2", "lambda_value"}
_TOP_KEYS = {"data", "model", "eval", "output_dir"}
# model keys that the data section owns; rejected inside "model"
_DERIVED_MODEL_KEYS = {"height", "width", "in_channels", "num_classes"}


def _check_keys(section: str, given: dict, allowed: set) -> None:
    extra = set(given) - allowed
    if extra:
        raise ConfigError(f"config section '{section}': unknown keys {sorted(extra)}")


def run_config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig; model grid shape and class count come from data."""
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a json object")
    _check_keys("top level", doc, _TOP_KEYS)
    data_doc = dict(doc.get("data", {}))
    _check_keys("data", data_doc, _DATA_KEYS)
    data = SynthConfig(**data_doc)

    model_doc = dict(doc.get("model", {}))
    bad = set(model_doc) & _DERIVED_MODEL_KEYS
    if bad:
        raise ConfigError(
            f"config section 'model': keys {sorted(bad)} are derived from 'data'")
    if "drop_scheme" in model_doc:
        model_doc["drop_scheme"] = scheme_from_dict(model_doc["drop_scheme"])
    if "decay_epochs" in model_doc:
        model_doc["decay_epochs"] = tuple(model_doc["decay_epochs"])
    known = set(ModelConfig.__dataclass_fields__) - _DERIVED_MODEL_KEYS
    _check_keys("model", model_doc, known)
    if "branches" in model_doc and "drop_scheme" not in model_doc:
        model_doc["drop_scheme"] = UniformRowDrop(m=model_doc["branches"])
    model = ModelConfig(height=data.height, width=data.width,
                        in_channels=data.channels, num_classes=data.num_ids,
                        **model_doc)

    eval_doc = dict(doc.get("eval", {}))
    _check_keys("eval", eval_doc, _EVAL_KEYS)
    if "ks" in eval_doc:
        eval_doc["ks"] = tuple(int(k) for k in eval_doc["ks"])
    eval_cfg = EvalConfig(**eval_doc)

    output_dir = doc.get("output_dir", "runs/out")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")
    return RunConfig(data=data, model=model, eval=eval_cfg, output_dir=output_dir)


def run_config_to_dict(cfg: RunConfig) -> dict:
    model = config_to_dict(cfg.model)
    for key in _DERIVED_MODEL_KEYS:
        model.pop(key)
    return {
        "data": {k: getattr(cfg.data, k) for k in sorted(_DATA_KEYS)},
        "model": model,
        "eval": {"ks": list(cfg.eval.ks), "rerank": cfg.eval.rerank,
                 "k1": cfg.eval.k1, "k2": cfg.eval.k2,
                 "lambda_value": cfg.eval.lambda_value},
        "output_dir": cfg.output_dir,
    }


def config_hash(cfg: RunConfig) -> str:
    """Short digest of the experimental settings (output location excluded)."""
    doc = run_config_to_dict(cfg)
    doc.pop("output_dir")
    canonical = json.dumps(doc, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def load_run_config(path, seed_override=None, out_override=None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed json in {path}: {exc}") from exc
    cfg = run_config_from_dict(doc)
    if seed_override is not None:
        cfg = replace(cfg, data=replace(cfg.data, seed=seed_override),
                      model=replace(cfg.model, seed=seed_override))
    if out_override is not None:
        cfg = replace(cfg, output_dir=str(out_override))
    return cfg


# --- shared pipeline pieces -------------------------------------------------

def _descriptor_sets(params: ModelParams, model_cfg: ModelConfig, samples
                     ) -> QuerySet:
    images, ids, cameras = stack_images(samples)
    descs = infer(images, params, model_cfg)
    return QuerySet(descriptors=descs, ids=ids, cameras=cameras)


def _evaluate_sets(query: QuerySet, gallery: GallerySet,
                   eval_cfg: EvalConfig) -> EvalMetrics:
    if len(query) == 0:
        return EvalMetrics({k: 0.0 for k in eval_cfg.ks}, 0.0, 0)
    dist = None
    if eval_cfg.rerank:
        k1, k2 = clamped_rerank_params(len(query), len(gallery),
                                       eval_cfg.k1, eval_cfg.k2)
        dist = k_reciprocal_rerank(
            sq_dist_matrix(query.descriptors, gallery.descriptors),
            sq_dist_matrix(query.descriptors, query.descriptors),
            sq_dist_matrix(gallery.descriptors, gallery.descriptors),
            k1=k1, k2=k2, lambda_value=eval_cfg.lambda_value)
    return evaluate(query, gallery, ks=eval_cfg.ks, dist=dist)


def run_train_eval(cfg: RunConfig) -> tuple[ModelParams, list[dict], dict]:
    """Generate data, train, and score clean/occluded query splits."""
    dataset = generate(cfg.data)
    params, log = train(dataset.train, cfg.model)
    gallery = _descriptor_sets(params, cfg.model, dataset.gallery)
    clean = [s for s in dataset.query if not s.occluded]
    occluded = [s for s in dataset.query if s.occluded]
    metrics = {
        "clean": _evaluate_sets(
            _descriptor_sets(params, cfg.model, clean) if clean else
            QuerySet(np.zeros((0, cfg.model.embed_dim)), np.zeros(0, dtype=int),
                     np.zeros(0, dtype=int)),
            gallery, cfg.eval).to_dict(),
        "occluded": _evaluate_sets(
            _descriptor_sets(params, cfg.model, occluded) if occluded else
            QuerySet(np.zeros((0, cfg.model.embed_dim)), np.zeros(0, dtype=int),
                     np.zeros(0, dtype=int)),
            gallery, cfg.eval).to_dict(),
    }
    return params, log, metrics


def _write_train_log(path: Path, log: list[dict], chash: str) -> None:
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "lr", "elastic_loss", "ce_loss", "total_loss"])
        writer.writeheader()
        for row in log:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})


# --- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed, args.out)
    chash = config_hash(cfg)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, log, metrics = run_train_eval(cfg)
    save_checkpoint(out_dir / "checkpoint.json", params, cfg.model, chash)
    _write_train_log(out_dir / "train_log.csv", log, chash)
    doc = {"config_hash": chash, **metrics}
    (out_dir / "metrics.json").write_text(json.dumps(doc, sort_keys=True,
                                                     indent=2) + "\n")
    print(json.dumps(doc, sort_keys=True))
    return 0


def _load_embedding_csv(path) -> QuerySet:
    """CSV rows: id, camera, then the descriptor floats (header optional)."""
    ids, cameras, rows = [], [], []
    text = Path(path).read_text().strip().splitlines()
    for line in text:
        parts = [p.strip() for p in line.split(",")]
        if parts[0] == "id":
            continue
        ids.append(int(parts[0]))
        cameras.append(int(parts[1]))
        rows.append([float(x) for x in parts[2:]])
    if not rows:
        raise ConfigError(f"no descriptor rows in {path}")
    return QuerySet(descriptors=np.asarray(rows), ids=np.asarray(ids),
                    cameras=np.asarray(cameras))


def write_embedding_csv(path, s: QuerySet) -> None:
    dim = s.descriptors.shape[1]
    lines = ["id,camera," + ",".join(f"f{i}" for i in range(dim))]
    for i in range(len(s)):
        vals = ",".join(repr(float(x)) for x in s.descriptors[i])
        lines.append(f"{s.ids[i]},{s.cameras[i]},{vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.seed, args.out)
    chash = config_hash(cfg)
    if args.query_csv and args.gallery_csv:
        query = _load_embedding_csv(args.query_csv)
        gallery = _load_embedding_csv(args.gallery_csv)
        metrics = {"all": _evaluate_sets(query, gallery, cfg.eval).to_dict()}
    elif args.checkpoint:
        params, model_cfg = load_checkpoint(args.checkpoint)
        dataset = generate(cfg.data)
        gallery = _descriptor_sets(params, model_cfg, dataset.gallery)
        query = _descriptor_sets(params, model_cfg, dataset.query)
        metrics = {"all": _evaluate_sets(query, gallery, cfg.eval).to_dict()}
    else:
        raise ConfigError(
            "eval needs either --checkpoint or both --query-csv and --gallery-csv")
    doc = {"config_hash": chash, **metrics}
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(json.dumps(doc, sort_keys=True,
                                                         indent=2) + "\n")
    print(json.dumps(doc, sort_keys=True))
    return 0


def _args_hash(**kwargs) -> str:
    canonical = json.dumps(kwargs, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def cmd_gradcheck(args) -> int:
    report = run_gradient_checks(seed=args.seed or 0)
    report["config_hash"] = _args_hash(seed=args.seed or 0,
                                       trials=report["trials"])
    print(json.dumps(report, sort_keys=True, indent=2))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "gradcheck.json").write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n")
    return 0 if report["passed"] else 2


def _mask_lines(masks, height, width, scheme_desc) -> list[str]:
    chash = _args_hash(scheme=scheme_desc, height=height, width=width)
    lines = [f"# config_hash={chash} scheme={scheme_desc} height={height} "
             f"width={width} branches={len(masks)}"]
    for i, mask in enumerate(masks, start=1):
        lines.append(f"branch {i}")
        for r in range(height):
            lines.append(" ".join(str(int(v)) for v in mask[r]))
        lines.append("")
    return lines


def cmd_masks(args) -> int:
    if args.scheme == "uniform":
        part = uniform_row_partition(args.height, args.m)
        desc = f"uniform(m={args.m})"
    else:
        part = overlap_row_partition(args.height, args.patch_h, args.overlap)
        desc = f"overlap(patch_h={args.patch_h}, overlap={args.overlap})"
    masks = [drop_patch_mask(part, i, args.width)
             for i in range(1, part.branch_count + 1)]
    lines = _mask_lines(masks, args.height, args.width, desc)
    print("\n".join(lines))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "masks.txt").write_text("\n".join(lines) + "\n")
        with (out_dir / "masks.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["branch", "row", "col", "bit"])
            for i, mask in enumerate(masks, start=1):
                for r in range(args.height):
                    for c in range(args.width):
                        writer.writerow([i, r, c, int(mask[r, c])])
    return 0


# --- ablation grids -----------------------------------------------------------

ABLATION_SEEDS = 5


def _grid_rows(cfg: RunConfig, variants: list[tuple[str, ModelConfig]],
               ks_key: int) -> list[dict]:
    """Run each variant over the shared seed set and collect metric rows."""
    rows = []
    for name, model_cfg in variants:
        per_seed = []
        for s in range(ABLATION_SEEDS):
            vcfg = replace(cfg,
                           data=replace(cfg.data, seed=cfg.data.seed + s),
                           model=replace(model_cfg, seed=model_cfg.seed + s))
            _, _, metrics = run_train_eval(vcfg)
            row = {
                "variant": name, "seed": str(s),
                "rank1_clean": metrics["clean"]["rank"][str(ks_key)],
                "map_clean": metrics["clean"]["mAP"],
                "rank1_occluded": metrics["occluded"]["rank"][str(ks_key)],
                "map_occluded": metrics["occluded"]["mAP"],
            }
            rows.append(row)
            per_seed.append(row)
        for stat, fn in (("mean", statistics.fmean), ("stddev", _stddev)):
            rows.append({
                "variant": name, "seed": stat,
                **{col: fn([r[col] for r in per_seed])
                   for col in ("rank1_clean", "map_clean", "rank1_occluded",
                               "map_occluded")},
            })
    return rows


def _stddev(values):
    return statistics.pstdev(values) if len(values) > 1 else 0.0


def _write_ablation_csv(out_dir: Path, rows: list[dict], chash: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "ablation.csv"
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})
    print(f"wrote {path}")


def _base_rank_k(cfg: RunConfig) -> int:
    return cfg.eval.ks[0]


def cmd_ablate_dropout(args) -> int:
    """Side-by-side dropout strategies under a shared seed set and schedule."""
    cfg = load_run_config(args.config, args.seed, args.out)
    m = cfg.model.branches
    h = cfg.model.height

    def single(scheme):
        return replace(cfg.model, branches=1, drop_scheme=scheme)

    variants = [
        ("element_dropout", single(ElementDropout(rate=0.25))),
        ("spatial_dropout", single(SpatialDropout(rate=0.25))),
        ("batch_dropout", single(BatchDropout(rate=0.25))),
        ("dropblock", single(DropBlock(block_h=max(1, h // m),
                                       block_w=max(1, cfg.model.width // 2)))),
        ("batch_dropblock", single(BatchDropBlock(rows_fraction=1.0 / m))),
        ("consecutive", cfg.model),
    ]
    rows = _grid_rows(cfg, variants, _base_rank_k(cfg))
    _write_ablation_csv(Path(cfg.output_dir), rows, config_hash(cfg))
    return 0


def cmd_ablate_branches(args) -> int:
    """Truncate the branch list to its first m' entries, m' = 1..m."""
    cfg = load_run_config(args.config, args.seed, args.out)
    if not isinstance(cfg.model.drop_scheme, UniformRowDrop):
        raise ConfigError("ablate-branches requires the uniform drop scheme")
    variants = []
    for m_prime in range(1, cfg.model.branches + 1):
        variants.append((f"m_prime={m_prime}",
                         replace(cfg.model, keep_branches=m_prime)))
    rows = _grid_rows(cfg, variants, _base_rank_k(cfg))
    _write_ablation_csv(Path(cfg.output_dir), rows, config_hash(cfg))
    return 0


def cmd_ablate_components(args) -> int:
    """Component grid: no-drop/plain-triplet baseline up to the full model."""
    cfg = load_run_config(args.config, args.seed, args.out)
    full = cfg.model
    no_drop = replace(full, branches=1, drop_scheme=NoDrop())
    variants = [
        ("baseline", replace(no_drop, loss="triplet")),
        ("elastic_only", replace(no_drop, loss="elastic")),
        ("drop_only", replace(full, loss="triplet")),
        ("no_resblock", replace(full, use_resblock=False)),
        ("full", full),
        ("with_global", replace(full, use_global_branch=True)),
    ]
    rows = _grid_rows(cfg, variants, _base_rank_k(cfg))
    _write_ablation_csv(Path(cfg.output_dir), rows, config_hash(cfg))
    return 0


# --- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elasticdrop",
        description="Desk-scale branch-drop metric learning toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to json run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the data and model seeds")
        p.add_argument("--out", default=None, help="override output directory")

    p = sub.add_parser("train", help="train a model and score both query splits")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or external embeddings")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--query-csv", default=None)
    p.add_argument("--gallery-csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("masks", help="print branch masks as 0/1 grids")
    p.add_argument("--height", type=int, default=24)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--scheme", choices=["uniform", "overlap"], default="uniform")
    p.add_argument("--m", type=int, default=6)
    p.add_argument("--patch-h", type=int, default=4, dest="patch_h")
    p.add_argument("--overlap", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("ablate-dropout", help="compare dropout strategies")
    common(p)
    p.set_defaults(func=cmd_ablate_dropout)

    p = sub.add_parser("ablate-branches", help="truncate branch count 1..m")
    common(p)
    p.set_defaults(func=cmd_ablate_branches)

    p = sub.add_parser("ablate-components", help="component on/off grid")
    common(p)
    p.set_defaults(func=cmd_ablate_components)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
