"""Pretraining, fine-tuning, linear probing, evaluation and reconstruction reports.

Each loop is a deterministic function of its :class:`RunConfig`: every random
draw comes from streams spawned off ``cfg.seed``.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .config import RunConfig
from .data import (DataError, Dataset, SynthSpec, assert_disjoint, content_hash, load_dataset,
                   random_resized_crop, save_image, split, synth_speckle)
from .degrade import DegradeSpec, apply_batch
from .metrics import all_metrics
from .model import (ENCODER_PREFIXES, DECODER_PREFIXES, HEAD_PREFIXES, Weights, _trunc_normal,
                    classify, head, init_weights, is_no_decay, layer_id, load_checkpoint,
                    pooled_features, reconstruct, save_checkpoint)
from .optim import (LARS, AdamW, ScheduleSpec, cosine_warmup_lr, layerwise_lr_scale, scaled_lr)
from .patching import patchify, random_mask, unpatchify

log = logging.getLogger(__name__)

EVAL_CHUNK = 64


class TrainError(RuntimeError):
    pass


class DegradeMismatch(TrainError):
    pass


@dataclass
class RunResult:
    weights: Weights
    trace: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    test: dict | None = None


class _Streams:
    """Independent generators for each consumer of randomness."""

    def __init__(self, seed: int):
        kids = np.random.SeedSequence(seed).spawn(6)
        self.init, self.shuffle, self.augment, self.mask, self.noise, self.head = (
            np.random.default_rng(k) for k in kids)
        self.init_seed = int(kids[0].generate_state(1)[0])


# ---------------------------------------------------------------------------
# data plumbing


def load_corpus(cfg: RunConfig, labeled: bool) -> Dataset:
    if cfg.data.synth is not None:
        spec = SynthSpec.from_dict({**cfg.data.synth, "labeled": labeled})
        return synth_speckle(spec)
    ds = load_dataset(cfg.data.dir)
    if labeled and not ds.labeled:
        raise DataError(f"{cfg.data.dir}: classification needs labeled data")
    return ds


def _degrade(spec: DegradeSpec, images: np.ndarray, rng) -> np.ndarray:
    return apply_batch(spec, images, rng)


def _augment(cfg: RunConfig, images: np.ndarray, rng) -> np.ndarray:
    if not cfg.augment.crop:
        return images
    side = images.shape[-1]
    return np.stack([random_resized_crop(im, rng, tuple(cfg.augment.scale), side) for im in images])


def _batches(n: int, size: int, rng) -> list:
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _base_lr(cfg: RunConfig) -> float:
    if cfg.optim.lr_scaling == "linear":
        return scaled_lr(cfg.optim.base_lr, cfg.batch_size)
    return cfg.optim.base_lr


def _schedule(cfg: RunConfig, steps_per_epoch: int) -> ScheduleSpec:
    return ScheduleSpec(_base_lr(cfg), cfg.schedule.warmup_epochs, cfg.epochs,
                        steps_per_epoch, cfg.schedule.min_lr)


def _grads(w: Weights, names: Sequence[str]) -> dict:
    return {n: w[n].grad for n in names if w[n].grad is not None}


def _check_loss(loss: T.Tensor, epoch: int, batch: int) -> float:
    val = loss.item()
    if not np.isfinite(val):
        raise TrainError(f"non-finite loss at epoch {epoch}, batch {batch}")
    return val


def _write_jsonl(path, records: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_manifest(path, cfg: RunConfig, extra: dict | None = None) -> None:
    """Enough to re-run bit-identically: full config, its digest, seed, code version."""
    rec = {"config": cfg.to_dict(), "config_digest": cfg.digest(), "seed": cfg.seed,
           "version": __version__}
    rec.update(extra or {})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(rec, sort_keys=True, indent=1) + "\n")


def _finish(cfg: RunConfig, res: RunResult) -> RunResult:
    if cfg.ckpt_out:
        save_checkpoint(cfg.ckpt_out, res.weights, res.meta)
        write_manifest(str(cfg.ckpt_out) + ".manifest.json", cfg)
    if cfg.metrics_out:
        recs = list(res.trace)
        if res.test is not None:
            recs.append({"split": "test", **res.test})
        _write_jsonl(cfg.metrics_out, recs)
        write_manifest(str(cfg.metrics_out) + ".manifest.json", cfg)
    return res


# ---------------------------------------------------------------------------
# pretraining


def pretrain_loss(w: Weights, sharp: np.ndarray, degraded: np.ndarray, masks) -> T.Tensor:
    """Reconstruct from masked degraded patches; score against the sharp patches."""
    p = w.cfg.patch_size
    recon = reconstruct(patchify(degraded, p), masks, w)
    return T.mse_all_patches(recon, patchify(sharp, p))


def pretrain(cfg: RunConfig, corpus: Dataset | None = None) -> RunResult:
    if cfg.mode != "pretrain":
        raise TrainError(f"pretrain called with mode {cfg.mode!r}")
    spec = cfg.degrade_spec() or DegradeSpec.make("identity")
    vit = cfg.vit()
    rs = _Streams(cfg.seed)
    if corpus is None:
        corpus = load_corpus(cfg, labeled=False)
    images = corpus.images()
    if images.shape[-2:] != (vit.image_size, vit.image_size):
        raise TrainError(f"corpus images {images.shape[-2:]} do not match model size {vit.image_size}")
    w = init_weights(vit, rs.init_seed)
    names = w.names(ENCODER_PREFIXES + DECODER_PREFIXES)
    opt = AdamW(betas=tuple(cfg.optim.betas), eps=cfg.optim.eps,
                weight_decay=cfg.optim.weight_decay,
                no_decay=frozenset(n for n in names if is_no_decay(n)))
    steps_per_epoch = -(-len(images) // cfg.batch_size)
    sched = _schedule(cfg, steps_per_epoch)
    arrays = {n: w[n].data for n in names}
    trace, step = [], 0
    n_patch = vit.num_patches
    for epoch in range(1, cfg.epochs + 1):
        total, lr = 0.0, 0.0
        for bi, idx in enumerate(_batches(len(images), cfg.batch_size, rs.shuffle)):
            sharp = _augment(cfg, images[idx], rs.augment)
            degraded = _degrade(spec, sharp, rs.noise)
            masks = [random_mask(n_patch, cfg.mask_ratio, rs.mask) for _ in idx]
            loss = pretrain_loss(w, sharp, degraded, masks)
            total += _check_loss(loss, epoch, bi) * len(idx)
            T.zero_grads(w.params.values())
            T.backward(loss)
            lr = cosine_warmup_lr(sched, step)
            opt.step(arrays, _grads(w, names), lr)
            step += 1
        rec = {"epoch": epoch, "lr": lr, "loss": total / len(images)}
        trace.append(rec)
        log.info("pretrain epoch %d loss %.6f lr %.3g", epoch, rec["loss"], lr)
    meta = {
        "mode": "pretrain",
        "degrade": spec.to_dict(),
        "mask_ratio": cfg.mask_ratio,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "corpus_hashes": sorted(corpus.hashes()),
        "version": __version__,
    }
    return _finish(cfg, RunResult(w, trace, meta))


# ---------------------------------------------------------------------------
# transfer


def predict(w: Weights, degraded: np.ndarray) -> np.ndarray:
    """Probabilities for already-degraded images."""
    frozen = _frozen(w)
    out = []
    for i in range(0, len(degraded), EVAL_CHUNK):
        out.append(T.sigmoid(classify(degraded[i:i + EVAL_CHUNK], frozen)).data)
    return np.concatenate(out)


def _frozen(w: Weights) -> Weights:
    return Weights(w.cfg, {n: T.Tensor(t.data) for n, t in w.params.items()})


def _scores(w: Weights, degraded: np.ndarray, labels: np.ndarray) -> dict:
    return all_metrics(predict(w, degraded), labels)


def resolve_degrade(cfg: RunConfig, meta: dict) -> DegradeSpec:
    """Transfer must see the same degradation as pretraining unless overridden."""
    pre = DegradeSpec.from_dict(meta["degrade"]) if meta.get("degrade") else None
    mine = cfg.degrade_spec()
    if pre is None:
        return mine or DegradeSpec.make("identity")
    if mine is None or mine == pre:
        return pre
    if not cfg.allow_degrade_override:
        raise DegradeMismatch(
            f"transfer degradation {mine} differs from pretraining degradation {pre}; "
            "set allow_degrade_override to proceed")
    return mine


def _source_weights(cfg: RunConfig, weights: Weights | None, meta: dict | None):
    if weights is not None:
        return weights.copy(), dict(meta or {})
    if cfg.scratch:
        return init_weights(cfg.vit(), _Streams(cfg.seed).init_seed), {}
    w, meta = load_checkpoint(cfg.ckpt_in)
    if cfg.model and cfg.vit() != w.cfg:
        raise TrainError("model config in the run config does not match the checkpoint")
    return w, meta


def _reset_head(w: Weights, rng) -> None:
    for n in w.names(HEAD_PREFIXES):
        t = w[n]
        t.data = _trunc_normal(rng, t.shape) if n.endswith(".w") else np.zeros(t.shape)


def _transfer_data(cfg: RunConfig, meta: dict, spec: DegradeSpec, rs: _Streams):
    corpus = load_corpus(cfg, labeled=True)
    train, val, test = split(corpus, cfg.data.split_ratios, cfg.data.split_seed)
    if meta.get("corpus_hashes"):
        common = set(meta["corpus_hashes"]) & test.hashes()
        if common:
            raise DataError(f"pretraining corpus shares {len(common)} image(s) with the test split")
    # evaluation inputs are degraded once, with their own noise stream
    eval_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(7)[6])
    val_x = _degrade(spec, val.images(), eval_rng)
    test_x = _degrade(spec, test.images(), eval_rng)
    return train, (val_x, val.labels()), (test_x, test.labels())


def _better(cur: dict, best: dict | None) -> bool:
    # validation F1 decides; AUROC breaks ties
    return best is None or (cur["f1"], cur["auroc"]) > (best["f1"], best["auroc"])


def finetune(cfg: RunConfig, weights: Weights | None = None, meta: dict | None = None) -> RunResult:
    """End-to-end fine-tuning of encoder and head with layer-wise lr decay."""
    if cfg.mode != "finetune":
        raise TrainError(f"finetune called with mode {cfg.mode!r}")
    rs = _Streams(cfg.seed)
    w, meta = _source_weights(cfg, weights, meta)
    spec = resolve_degrade(cfg, meta)
    _reset_head(w, rs.head)
    train, (val_x, val_y), (test_x, test_y) = _transfer_data(cfg, meta, spec, rs)
    images, labels = train.images(), train.labels().astype(np.float64)
    names = w.names(ENCODER_PREFIXES + HEAD_PREFIXES)
    depth = w.cfg.enc_depth
    scales = {n: layerwise_lr_scale(layer_id(n, depth), depth + 1, cfg.optim.layer_decay)
              for n in names}
    opt = AdamW(betas=tuple(cfg.optim.betas), eps=cfg.optim.eps,
                weight_decay=cfg.optim.weight_decay, lr_scale=scales,
                no_decay=frozenset(n for n in names if is_no_decay(n)))
    sched = _schedule(cfg, -(-len(images) // cfg.batch_size))
    arrays = {n: w[n].data for n in names}
    best, best_arrays, trace, step = None, None, [], 0
    for epoch in range(1, cfg.epochs + 1):
        total, lr = 0.0, 0.0
        for bi, idx in enumerate(_batches(len(images), cfg.batch_size, rs.shuffle)):
            x = _degrade(spec, _augment(cfg, images[idx], rs.augment), rs.noise)
            prob = T.sigmoid(classify(x, w))
            loss = T.binary_cross_entropy(prob, labels[idx], cfg.label_smoothing)
            total += _check_loss(loss, epoch, bi) * len(idx)
            T.zero_grads(w.params.values())
            T.backward(loss)
            lr = cosine_warmup_lr(sched, step)
            opt.step(arrays, _grads(w, names), lr)
            step += 1
        val = _scores(w, val_x, val_y)
        rec = {"epoch": epoch, "lr": lr, "loss": total / len(images),
               **{f"val_{k}": v for k, v in val.items()}}
        trace.append(rec)
        if _better(val, best):
            best = val
            best_arrays = {n: t.data.copy() for n, t in w.params.items()}
    for n, arr in best_arrays.items():
        w[n].data = arr
    test = _scores(w, test_x, test_y)
    out_meta = {"mode": "finetune", "degrade": spec.to_dict(), "seed": cfg.seed,
                "config_digest": cfg.digest(), "val": best, "test": test,
                "pretrain": {k: meta[k] for k in ("degrade", "mask_ratio", "seed") if k in meta},
                "version": __version__}
    return _finish(cfg, RunResult(w, trace, out_meta, test))


def linear_probe(cfg: RunConfig, weights: Weights | None = None, meta: dict | None = None) -> RunResult:
    """Train only the MLP head on frozen encoder features, with LARS."""
    if cfg.mode != "linprobe":
        raise TrainError(f"linear_probe called with mode {cfg.mode!r}")
    rs = _Streams(cfg.seed)
    w, meta = _source_weights(cfg, weights, meta)
    spec = resolve_degrade(cfg, meta)
    _reset_head(w, rs.head)
    train, (val_x, val_y), (test_x, test_y) = _transfer_data(cfg, meta, spec, rs)
    images, labels = train.images(), train.labels().astype(np.float64)
    frozen = _frozen(w)
    enc_names = w.names(ENCODER_PREFIXES)
    head_names = w.names(HEAD_PREFIXES)
    for n in w.params:
        w[n].requires_grad = n in head_names
    cache = None
    if not cfg.augment.crop:
        # the encoder is frozen and inputs are fixed: features once
        feats = [pooled_features(_degrade(spec, images[i:i + EVAL_CHUNK], rs.noise), frozen).data
                 for i in range(0, len(images), EVAL_CHUNK)]
        cache = np.concatenate(feats)
    opt = LARS(momentum=cfg.optim.momentum, weight_decay=cfg.optim.weight_decay)
    sched = _schedule(cfg, -(-len(images) // cfg.batch_size))
    arrays = {n: w[n].data for n in head_names}
    best, best_arrays, trace, step = None, None, [], 0
    for epoch in range(1, cfg.epochs + 1):
        total, lr = 0.0, 0.0
        for bi, idx in enumerate(_batches(len(images), cfg.batch_size, rs.shuffle)):
            if cache is not None:
                feats = cache[idx]
            else:
                x = _degrade(spec, _augment(cfg, images[idx], rs.augment), rs.noise)
                feats = pooled_features(x, frozen).data
            prob = T.sigmoid(head(feats, w))
            loss = T.binary_cross_entropy(prob, labels[idx], cfg.label_smoothing)
            total += _check_loss(loss, epoch, bi) * len(idx)
            T.zero_grads(w.params.values())
            T.backward(loss)
            leaked = [n for n in enc_names if w[n].grad is not None and np.any(w[n].grad)]
            if leaked:
                raise TrainError(f"encoder received gradients during linear probing: {leaked[:3]}")
            lr = cosine_warmup_lr(sched, step)
            opt.step(arrays, _grads(w, head_names), lr)
            step += 1
        val = _scores(w, val_x, val_y)
        rec = {"epoch": epoch, "lr": lr, "loss": total / len(images),
               **{f"val_{k}": v for k, v in val.items()}}
        trace.append(rec)
        if _better(val, best):
            best = val
            best_arrays = {n: w[n].data.copy() for n in head_names}
    for n, arr in best_arrays.items():
        w[n].data = arr
    for t in w.params.values():
        t.requires_grad = True
    test = _scores(w, test_x, test_y)
    out_meta = {"mode": "linprobe", "degrade": spec.to_dict(), "seed": cfg.seed,
                "config_digest": cfg.digest(), "val": best, "test": test,
                "pretrain": {k: meta[k] for k in ("degrade", "mask_ratio", "seed") if k in meta},
                "version": __version__}
    return _finish(cfg, RunResult(w, trace, out_meta, test))


def evaluate(w: Weights, meta: dict, dataset: Dataset, out_path=None, seed: int = 0) -> dict:
    """ACC/F1/AUROC on a labeled set, degraded the way the checkpoint expects."""
    if not dataset.labeled:
        raise DataError("evaluation needs a labeled dataset")
    spec = DegradeSpec.from_dict(meta["degrade"]) if meta.get("degrade") else DegradeSpec.make("identity")
    x = _degrade(spec, dataset.images(), np.random.default_rng(seed))
    res = all_metrics(predict(w, x), dataset.labels())
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps({"n": len(dataset), **res}, sort_keys=True) + "\n")
    return res


# ---------------------------------------------------------------------------
# reconstruction report


def reconstruction_errors(w: Weights, spec: DegradeSpec, images: np.ndarray,
                          mask_ratio: float, seed: int = 0) -> dict:
    """Per-image MSE of the reconstruction and of the degraded input vs the original.

    Returns arrays keyed ``recon`` (masked at ``mask_ratio``), ``recon_visible``
    (visible patches only), ``recon_full`` (nothing masked) and ``degraded``,
    plus the reconstructions themselves.
    """
    cfg = w.cfg
    rng = np.random.default_rng(seed)
    frozen = _frozen(w)
    degraded = _degrade(spec, images, rng)
    p = cfg.patch_size
    target = patchify(images, p)
    inp = patchify(degraded, p)
    masks = [random_mask(cfg.num_patches, mask_ratio, rng) for _ in images]
    recon = reconstruct(inp, masks, frozen).data
    full = reconstruct(inp, [random_mask(cfg.num_patches, 0.0, rng) for _ in images], frozen).data
    vis = np.array([((recon[i, m.visible] - target[i, m.visible]) ** 2).mean()
                    for i, m in enumerate(masks)])
    return {
        "recon": ((recon - target) ** 2).mean(axis=(1, 2)),
        "recon_visible": vis,
        "recon_full": ((full - target) ** 2).mean(axis=(1, 2)),
        "degraded": ((degraded - images) ** 2).mean(axis=(1, 2)),
        "masks": masks,
        "degraded_images": degraded,
        "recon_images": unpatchify(recon, p, cfg.image_size, cfg.image_size),
    }


def reconstruct_report(w: Weights, meta: dict, dataset: Dataset, out_dir,
                       mask_ratio: float | None = None, seed: int = 0) -> dict:
    """One grid PNG per image (original | degraded | masked | reconstruction) plus MSE report."""
    spec = DegradeSpec.from_dict(meta["degrade"]) if meta.get("degrade") else DegradeSpec.make("identity")
    ratio = meta.get("mask_ratio", 0.75) if mask_ratio is None else mask_ratio
    images = dataset.images()
    err = reconstruction_errors(w, spec, images, ratio, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    p = w.cfg.patch_size
    rows = []
    for i, item in enumerate(dataset.items):
        mask = err["masks"][i]
        shown = patchify(err["degraded_images"][i], p)
        shown[mask.masked] = 0.0
        masked_img = unpatchify(shown, p, *images[i].shape)
        grid = np.concatenate([images[i], err["degraded_images"][i], masked_img,
                               err["recon_images"][i]], axis=1)
        name = item.name or f"img{i:05d}"
        save_image(grid, out_dir / f"{name}_grid.png")
        rows.append({"name": name, "mse_recon": float(err["recon"][i]),
                     "mse_recon_visible": float(err["recon_visible"][i]),
                     "mse_recon_unmasked": float(err["recon_full"][i]),
                     "mse_degraded": float(err["degraded"][i])})
    summary = {
        "degrade": spec.to_dict(), "mask_ratio": ratio, "n": len(rows),
        "mean_mse_recon": float(err["recon"].mean()),
        "mean_mse_recon_visible": float(err["recon_visible"].mean()),
        "mean_mse_recon_unmasked": float(err["recon_full"].mean()),
        "mean_mse_degraded": float(err["degraded"].mean()),
        "images": rows,
    }
    (out_dir / "report.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return summary


# ---------------------------------------------------------------------------
# ablation sweep

SWEEP_AXES = ("mask_ratio", "patch_size", "sigma", "method")


def _axis_changes(axis: str, value) -> dict:
    if axis == "mask_ratio":
        return {"pretrain": {"mask_ratio": float(value)}}
    if axis == "patch_size":
        return {"pretrain": {"model.patch_size": int(value)}}
    if axis == "sigma":
        return {"pretrain": {"degrade": {"method": "gaussian", "params": {"sigma": float(value)}}}}
    if axis == "method":
        return {"pretrain": {"degrade": {"method": str(value), "params": {}}}}
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def _sweep_point(args) -> dict:
    pre_cfg, ft_cfg, axis, value, seed = args
    changes = _axis_changes(axis, value)["pretrain"]
    pre = pre_cfg.updated(seed=seed, ckpt_out=None, metrics_out=None, **changes)
    res = pretrain(pre)
    # scratch only satisfies validation; the in-memory pretrained weights take precedence
    ft = ft_cfg.updated(seed=seed, ckpt_in=None, ckpt_out=None, metrics_out=None,
                        scratch=True, degrade=None)
    out = finetune(ft, res.weights, res.meta)
    return {"axis": axis, "value": value, "seed": seed, **out.test,
            "final_pretrain_loss": res.trace[-1]["loss"]}


def sweep_workers() -> int:
    try:
        return max(1, int(os.environ.get("DEBLUR_MIM_THREADS", "1")))
    except ValueError:
        return 1


def run_sweep(pre_cfg: RunConfig, ft_cfg: RunConfig, axis: str, values: Sequence,
              seeds: Sequence[int] = (0,)) -> list:
    """Pretrain + fine-tune at every grid point; one result row per (value, seed)."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    jobs = [(pre_cfg, ft_cfg, axis, v, s) for v in values for s in seeds]
    workers = min(sweep_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_sweep_point, jobs))
    return [_sweep_point(j) for j in jobs]


def summarize(rows: list) -> list:
    """Mean and sample sd of test metrics per swept value, in first-seen order."""
    out, order = {}, []
    for r in rows:
        key = r["value"]
        if key not in out:
            out[key] = []
            order.append(key)
        out[key].append(r)
    table = []
    for key in order:
        rs = out[key]
        rec = {"axis": rs[0]["axis"], "value": key, "runs": len(rs)}
        for m in ("acc", "f1", "auroc"):
            vals = np.array([r[m] for r in rs])
            rec[f"{m}_mean"] = float(vals.mean())
            rec[f"{m}_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        table.append(rec)
    return table


def format_table(table: list) -> str:
    head_ = ["axis", "value", "runs", "acc_mean", "acc_sd", "f1_mean", "f1_sd", "auroc_mean", "auroc_sd"]
    lines = ["\t".join(head_)]
    for rec in table:
        lines.append("\t".join(f"{rec[h]:.4f}" if isinstance(rec[h], float) else str(rec[h])
                               for h in head_))
    return "\n".join(lines)


def corpus_hashes(ds: Dataset) -> set:
    return {content_hash(it.image) for it in ds.items}


__all__ = [
    "DegradeMismatch", "RunResult", "TrainError", "assert_disjoint", "corpus_hashes", "evaluate",
    "finetune", "format_table", "linear_probe", "pretrain", "pretrain_loss", "predict",
    "reconstruct_report", "reconstruction_errors", "resolve_degrade", "run_sweep", "summarize",
]
