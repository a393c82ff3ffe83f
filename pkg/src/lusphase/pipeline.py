"""Per-fold training/evaluation and the full cross-validation driver."""
from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from .config import RunConfig, derive_seed, write_run_record
from .data import (FeatureStore, FoldPlan, Sample, batch_iterator, build_manifest, featurize_all,
                   subject_kfold, write_manifest_json)
from .errors import ConfigError
from .metrics import (MetricReport, aggregate_folds, confusion, summarize, write_report_csv,
                      write_report_json)
from .net.checkpoint import save_checkpoint
from .net.model import Model, build_model, predict
from .net.train import AdamState, train_step_with_logits

log = logging.getLogger(__name__)

INIT_TAG, SHUFFLE_TAG = 1, 2
LOG_COLUMNS = ("step", "epoch", "loss", "train_acc", "val_acc")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def evaluate_split(model: Model, samples: list[Sample], plan: FoldPlan, fold: int, split: str,
                   batch: int, store: FeatureStore) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    preds, labels, probs = [], [], []
    for x, y in batch_iterator(samples, plan, fold, split, model.fusion, batch, store=store):
        p, pr = predict(model, x)
        preds.append(p)
        labels.append(y)
        probs.append(pr)
    if not preds:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2))
    return np.concatenate(preds), np.concatenate(labels), np.concatenate(probs)


def train_fold(cfg: RunConfig, samples: list[Sample], plan: FoldPlan, fold: int, out_dir,
               store: FeatureStore | None = None) -> Model:
    """Train one fold's model, writing ``model.ckpt`` and ``train_log.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = store or FeatureStore()
    tc = cfg.train
    if not plan.split(samples, fold, "train"):
        raise ConfigError(f"fold {fold} has no training samples")
    model = build_model(cfg.model_config(derive_seed(cfg.seed, INIT_TAG, fold)), cfg.fusion)
    opt = AdamState(lr=tc.effective_lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
    shuffle_seed = derive_seed(cfg.seed, SHUFFLE_TAG, fold)
    step = 0
    with open(out_dir / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for epoch in range(tc.epochs):
            correct = seen = 0
            rows = []
            for x, y in batch_iterator(samples, plan, fold, "train", cfg.fusion, tc.batch_size,
                                       seed=shuffle_seed, epoch=epoch, store=store):
                loss, logits = train_step_with_logits(model, x, y, opt)
                step += 1
                rows.append((step, epoch, loss))
                seen += len(y)
                correct += int(np.sum(np.argmax(logits, axis=1) == y))
            p, yv, _ = evaluate_split(model, samples, plan, fold, "test", tc.batch_size, store)
            val_acc = float(np.mean(p == yv)) if yv.size else None
            train_acc = correct / seen if seen else None
            for i, (s, e, l) in enumerate(rows):
                last = i == len(rows) - 1
                writer.writerow([s, e, _fmt(l), _fmt(train_acc) if last else "", _fmt(val_acc) if last else ""])
            log.info("fold %d epoch %d: loss %.4f train_acc %s val_acc %s", fold, epoch,
                     rows[-1][2] if rows else math.nan, train_acc, val_acc)
    save_checkpoint(model, out_dir / "model.ckpt", step=step)
    return model


def evaluate_fold(model: Model, samples: list[Sample], plan: FoldPlan, fold: int, out_dir,
                  batch: int = 8, store: FeatureStore | None = None) -> MetricReport:
    """Score the held-out split; writes ``predictions.csv`` and ``metrics.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = store or FeatureStore()
    preds, labels, probs = evaluate_split(model, samples, plan, fold, "test", batch, store)
    test = plan.split(samples, fold, "test")
    with open(out_dir / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "subject_id", "label", "pred", "p_noncovid", "p_covid"])
        for s, p, pr in zip(test, preds, probs):
            w.writerow([s.id, s.subject_id, s.label, int(p), f"{pr[0]:.6f}", f"{pr[1]:.6f}"])
    cm = confusion(preds, labels)
    report = summarize(cm)
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump({"fold": fold, "confusion": {"tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn},
                   "report": report.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def read_fold_reports(run_dir) -> list[MetricReport]:
    run_dir = Path(run_dir)
    paths = sorted(run_dir.glob("fold*/metrics.json"), key=lambda p: int(p.parent.name[4:]))
    if not paths:
        raise FileNotFoundError(f"no fold*/metrics.json under {run_dir}")
    return [MetricReport(**json.loads(p.read_text())["report"]) for p in paths]


def write_report(run_dir, reports: list[MetricReport]) -> MetricReport:
    mean = aggregate_folds(reports)
    write_report_csv(Path(run_dir) / "report.csv", reports, mean)
    write_report_json(Path(run_dir) / "report.json", reports, mean)
    return mean


def crossval(cfg: RunConfig, frames, manifest_csv, out_dir, jobs: int = 1) -> MetricReport:
    """Featurize (skipping up-to-date samples), plan folds, train and score each fold."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_run_record(out_dir, "crossval", cfg, {"inputs": {"frames": str(frames), "manifest": str(manifest_csv)}})
    samples = build_manifest(frames, manifest_csv)
    feat_dir = out_dir / "features"
    manifest_json = feat_dir / "features.json"
    previous = json.loads(manifest_json.read_text()) if manifest_json.is_file() else None
    samples, doc = featurize_all(samples, cfg.pipeline, feat_dir, jobs=jobs, previous=previous)
    write_manifest_json(manifest_json, doc)
    plan = subject_kfold(samples, cfg.folds, cfg.seed)
    for f in range(plan.k):
        train_ids = {s.subject_id for s in plan.split(samples, f, "train")}
        test_ids = {s.subject_id for s in plan.split(samples, f, "test")}
        if train_ids & test_ids:
            raise ConfigError(f"fold {f} leaks subjects {sorted(train_ids & test_ids)}")
    with open(out_dir / "folds.json", "w") as fh:
        json.dump(plan.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    store = FeatureStore()
    reports = []
    for f in range(plan.k):
        fold_dir = out_dir / f"fold{f}"
        model = train_fold(cfg, samples, plan, f, fold_dir, store)
        reports.append(evaluate_fold(model, samples, plan, f, fold_dir, cfg.train.batch_size, store))
        log.info("fold %d accuracy %.4f", f, reports[-1].accuracy)
    return write_report(out_dir, reports)
