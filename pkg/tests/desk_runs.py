"""Cached desk-scale training runs shared by the heavy acceptance criteria.

Training a matcher takes on the order of an hour on one CPU core, so each
run persists its checkpoints and metrics under .acceptance_runs/ at the repo
root.  A run is recomputed only when missing or when its recorded settings
no longer match; delete the directory to force a fresh pass.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import replace

import numpy as np

from selfsim.harness.config import DenoiseConfig, SigmaMode, TrainSchedule
from selfsim.harness.corpus import synth_corpus
from selfsim.harness.train import (TrainLog, ablate_window, eval_stage1,
                                   finetune_match, make_refine_dataset,
                                   noisy_eval_set, pretrain_match, train_refine)
from selfsim.matcher import Matcher
from selfsim.refine import Refiner

CACHE_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                         ".acceptance_runs")

CORPUS_SETTINGS = dict(count=64, size=96, kind="mixed", seed=7, val_count=8)
SEED = 11
EVAL_RADIUS = 15
EVAL_SIGMA = 25.0
ABLATE_RADII = (7, 11)
ABLATE_IMAGES = 4
REFINE_IMAGES = 16

# reduced-scale pair for the pre-training ablation: equal total step budgets
ABLATION_PRETRAIN = 1250
ABLATION_FINETUNE = 750
ABLATION_RADIUS = 7


def _log(msg: str) -> None:
    print(f"[desk-runs {time.strftime('%H:%M:%S')}] {msg}", flush=True)


def _corpus():
    return synth_corpus(**CORPUS_SETTINGS)


def _report_dict(report) -> dict:
    return {
        "mean_psnr": report.mean_psnr,
        "mean_ssim": report.mean_ssim,
        "mean_psnr_noisy": report.mean_psnr_noisy,
        "patch_psnr_p25": report.patch_psnr_p25,
    }


class RunStore:
    """JSON + checkpoint cache for one named run."""

    def __init__(self, name: str, settings: dict):
        self.dir = os.path.join(CACHE_DIR, name)
        os.makedirs(self.dir, exist_ok=True)
        self.settings = dict(settings)
        self.manifest_path = os.path.join(self.dir, "manifest.json")
        self.data = {}
        if os.path.exists(self.manifest_path):
            with open(self.manifest_path) as fh:
                stored = json.load(fh)
            if stored.get("settings") == self._jsonable(self.settings):
                self.data = stored.get("data", {})
            else:
                _log(f"{name}: settings changed, recomputing")

    @staticmethod
    def _jsonable(obj):
        return json.loads(json.dumps(obj, default=str))

    def path(self, filename: str) -> str:
        return os.path.join(self.dir, filename)

    def save(self) -> None:
        with open(self.manifest_path, "w") as fh:
            json.dump({"settings": self._jsonable(self.settings), "data": self.data}, fh, indent=1)

    def has(self, key: str) -> bool:
        return key in self.data

    def file_ok(self, filename: str) -> bool:
        return os.path.exists(self.path(filename))


def _decile_means(losses: np.ndarray) -> tuple[float, float]:
    k = max(1, losses.size // 10)
    return float(losses[:k].mean()), float(losses[-k:].mean())


def _train_matcher_phases(store: RunStore, corpus, config, schedule):
    """Pretrain, then finetune, checkpointing after each phase."""
    matcher = Matcher(config.matcher_arch)
    pre_path = store.path("matcher_pretrain.ckpt")
    fin_path = store.path("matcher.ckpt")
    if store.has("finetuned") and store.file_ok("matcher.ckpt") and store.file_ok("matcher_pretrain.ckpt"):
        return matcher.load(pre_path), matcher.load(fin_path)
    log = TrainLog()
    params = Matcher(config.matcher_arch).init_params(config.seed, np.dtype(config.dtype))
    if schedule.pretrain_steps > 0:
        _log(f"pretraining {schedule.pretrain_steps} steps")
        pretrain_match(corpus.train, config, schedule, params, log=log)
        first, last = _decile_means(log.losses("pretrain"))
        store.data["pretrain_loss_deciles"] = [first, last]
    matcher.save(params, pre_path)
    pre_params = matcher.load(pre_path)
    _log(f"fine-tuning {schedule.finetune_steps} steps")
    finetune_match(corpus.train, config, schedule, params, log=log)
    if log.phases.get("finetune"):
        first, last = _decile_means(log.losses("finetune"))
        store.data["finetune_loss_deciles"] = [first, last]
    with open(store.path("train_log.csv"), "w") as fh:
        fh.write(log.to_csv())
    matcher.save(params, fin_path)
    store.data["finetuned"] = True
    store.save()
    return pre_params, matcher.load(fin_path)


def run_fixed() -> dict:
    """Desk-default training at fixed sigma 25: matcher + refiner + metrics."""
    settings = dict(corpus=CORPUS_SETTINGS, seed=SEED, pretrain=5000, finetune=3000,
                    refine=3000, eval_radius=EVAL_RADIUS, sigma=EVAL_SIGMA,
                    refine_images=REFINE_IMAGES, arch="desk-v5-multiregion")
    store = RunStore("fixed_sigma25", settings)
    corpus = _corpus()
    config = DenoiseConfig(window_radius=EVAL_RADIUS, seed=SEED,
                           sigma_mode=SigmaMode(kind="fixed", sigma=EVAL_SIGMA))
    schedule = TrainSchedule(pretrain_steps=5000, finetune_steps=3000, refine_steps=3000)
    pre_params, params = _train_matcher_phases(store, corpus, config, schedule)

    if not store.has("eval_pretrain"):
        _log("evaluating pretrain-only checkpoint")
        report = eval_stage1(corpus.val, pre_params, config, EVAL_SIGMA)
        store.data["eval_pretrain"] = _report_dict(report)
        store.save()
    if not store.has("eval_stage1"):
        _log("evaluating fine-tuned checkpoint")
        report = eval_stage1(corpus.val, params, config, EVAL_SIGMA)
        store.data["eval_stage1"] = _report_dict(report)
        store.save()

    matcher = Matcher(config.matcher_arch)
    refiner = Refiner(config.refine_arch)
    refine_path = store.path("refiner.ckpt")
    if not (store.has("refined") and store.file_ok("refiner.ckpt")):
        _log(f"building refine dataset ({REFINE_IMAGES} images) and training refiner")
        triples = make_refine_dataset(corpus.train, params, config, limit=REFINE_IMAGES)
        refine_params = train_refine(triples, config, schedule)
        refiner.save(refine_params, refine_path, matcher_digest=matcher.digest())
        store.data["refined"] = True
        store.save()
    refine_params, _ = refiner.load(refine_path)
    if not store.has("eval_refined"):
        _log("evaluating refined output")
        report = eval_stage1(corpus.val, params, config, EVAL_SIGMA,
                             refine_params=refine_params)
        store.data["eval_refined"] = _report_dict(report)
        store.save()

    if not store.has("ablation"):
        _log(f"window ablation at radii {ABLATE_RADII}")
        val = corpus.val[:ABLATE_IMAGES]
        noisy = noisy_eval_set(val, EVAL_SIGMA, SEED)
        rows = ablate_window(params, val, noisy, config, ABLATE_RADII)
        store.data["ablation"] = rows
        store.save()
    return store.data


def run_pretrain_ablation() -> dict:
    """Equal-total-step-budget pair: pretrained+finetuned vs pure finetune."""
    settings = dict(corpus=CORPUS_SETTINGS, seed=SEED, pretrain=ABLATION_PRETRAIN,
                    finetune=ABLATION_FINETUNE, radius=ABLATION_RADIUS,
                    sigma=EVAL_SIGMA, arch="desk-v5-multiregion")
    store = RunStore("pretrain_ablation", settings)
    corpus = _corpus()
    config = DenoiseConfig(window_radius=ABLATION_RADIUS, seed=SEED,
                           sigma_mode=SigmaMode(kind="fixed", sigma=EVAL_SIGMA))

    if not store.has("with_pretrain"):
        _log(f"ablation arm A: {ABLATION_PRETRAIN} pretrain + {ABLATION_FINETUNE} finetune")
        sched = TrainSchedule(pretrain_steps=ABLATION_PRETRAIN, finetune_steps=ABLATION_FINETUNE)
        params = Matcher(config.matcher_arch).init_params(config.seed, np.dtype(config.dtype))
        pretrain_match(corpus.train, config, sched, params)
        finetune_match(corpus.train, config, sched, params)
        Matcher(config.matcher_arch).save(params, store.path("arm_pretrained.ckpt"))
        report = eval_stage1(corpus.val, params, config, EVAL_SIGMA)
        store.data["with_pretrain"] = _report_dict(report)
        store.save()

    if not store.has("random_init"):
        total = ABLATION_PRETRAIN + ABLATION_FINETUNE
        _log(f"ablation arm B: random init, {total} finetune steps")
        sched = TrainSchedule(pretrain_steps=0, finetune_steps=total)
        params = Matcher(config.matcher_arch).init_params(config.seed, np.dtype(config.dtype))
        finetune_match(corpus.train, config, sched, params)
        Matcher(config.matcher_arch).save(params, store.path("arm_random.ckpt"))
        report = eval_stage1(corpus.val, params, config, EVAL_SIGMA)
        store.data["random_init"] = _report_dict(report)
        store.save()
    return store.data


def run_blind() -> dict:
    """Blind-sigma training; evaluated at sigma 25 and 50."""
    settings = dict(corpus=CORPUS_SETTINGS, seed=SEED, pretrain=5000, finetune=3000,
                    blind=(0.0, 55.0), eval_radius=EVAL_RADIUS, arch="desk-v5-multiregion")
    store = RunStore("blind", settings)
    corpus = _corpus()
    config = DenoiseConfig(window_radius=EVAL_RADIUS, seed=SEED,
                           sigma_mode=SigmaMode(kind="blind", low=0.0, high=55.0))
    schedule = TrainSchedule(pretrain_steps=5000, finetune_steps=3000)
    _, params = _train_matcher_phases(store, corpus, config, schedule)
    for sigma in (25.0, 50.0):
        key = f"eval_sigma{int(sigma)}"
        if not store.has(key):
            _log(f"evaluating blind checkpoint at sigma {sigma}")
            report = eval_stage1(corpus.val, params, config, sigma)
            store.data[key] = _report_dict(report)
            store.save()
    return store.data
