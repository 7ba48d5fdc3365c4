"""Desk-scale low-resource scenario: intermediate-domain tuning, then target adaptation.

For each seed the default synthetic corpora are generated and four models are
trained:

* stage 1, full fine-tuning on the intermediate domain A;
* MAM adaptation on the target domain B starting from stage 1;
* a fixed-backbone baseline on B (untuned backbone, only back-end trained);
* direct full fine-tuning on B from the untuned backbone.

All stage-2 arms share one training recipe so that only the initialisation
and the set of trainable parameters differ.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from petlsv.datagen import default_corpora
from petlsv.evalkit import evaluate
from petlsv.petl import PetlConfig
from petlsv.trainer import TrainConfig, train, two_stage

log = logging.getLogger(__name__)

ARMS = ("fixed", "mam_int", "ft")


def _stage1_default():
    return TrainConfig(epochs=3, base_lr=1e-3, crop_s=0.25, optimizer="adam")


def _stage2_default():
    return TrainConfig(epochs=10, base_lr=3e-4, crop_s=0.25, optimizer="adam")


@dataclass(frozen=True)
class ScenarioConfig:
    seeds: tuple = (0, 1, 2)
    stage1: TrainConfig = field(default_factory=_stage1_default)
    stage2: TrainConfig = field(default_factory=_stage2_default)
    mam: PetlConfig = field(default_factory=lambda: PetlConfig("mam", d_bottleneck=8, l=4))
    duration_s: float = 1.0

    def to_dict(self):
        return {
            "seeds": list(self.seeds),
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "mam": self.mam.to_dict(),
            "duration_s": self.duration_s,
        }


@dataclass
class SeedResult:
    seed: int
    eer_a_stage1: float
    eer_b_stage1: float
    eer_b: dict  # arm -> EER on domain-B trials
    mam_ratio: float
    logs: dict  # run name -> metrics rows
    seconds: float

    def to_dict(self):
        return {
            "seed": self.seed,
            "eer_a_stage1": self.eer_a_stage1,
            "eer_b_stage1": self.eer_b_stage1,
            "eer_b": dict(self.eer_b),
            "mam_ratio": self.mam_ratio,
            "seconds": self.seconds,
        }


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    seeds: list

    def mean(self, arm: str) -> float:
        return float(np.mean([s.eer_b[arm] for s in self.seeds]))

    @property
    def mean_eer_a_stage1(self) -> float:
        return float(np.mean([s.eer_a_stage1 for s in self.seeds]))

    @property
    def max_mam_ratio(self) -> float:
        return max(s.mam_ratio for s in self.seeds)

    def checks(self) -> dict:
        fixed, mam, ft = (self.mean(a) for a in ARMS)
        return {
            "stage1_domain_a_eer_below_15pct": max(s.eer_a_stage1 for s in self.seeds) < 0.15,
            "mam_int_at_most_0.8x_fixed": mam <= 0.8 * fixed,
            "mam_int_at_most_direct_ft": mam <= ft,
            "mam_trainable_ratio_below_8pct": self.max_mam_ratio < 0.08,
        }

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "per_seed": [s.to_dict() for s in self.seeds],
            "mean_eer_b": {a: self.mean(a) for a in ARMS},
            "mean_eer_a_stage1": self.mean_eer_a_stage1,
            "checks": self.checks(),
        }


def run_seed(seed: int, cfg: ScenarioConfig, out_dir) -> SeedResult:
    out = Path(out_dir) / f"seed{seed}"
    t0 = time.perf_counter()
    corp = default_corpora(seed, cfg.duration_s)
    s1 = replace(cfg.stage1, seed=seed)
    s2 = replace(cfg.stage2, seed=seed)

    first, mam = two_stage(corp.intermediate, corp.target, cfg.mam, s1, s2, out / "mam_int")
    fixed = train(replace(s2, petl=PetlConfig("fixed"), init_from=None), corp.target, out / "fixed", "fixed.ckpt")
    ft = train(replace(s2, petl=PetlConfig("full"), init_from=None), corp.target, out / "ft", "ft.ckpt")

    eer_b = {
        "fixed": evaluate(fixed.model, corp.eval_b, corp.trials_b)["eer"],
        "mam_int": evaluate(mam.model, corp.eval_b, corp.trials_b)["eer"],
        "ft": evaluate(ft.model, corp.eval_b, corp.trials_b)["eer"],
    }
    res = SeedResult(
        seed=seed,
        eer_a_stage1=evaluate(first.model, corp.eval_a, corp.trials_a)["eer"],
        eer_b_stage1=evaluate(first.model, corp.eval_b, corp.trials_b)["eer"],
        eer_b=eer_b,
        mam_ratio=mam.model.trainable_count() / mam.model.census(),
        logs={"stage1": first.log, "mam_int": mam.log, "fixed": fixed.log, "ft": ft.log},
        seconds=time.perf_counter() - t0,
    )
    log.info("seed %d: %s", seed, json.dumps(res.to_dict()))
    return res


def run_scenario(cfg: ScenarioConfig | None = None, out_dir="scenario_out") -> ScenarioResult:
    cfg = cfg or ScenarioConfig()
    result = ScenarioResult(cfg, [run_seed(s, cfg, out_dir) for s in cfg.seeds])
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "summary.json").write_text(json.dumps(result.summary(), indent=2))
    return result
