"""Command-line entry point: ``petlsv <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from petlsv.backbone import PRESETS, resolve_config
from petlsv.datagen import Manifest, default_corpora, make_trials, read_trials, write_trials, write_wav
from petlsv.errors import InputError, PetlsvError
from petlsv.evalkit import metrics_report, score_trials
from petlsv.petl import PetlConfig, count_params
from petlsv.trainer import LmFtConfig, TrainConfig, lm_finetune, train, two_stage

log = logging.getLogger("petlsv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    """Everything a training command needs; JSON file first, then flags on top."""

    seed: int = 0
    backbone: object = "desk"
    petl: PetlConfig = field(default_factory=lambda: PetlConfig("full"))
    train: dict = field(default_factory=dict)
    stage2: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        unknown = set(raw) - {"seed", "backbone", "petl", "train", "stage2", "paths"}
        if unknown:
            raise UsageError(f"config {path}: unknown keys {sorted(unknown)}")
        petl = raw.get("petl", {"mode": "full"})
        return cls(
            seed=int(raw.get("seed", 0)),
            backbone=raw.get("backbone", "desk"),
            petl=PetlConfig.from_dict(petl) if isinstance(petl, dict) else PetlConfig(petl),
            train=dict(raw.get("train", {})),
            stage2=dict(raw.get("stage2", {})),
            paths=dict(raw.get("paths", {})),
        )

    def apply_flags(self, a):
        if a.seed is not None:
            self.seed = a.seed
        if getattr(a, "backbone", None):
            self.backbone = a.backbone
        if getattr(a, "petl", None) or getattr(a, "dim", None) is not None or getattr(a, "l", None) is not None:
            d = self.petl.to_dict()
            if getattr(a, "petl", None):
                d["mode"] = a.petl
            if a.dim is not None:
                d["d_bottleneck"] = a.dim
            if a.l is not None:
                d["l"] = a.l
            self.petl = PetlConfig.from_dict(d)
        for flag, key in (("epochs", "epochs"), ("lr", "base_lr"), ("batch_size", "batch_size"), ("crop", "crop_s"), ("optimizer", "optimizer")):
            value = getattr(a, flag, None)
            if value is not None:
                self.train[key] = value
        for flag in ("manifest", "intermediate", "target", "init_from", "ckpt", "trials"):
            value = getattr(a, flag, None)
            if value is not None:
                self.paths[flag] = value
        if a.out is not None:
            self.paths["out"] = a.out
        return self

    def train_config(self, petl=None, extra=None) -> TrainConfig:
        fields = {**self.train, **(extra or {})}
        fields.update(seed=self.seed, backbone=self.backbone, petl=petl or self.petl)
        if "init_from" in self.paths:
            fields["init_from"] = self.paths["init_from"]
        try:
            return TrainConfig(**fields)
        except (TypeError, InputError) as exc:
            raise UsageError(f"bad train config: {exc}") from exc

    def to_dict(self):
        return {
            "seed": self.seed,
            "backbone": self.backbone if isinstance(self.backbone, (str, dict)) else resolve_config(self.backbone).to_dict(),
            "petl": self.petl.to_dict(),
            "train": self.train,
            "stage2": self.stage2,
            "paths": self.paths,
        }

    def need(self, *keys):
        missing = [k for k in keys if not self.paths.get(k)]
        if missing:
            raise UsageError("missing required path(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
        return [self.paths[k] for k in keys]


def _echo(rc: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_synth_data(a, rc):
    (out,) = rc.need("out")
    out = Path(out)
    corp = default_corpora(rc.seed, a.duration)
    parts = {"intermediate": corp.intermediate, "target": corp.target, "eval_a": corp.eval_a, "eval_b": corp.eval_b}
    summary = {}
    for name, man in parts.items():
        sub = out / name
        sub.mkdir(parents=True, exist_ok=True)
        if a.inline:
            man.write(sub / "manifest.jsonl")
        else:
            rows = Manifest()
            for u in man:
                wav = sub / f"{u.utt_id}.wav"
                write_wav(wav, u.load())
                rows.append(replace(u, path=str(wav)))
            rows.write(sub / "manifest.jsonl")
        if name.startswith("eval"):
            write_trials(sub / "trials.txt", make_trials(man, rc.seed))
        summary[name] = {"speakers": len(man.speakers), "utterances": len(man)}
    _echo(rc, out)
    print(json.dumps(summary, sort_keys=True))


def cmd_count_params(a, rc):
    rep = count_params(rc.backbone, rc.petl)
    print(rep.table())
    print(json.dumps({"backbone": rc.backbone if isinstance(rc.backbone, str) else "custom", "petl_config": rc.petl.to_dict(), **rep.summary()}, sort_keys=True))


def cmd_train(a, rc):
    manifest, out = rc.need("manifest", "out")
    cfg = rc.train_config()
    _echo(rc, Path(out))
    res = train(cfg, Manifest.read(manifest), out, a.name)
    print(json.dumps({"checkpoint": str(res.checkpoint), "epoch_losses": res.epoch_losses}))


def cmd_lm_ft(a, rc):
    ckpt, manifest, out = rc.need("ckpt", "manifest", "out")
    _echo(rc, Path(out))
    lm = LmFtConfig(a.extra_epochs, a.lm_crop, a.margin)
    res = lm_finetune(ckpt, lm, Manifest.read(manifest), out, a.name)
    print(json.dumps({"checkpoint": str(res.checkpoint), "epoch_losses": res.epoch_losses}))


def cmd_two_stage(a, rc):
    inter, target, out = rc.need("intermediate", "target", "out")
    rc.paths.pop("init_from", None)
    cfg1 = rc.train_config(PetlConfig("full"))
    cfg2 = rc.train_config(rc.petl, rc.stage2)
    _echo(rc, Path(out))
    first, second = two_stage(Manifest.read(inter), Manifest.read(target), rc.petl, cfg1, cfg2, out)
    print(json.dumps({"stage1": str(first.checkpoint), "stage2": str(second.checkpoint)}))


def cmd_evaluate(a, rc):
    ckpt, trials_path = rc.need("ckpt", "trials")
    manifest = rc.paths.get("manifest") or str(Path(trials_path).parent / "manifest.jsonl")
    scores = score_trials(ckpt, Manifest.read(manifest), read_trials(trials_path))
    report = metrics_report(scores)
    if rc.paths.get("out"):
        out = Path(rc.paths["out"])
        out.mkdir(parents=True, exist_ok=True)
        scores.write(out / "scores.txt")
        (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps(report, sort_keys=True))


def cmd_dump_presets(a, rc):
    text = json.dumps({k: v.to_dict() for k, v in PRESETS.items()}, indent=2, sort_keys=True)
    if rc.paths.get("out"):
        out = Path(rc.paths["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "presets.json").write_text(text)
    print(text)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    model = _Parser(add_help=False)
    model.add_argument("--backbone", choices=sorted(PRESETS))
    model.add_argument("--petl", choices=["full", "fixed", "bottleneck", "prefix", "mam"])
    model.add_argument("--dim", type=int, help="adapter bottleneck dimension")
    model.add_argument("--l", type=int, help="prefix length")

    opt = _Parser(add_help=False)
    opt.add_argument("--epochs", type=int)
    opt.add_argument("--lr", type=float)
    opt.add_argument("--batch-size", type=int)
    opt.add_argument("--crop", type=float, help="training crop length in seconds")
    opt.add_argument("--optimizer", choices=["sgd", "adam"])
    opt.add_argument("--name", default="model.ckpt", help="checkpoint file name")

    p = _Parser(prog="petlsv", description="Parameter-efficient speaker-verification toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", parents=[common], help="generate the synthetic desk corpora")
    s.add_argument("--duration", type=float, default=1.0)
    s.add_argument("--inline", action="store_true", help="manifests only (waveforms regenerated from seeds)")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("count-params", parents=[common, model], help="parameter census table and JSON")
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("train", parents=[common, model, opt], help="train one model")
    s.add_argument("--manifest")
    s.add_argument("--init-from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("lm-ft", parents=[common], help="large-margin fine-tuning of a checkpoint")
    s.add_argument("--ckpt")
    s.add_argument("--manifest")
    s.add_argument("--extra-epochs", type=int, default=2)
    s.add_argument("--lm-crop", type=float, default=5.0)
    s.add_argument("--margin", type=float, default=0.5)
    s.add_argument("--name", default="lmft.ckpt")
    s.set_defaults(func=cmd_lm_ft)

    s = sub.add_parser("two-stage", parents=[common, model, opt], help="intermediate tuning, then target adaptation")
    s.add_argument("--intermediate")
    s.add_argument("--target")
    s.set_defaults(func=cmd_two_stage)

    s = sub.add_parser("evaluate", parents=[common], help="score a trial list; JSON metrics on stdout")
    s.add_argument("--ckpt")
    s.add_argument("--trials")
    s.add_argument("--manifest", help="defaults to manifest.jsonl next to the trial list")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("dump-presets", parents=[common], help="print the embedded backbone presets")
    s.set_defaults(func=cmd_dump_presets)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        rc = RunConfig.load(a.config).apply_flags(a)
        if a.threads is not None and a.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except InputError as exc:
        print(f"{parser.format_usage()}{parser.prog}: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = 1 if a.deterministic else a.threads
    try:
        with threadpool_limits(limits=threads):
            a.func(a, rc)
    except UsageError as exc:
        print(f"{parser.prog} {a.command}: {exc}", file=sys.stderr)
        return 1
    except (PetlsvError, OSError, ValueError, KeyError) as exc:
        print(f"{parser.prog} {a.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
