"""``ser`` command line.

Every subcommand resolves a run configuration (defaults, then ``--config``
JSON, then flags), echoes it, and writes a JSON report named
``<subcommand>-<seed>-<timestamp>.json`` into the report directory.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

import argparse
import datetime
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .audio import load_manifest
from .errors import SERError
from .melspec import MelParams
from .training import SplitSpec, TrainConfig, sub_seed
from .vit import FLOP_MODES, PRESETS, ModelConfig, preset


@dataclass
class RunConfig:
    seed: int = 0
    mel: MelParams = field(default_factory=MelParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    paths: dict = field(default_factory=lambda: {"manifests": [], "checkpoint_dir": "checkpoints",
                                                 "report_dir": "reports", "cache_dir": None})

    def to_dict(self):
        return {"seed": self.seed, "mel": self.mel.to_dict(), "model": self.model.to_dict(),
                "train": self.train.to_dict(), "split": self.split.to_dict(), "paths": dict(self.paths)}


def _model_config(value):
    if isinstance(value, str):
        return preset(value)
    return ModelConfig.from_dict(value)


def load_run_config(path=None):
    cfg = RunConfig()
    if not path:
        return cfg
    with open(path) as fh:
        raw = json.load(fh)
    unknown = set(raw) - {"seed", "mel", "model", "train", "split", "paths"}
    if unknown:
        raise ValueError(f"unknown run-config keys {sorted(unknown)}")
    base = os.path.dirname(os.path.abspath(path))
    if "seed" in raw:
        cfg.seed = int(raw["seed"])
    if "mel" in raw:
        cfg.mel = MelParams.from_dict({**cfg.mel.to_dict(), **raw["mel"]})
    if "model" in raw:
        cfg.model = _model_config(raw["model"])
    if "train" in raw:
        cfg.train = TrainConfig.from_dict({**cfg.train.to_dict(), **raw["train"]})
    if "split" in raw:
        cfg.split = SplitSpec.from_dict({**cfg.split.to_dict(), **raw["split"]})
    for key, value in raw.get("paths", {}).items():
        if key == "manifests":
            value = [os.path.join(base, v) for v in value]
        elif value is not None:
            value = os.path.join(base, value)
        cfg.paths[key] = value
    return cfg


def _resolve(args):
    cfg = load_run_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "model", None):
        if args.model in PRESETS:
            cfg.model = preset(args.model)
        elif args.model.endswith(".ckpt") or args.model.endswith(".json"):
            cfg.paths["model"] = args.model
        else:
            raise argparse.ArgumentTypeError(f"--model must be a preset {sorted(PRESETS)} or a .ckpt/.json path")
    overrides = {k: v for k, v in (("epochs", getattr(args, "epochs", None)),
                                   ("learning_rate", getattr(args, "lr", None)),
                                   ("batch_size", getattr(args, "batch_size", None))) if v is not None}
    cfg.train = TrainConfig.from_dict({**cfg.train.to_dict(), **overrides, "seed": cfg.seed})
    if getattr(args, "manifest", None):
        cfg.paths["manifests"] = list(args.manifest)
    for key in ("report_dir", "cache_dir", "checkpoint_dir"):
        if getattr(args, key, None):
            cfg.paths[key] = getattr(args, key)
    return cfg


def _manifests(cfg):
    if not cfg.paths.get("manifests"):
        raise argparse.ArgumentTypeError("no manifest given (use --manifest or paths.manifests)")
    return [load_manifest(p) for p in cfg.paths["manifests"]]


def _store(cfg):
    from .features import FeatureStore

    return FeatureStore(cfg.mel, cfg.paths.get("cache_dir"))


def _load_model(path):
    from .checkpoint import load_checkpoint
    from .ensemble import load_spec

    return load_spec(path) if path.endswith(".json") else load_checkpoint(path)


def _model_for(cfg, name="init"):
    from .vit import VisionTransformer

    if cfg.paths.get("model"):
        return _load_model(cfg.paths["model"])
    return VisionTransformer(cfg.model, seed=sub_seed(cfg.seed, name))


def _model_id(cfg):
    if cfg.paths.get("model"):
        return os.path.basename(cfg.paths["model"])
    return f"{cfg.model.variant}-d{cfg.model.embed_dim}-l{cfg.model.depth}"


def write_report(subcommand, cfg, result):
    report_dir = cfg.paths.get("report_dir") or "reports"
    os.makedirs(report_dir, exist_ok=True)
    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    path = os.path.join(report_dir, f"{subcommand}-{cfg.seed}-{stamp}.json")
    doc = {"subcommand": subcommand, "version": __version__, "config": cfg.to_dict(), "result": result}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _emit(args, cfg, result):
    path = write_report(args.command, cfg, result)
    print(json.dumps({"config": cfg.to_dict()}, sort_keys=True))
    print(f"report: {path}")


def cmd_prep(args, cfg):
    store = _store(cfg)
    counts = []
    for m in _manifests(cfg):
        store.images(m)
        counts.append(len(m))
    stats = store.stats()
    print(f"featurized {sum(counts)} clips: {stats['misses']} computed, {stats['hits']} cached")
    _emit(args, cfg, {"n_clips": sum(counts), "cache_hits": stats["hits"], "cache_misses": stats["misses"]})


def _fit_and_save(cfg, manifest, name, store):
    from .checkpoint import save_checkpoint
    from .training import train

    model = _model_for(cfg, f"init-{name}")
    if not hasattr(model, "params"):
        raise SERError("training needs a single model, not an ensemble")
    result = train(model.copy(), manifest, cfg.train, store)
    os.makedirs(cfg.paths["checkpoint_dir"], exist_ok=True)
    ckpt = os.path.join(cfg.paths["checkpoint_dir"], f"{name}.ckpt")
    save_checkpoint(result.model, ckpt, {"dataset": name, "seed": cfg.seed})
    result.write_trace(os.path.join(cfg.paths["checkpoint_dir"], f"{name}.trace.jsonl"))
    return {"checkpoint": ckpt, "n_train": len(manifest), "trace": result.trace}


def cmd_train(args, cfg):
    from .audio import DatasetManifest

    store = _store(cfg)
    out = {}
    for m in _manifests(cfg):
        for tag in sorted(m.tag_counts()):
            sub = DatasetManifest([e for e in m.entries if e.dataset_tag == tag])
            out[tag] = _fit_and_save(cfg, sub, tag, store)
    _emit(args, cfg, {"models": out})


def cmd_train_mix(args, cfg):
    from .training import mix_datasets

    union = mix_datasets(_manifests(cfg))
    res = _fit_and_save(cfg, union, "mix", _store(cfg))
    res["tag_counts"] = union.tag_counts()
    _emit(args, cfg, res)


def cmd_kfold(args, cfg):
    from .evalkit import cross_validate
    from .training import mix_datasets

    manifest = mix_datasets(_manifests(cfg))
    images = _store(cfg).images(manifest)
    folds, mean_acc = cross_validate(_model_for(cfg), images, manifest.labels, manifest, cfg.train,
                                     cfg.split.k, cfg.seed, _model_id(cfg))
    _emit(args, cfg, {"folds": [r.to_dict() for r in folds], "mean_accuracy": mean_acc})


def cmd_ensemble(args, cfg):
    from .checkpoint import load_checkpoint
    from .ensemble import Ensemble, load_spec, save_spec
    from .evalkit import evaluate

    if args.members:
        ens = Ensemble([load_checkpoint(p) for p in args.members], args.kind, args.tags)
        if args.out:
            save_spec(ens, args.out, os.path.join(os.path.dirname(os.path.abspath(args.out)), "members"))
    elif args.spec:
        ens = load_spec(args.spec)
    else:
        raise argparse.ArgumentTypeError("give --spec or --members")
    result = {"kind": ens.kind, "n_members": len(ens), "flops_gmac": ens.flops()}
    if cfg.paths.get("manifests"):
        from .training import mix_datasets

        manifest = mix_datasets(_manifests(cfg))
        report = evaluate(ens, _store(cfg).images(manifest), manifest.labels, args.spec or args.out or "ensemble",
                          cfg.seed, measure_latency=not args.no_timing)
        result["report"] = report.to_dict()
    _emit(args, cfg, result)


def cmd_personalize(args, cfg):
    from .evalkit import personalize_run

    manifests = _manifests(cfg)
    if len(manifests) != 1:
        raise argparse.ArgumentTypeError("personalize takes exactly one participant manifest")
    report, _ = personalize_run(manifests[0], _model_for(cfg), cfg.train, cfg.seed, _store(cfg), cfg.split,
                                _model_id(cfg), measure_latency=not args.no_timing)
    print(f"accuracy {report.accuracy:.4f}  f1 {report.f1:.4f}  flops {report.flops_gmac:.4f} GMac")
    _emit(args, cfg, report.to_dict())


def cmd_flops(args, cfg):
    from .vit import count_flops

    model = cfg.model
    if cfg.paths.get("model"):
        m = _load_model(cfg.paths["model"])
        value = m.flops(args.mode)
    else:
        value = count_flops(model, args.mode)
    print(f"{value:.4f} GMac ({args.mode})")
    _emit(args, cfg, {"flops_gmac": value, "mode": args.mode})


def cmd_bench(args, cfg):
    from .evalkit import measure_inference

    model = _model_for(cfg)
    rng = np.random.default_rng(sub_seed(cfg.seed, "bench"))
    size = cfg.model.image_size if not cfg.paths.get("model") else (
        model.config if hasattr(model, "config") else model.members[0].config).image_size
    samples = rng.random((args.n_samples, size, size, 3), dtype=np.float32)
    t = measure_inference(model, samples, args.warmup, args.reps)
    print(f"{t.mean_ms:.3f} +- {t.std_ms:.3f} ms/sample over {t.reps} reps")
    _emit(args, cfg, {"mean_inference_ms": t.mean_ms, "std_ms": t.std_ms, "reps": t.reps,
                      "n_samples": t.n_samples, "warmup": args.warmup})


def cmd_eval(args, cfg):
    from .evalkit import evaluate
    from .training import mix_datasets

    if not cfg.paths.get("model"):
        raise argparse.ArgumentTypeError("eval needs --model <checkpoint or ensemble spec>")
    manifest = mix_datasets(_manifests(cfg))
    report = evaluate(_load_model(cfg.paths["model"]), _store(cfg).images(manifest), manifest.labels,
                      _model_id(cfg), cfg.seed, measure_latency=not args.no_timing)
    print(f"accuracy {report.accuracy:.4f}  f1 {report.f1:.4f}")
    _emit(args, cfg, report.to_dict())


COMMANDS = {
    "prep": (cmd_prep, "featurize manifest clips into the tensor cache"),
    "train": (cmd_train, "train one model per dataset tag"),
    "train-mix": (cmd_train_mix, "train one model on the union of all manifests"),
    "kfold": (cmd_kfold, "stratified k-fold cross-validation"),
    "ensemble": (cmd_ensemble, "build and/or evaluate a logit-averaging ensemble"),
    "personalize": (cmd_personalize, "split, fine-tune and score one participant"),
    "flops": (cmd_flops, "forward-pass cost in GMac"),
    "bench": (cmd_bench, "inference latency"),
    "eval": (cmd_eval, "score a checkpoint or ensemble on a manifest"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ser", description="Speech emotion recognition toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="run-config JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--model", help="preset name or .ckpt / ensemble .json path")
        p.add_argument("--manifest", action="append", help="manifest CSV (repeatable)")
        p.add_argument("--report-dir", dest="report_dir")
        p.add_argument("--cache-dir", dest="cache_dir")
        p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
        p.add_argument("--no-timing", action="store_true",
                       help="skip latency measurement so reports are byte-reproducible")
        if name in ("train", "train-mix", "kfold", "personalize"):
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--batch-size", dest="batch_size", type=int)
        if name == "flops":
            p.add_argument("--mode", choices=FLOP_MODES, default="parametric_mac")
        if name == "bench":
            p.add_argument("--n-samples", dest="n_samples", type=int, default=4)
            p.add_argument("--warmup", type=int, default=1)
            p.add_argument("--reps", type=int, default=5)
        if name == "ensemble":
            p.add_argument("--spec", help="ensemble spec JSON to evaluate")
            p.add_argument("--members", nargs="+", help="member checkpoints to combine")
            p.add_argument("--kind", choices=("homogeneous", "per_dataset"), default="homogeneous")
            p.add_argument("--tags", nargs="+", help="dataset tag per member (per_dataset)")
            p.add_argument("--out", help="where to write the built spec")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve(args)
        COMMANDS[args.command][0](args, cfg)
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"ser: error: {exc}", file=sys.stderr)
        return 2
    except (SERError, ValueError, OSError) as exc:
        print(f"ser: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
