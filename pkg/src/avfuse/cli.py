"""Command-line entry point: ``avfuse <command> [options]``.

Every run writes ``manifest.json`` into its output directory holding the
resolved config, seed, toolkit version, command arguments and a ``partial``
flag that stays true unless the command finished.  ``avfuse rerun MANIFEST``
repeats a run from its manifest alone.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from avfuse import __version__
from avfuse.config import ConfigError, ExperimentConfig, apply_overrides, from_json, _read
from avfuse.data.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from avfuse.data.export import export_dataset, import_dataset
from avfuse.data.synthetic import MODALITIES, generate_synthetic
from avfuse.diagnostics import (REFERENCE_FLOPS, count_flops, estimate_epoch_flops, export_flops,
                                export_report, flops_ledger_from_json, health_report, inject_abnormal)
from avfuse.errors import ChecksumError, ContractError, NonFiniteError
from avfuse.fusion.probe import linear_probe
from avfuse.fusion.strategies import ABRI_TARGETS, STRATEGIES, run_strategy, write_metrics
from avfuse.models import Classifier, MultiModalNet
from avfuse.numerics.tensor import Tensor
from avfuse.reactivation import prepare_finetune, train_classifier

EXIT_OK, EXIT_ERROR, EXIT_CONTRACT = 0, 1, 2
# arguments that select config/output rather than describe the run itself
_RUNNER_ARGS = {"command", "config", "set", "out", "seeds", "jobs", "func"}


class Run:
    """Output directory and manifest of one seed replica."""

    def __init__(self, directory, command: str, args: dict, config: ExperimentConfig):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.args = args
        self.config = config
        self.outputs: list[str] = []

    def path(self, name: str) -> Path:
        if name not in self.outputs:
            self.outputs.append(name)
        return self.dir / name

    def manifest(self, partial: bool, error: str | None = None) -> Path:
        doc = {
            "toolkit": "avfuse",
            "version": __version__,
            "command": self.command,
            "args": self.args,
            "seed": self.config.seed,
            "config": self.config.to_json(),
            "partial": partial,
            "error": error,
            "outputs": list(self.outputs),
        }
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------- helpers

def _say(msg: str) -> None:
    print(msg, flush=True)


def load_data(cfg: ExperimentConfig, data_dir: str | None = None, snr: dict[str, float] | None = None):
    if data_dir:
        return import_dataset(data_dir)
    overrides = {f"snr_{m}": v for m, v in (snr or {}).items() if v is not None}
    return generate_synthetic(cfg.synthetic_spec(**overrides))


def _checkpoint_modality(path, fallback: str | None) -> str:
    meta = read_checkpoint(path).meta
    m = fallback or meta.get("modality")
    if m not in MODALITIES:
        raise ContractError(f"cannot tell which modality {path} belongs to; pass --modality")
    return m


def _probe_forward(model, data, modality: str):
    """Probe inputs and forward function for either model kind."""
    if isinstance(model, MultiModalNet):
        xa, xv = data.train.x_a, data.train.x_v
        return np.arange(len(xa)), (lambda m, idx: m(Tensor(xa[idx]), Tensor(xv[idx])))
    return data.train.modality(modality), None


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_gen_data(run: Run, cfg: ExperimentConfig, a) -> None:
    spec = cfg.synthetic_spec()
    data = generate_synthetic(spec)
    export_dataset(data, run.path("dataset"), spec)
    _say(f"dataset: {len(data.train)}/{len(data.val)}/{len(data.test)} samples -> {run.dir / 'dataset'}")


def cmd_pretrain(run: Run, cfg: ExperimentConfig, a) -> None:
    t = cfg.section("pretrain")
    m = a.modality or t.modality
    data = load_data(cfg, a.data, {m: t.snr})
    x = data.train.modality(m)
    model = Classifier(cfg.model_config(m, x.shape[1:], data.train.n_classes), seed=cfg.seed)
    rows: list[dict] = []
    train_classifier(model, data, m, t.epochs, t.optim(), cfg.seed, "pretrain", rows, f"seed{cfg.seed}")
    write_metrics(rows, run.path("metrics.csv"))
    save_checkpoint(model, run.path("model.ckpt"), {"stage": "pretrain", "modality": m, "seed": cfg.seed})
    _say(f"pretrain[{m}] test accuracy {rows[-1]['accuracy']:.4f}")


def cmd_inject(run: Run, cfg: ExperimentConfig, a) -> None:
    d = cfg.section("diagnostics")
    ckpt = read_checkpoint(a.checkpoint)
    model = load_checkpoint(a.checkpoint)
    fraction = d.inject_fraction if a.fraction is None else a.fraction
    sick, provenance = inject_abnormal(model, fraction, d.inject_magnitude, d.inject_sign, cfg.seed)
    meta = {k: v for k, v in ckpt.meta.items() if k != "model"}
    meta.update({"stage": "inject-abnormal", "source": str(a.checkpoint)})
    save_checkpoint(sick, run.path("model.ckpt"), meta)
    _write_json(run.path("provenance.json"),
                {"fraction": fraction, "seed": cfg.seed, "layers": provenance})
    _say(f"injected {sum(len(p['channels']) for p in provenance)} channels over {len(provenance)} layers")


def cmd_finetune(run: Run, cfg: ExperimentConfig, a) -> None:
    t = cfg.section("finetune")
    d = cfg.section("diagnostics")
    src = _checkpoint_modality(a.checkpoint, None) if not a.cross_modal else None
    m = a.modality or t.modality
    if src is not None and src != m:
        raise ContractError(f"checkpoint was trained on modality {src!r}, fine-tuning targets {m!r}; "
                            "pass --cross-modal")
    data = load_data(cfg, a.data, {m: t.snr})
    base = load_checkpoint(a.checkpoint)
    if not isinstance(base, Classifier):
        raise ContractError("finetune expects a uni-modal classifier checkpoint")
    x = data.train.modality(m)
    prep = dict(init_alpha=t.init_alpha, new_head=t.new_head or a.cross_modal, cross_modal=a.cross_modal)
    probes = x[:d.probe_samples]
    # health of the loaded weights, before any ABRi wrapping
    plain = prepare_finetune(base, x.shape[1:], data.train.n_classes, cfg.seed, abri=False, **prep)
    before = health_report(plain, probes, d.threshold, d.dead_fraction, d.activation_tol, "before")
    model = prepare_finetune(base, x.shape[1:], data.train.n_classes, cfg.seed, abri=a.abri == "on", **prep)
    rows: list[dict] = []
    train_classifier(model, data, m, t.epochs, t.optim(), cfg.seed, "finetune", rows, f"seed{cfg.seed}")
    after = health_report(model, probes, d.threshold, d.dead_fraction, d.activation_tol, "after")
    write_metrics(rows, run.path("metrics.csv"))
    export_report(before, run.path("health_before.json"))
    export_report(after, run.path("health.json"))
    save_checkpoint(model, run.path("model.ckpt"),
                    {"stage": "finetune", "modality": m, "seed": cfg.seed, "abri": a.abri})
    _write_json(run.path("summary.json"), {
        "modality": m, "abri": a.abri, "cross_modal": a.cross_modal,
        "test_accuracy": rows[-1]["accuracy"], "dead_before": before.n_dead, "dead_after": after.n_dead,
    })
    _say(f"finetune[{m}, abri={a.abri}] test accuracy {rows[-1]['accuracy']:.4f}, "
         f"dead channels {before.n_dead} -> {after.n_dead}")


def cmd_diagnose(run: Run, cfg: ExperimentConfig, a) -> None:
    d = cfg.section("diagnostics")
    model = load_checkpoint(a.checkpoint)
    m = None if isinstance(model, MultiModalNet) else _checkpoint_modality(a.checkpoint, a.modality)
    data = load_data(cfg, a.data)
    probes, forward = _probe_forward(model, data, m)
    report = health_report(model, probes[:d.probe_samples], d.threshold, d.dead_fraction, d.activation_tol,
                           Path(a.checkpoint).name, forward)
    export_report(report, run.path("health.json"))
    export_report(report, run.path("health.csv"), "csv")
    _say(f"abnormal ratio {report.overall_ratio:.4f}, dead channels {report.n_dead}")


def cmd_fusion_tune(run: Run, cfg: ExperimentConfig, a) -> None:
    plan = cfg.section("plan", strategy=a.strategy, abri_target=a.abri_target)
    policy = cfg.section("masking")
    data = load_data(cfg, a.data)
    k = int(max(data.train.labels.max(), data.test.labels.max())) + 1
    configs = {m: cfg.model_config(m, data.train.modality(m).shape[1:], k) for m in MODALITIES}
    res = run_strategy(plan, data, policy, configs, run_id=f"seed{cfg.seed}",
                       checkpoint_dir=run.dir if plan.strategy != "JT" else None)
    if plan.strategy != "JT":
        run.outputs += ["stage1_a.ckpt", "stage1_v.ckpt"]
    write_metrics(res.rows, run.path("metrics.csv"))
    if res.ledger is not None:
        res.ledger.save(run.path("ledger.json"))
    if isinstance(res.model, MultiModalNet):
        save_checkpoint(res.model, run.path("model.ckpt"), {"stage": plan.strategy, "seed": cfg.seed})
    summary = {"strategy": plan.strategy, "abri_target": plan.abri_target, "test": res.test, "probe": {}}
    for m in MODALITIES:
        tr, te = data.train.modality(m), data.test.modality(m)
        summary["probe"][m] = linear_probe(res.encoders[m], tr, data.train.labels, te, data.test.labels)
        if res.stage1:
            summary["probe"][f"stage1_{m}"] = linear_probe(res.stage1[m].encoder, tr, data.train.labels,
                                                           te, data.test.labels)
    _write_json(run.path("summary.json"), summary)
    _say(f"{plan.strategy} test accuracy {res.test['accuracy']:.4f}")


def cmd_probe(run: Run, cfg: ExperimentConfig, a) -> None:
    model = load_checkpoint(a.checkpoint)
    if isinstance(model, MultiModalNet):
        if a.modality not in MODALITIES:
            raise ContractError("probing a multimodal checkpoint needs --modality a|v")
        m, encoder = a.modality, getattr(model, f"encoder_{a.modality}")
    else:
        m, encoder = _checkpoint_modality(a.checkpoint, a.modality), model.encoder
    data = load_data(cfg, a.data)
    acc = linear_probe(encoder, data.train.modality(m), data.train.labels,
                       data.test.modality(m), data.test.labels, epochs=a.epochs)
    _write_json(run.path("probe.json"), {"checkpoint": str(a.checkpoint), "modality": m, "accuracy": acc})
    _say(f"probe[{m}] accuracy {acc:.4f}")


def cmd_flops(run: Run, cfg: ExperimentConfig, a) -> None:
    ledgers = {}
    if a.ledger:
        ledgers[Path(a.ledger).stem] = flops_ledger_from_json(json.loads(Path(a.ledger).read_text()))
    for name in a.table or ([] if a.ledger else sorted(REFERENCE_FLOPS)):
        if name not in REFERENCE_FLOPS:
            raise ContractError(f"unknown table {name!r}; known: {sorted(REFERENCE_FLOPS)}")
        t = REFERENCE_FLOPS[name]
        ledgers[name] = count_flops(t["phases"], t["reference"], t["comparison"])
    with run.path("ratios.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ledger", "reference_total", "comparison_total", "ratio"])
        for name, led in ledgers.items():
            w.writerow([name, repr(led.reference_total), repr(led.comparison_total), repr(led.ratio)])
            _say(f"{name}: ratio {led.ratio:.4f}")
    for name, led in ledgers.items():
        export_flops(led, run.path(f"phases_{name}.csv"))
    if a.estimate:
        spec = cfg.synthetic_spec()
        n = spec.samples_per_class["train"] * spec.n_classes
        with run.path("estimate.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "abri", "flops_per_epoch"])
            for m in MODALITIES:
                mc = cfg.model_config(m, getattr(spec, f"shape_{m}"), spec.n_classes)
                for abri in (False, True):
                    w.writerow([f"encoder_{m}", int(abri), estimate_epoch_flops(mc, n, abri=abri)])


def summarize_metrics(paths: list[Path]) -> list[dict]:
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for p in paths:
        with Path(p).open(newline="") as fh:
            for r in csv.DictReader(fh):
                groups[(r["strategy"], r["stage"], r["split"], int(r["epoch"]))].append(r)
    out = []
    for key in sorted(groups):
        rows = groups[key]
        rec = dict(zip(("strategy", "stage", "split", "epoch"), key))
        rec["n"] = len(rows)
        for col in ("loss", "accuracy", "map"):
            v = np.array([float(r[col]) for r in rows])
            rec[f"{col}_mean"] = float(v.mean())
            rec[f"{col}_std"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        out.append(rec)
    return out


def cmd_report(run: Run, cfg: ExperimentConfig, a) -> None:
    paths = sorted({Path(p) for pattern in a.inputs for p in glob.glob(pattern, recursive=True)})
    if not paths:
        raise ContractError(f"no metrics files match {a.inputs}")
    rows = summarize_metrics(paths)
    cols = ["strategy", "stage", "split", "epoch", "n", "loss_mean", "loss_std", "accuracy_mean",
            "accuracy_std", "map_mean", "map_std"]
    with run.path("summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    for r in rows:
        if r["split"] == "test":
            _say(f"{r['strategy']:>10} {r['stage']:>8}: accuracy {r['accuracy_mean']:.4f} "
                 f"+- {r['accuracy_std']:.4f} (n={r['n']})")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "inject-abnormal": cmd_inject,
    "finetune": cmd_finetune,
    "diagnose": cmd_diagnose,
    "fusion-tune": cmd_fusion_tune,
    "probe": cmd_probe,
    "flops": cmd_flops,
    "report": cmd_report,
}


# ---------------------------------------------------------------- runner

def _run_one(command: str, args: dict, config_doc: dict, out_dir: str) -> int:
    cfg = from_json(config_doc)
    run = Run(out_dir, command, args, cfg)
    run.manifest(partial=True)
    try:
        COMMANDS[command](run, cfg, argparse.Namespace(**args))
    except (ContractError, ChecksumError, NonFiniteError, OSError) as exc:
        msg = f"{type(exc).__name__}: {exc}"
        run.manifest(partial=True, error=msg)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONTRACT
    run.manifest(partial=False)
    return EXIT_OK


def parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        seeds = []
    if not seeds or min(seeds) < 0:
        raise ConfigError(f"--seeds: expected non-negative integers like 0,1,2 or 0-4, got {text!r}")
    return seeds


def dispatch(command: str, args: dict, config_doc: dict, out_dir: str, seeds: list[int] | None,
             jobs: int = 1) -> int:
    base = from_json(config_doc)
    if not seeds:
        return _run_one(command, args, base.to_json(), out_dir)
    if len(seeds) == 1:
        return _run_one(command, args, base.with_seed(seeds[0]).to_json(), out_dir)
    tasks = [(command, args, base.with_seed(s).to_json(), str(Path(out_dir) / f"seed_{s}")) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            codes = list(pool.map(_run_one, *zip(*tasks)))
    else:
        codes = [_run_one(*t) for t in tasks]
    return max(codes)


def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="experiment config JSON (defaults apply when omitted)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("--seeds", help="seed replicas, e.g. 0,1,2 or 0-4; each gets a seed_<n> subdirectory")
    p.add_argument("--jobs", type=int, default=1, help="parallel seed replicas")
    if data:
        p.add_argument("--data", help="dataset directory from gen-data (default: generate from config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avfuse", formatter_class=argparse.RawDescriptionHelpFormatter,
                                     description="BatchNorm re-initialization and two-stage fusion tuning "
                                                 "on synthetic paired-modality data.")
    parser.add_argument("--version", action="version", version=f"avfuse {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset into <out>/dataset")
    _add_common(p, data=False)

    p = sub.add_parser("pretrain", help="uni-modal training -> checkpoint")
    _add_common(p)
    p.add_argument("--modality", choices=MODALITIES, help="default: pretrain.modality")

    p = sub.add_parser("inject-abnormal", help="checkpoint -> pathological checkpoint + provenance")
    _add_common(p, data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fraction", type=float, help="default: diagnostics.inject_fraction")

    p = sub.add_parser("finetune", help="checkpoint -> fine-tuned checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--abri", choices=("on", "off"), default="off")
    p.add_argument("--cross-modal", action="store_true",
                   help="fine-tune on the other modality, resizing the input layer if needed")
    p.add_argument("--modality", choices=MODALITIES, help="default: finetune.modality")

    p = sub.add_parser("diagnose", help="checkpoint + probe data -> health report")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--modality", choices=MODALITIES, help="default: read from the checkpoint")

    p = sub.add_parser("fusion-tune", help="multimodal training with one strategy")
    _add_common(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="FusT")
    p.add_argument("--abri-target", choices=ABRI_TARGETS, default="none")

    p = sub.add_parser("probe", help="checkpoint + data -> linear-probe accuracy")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--modality", choices=MODALITIES)
    p.add_argument("--epochs", type=int, default=300)

    p = sub.add_parser("flops", help="FLOPs ledger JSON (or built-in tables) -> ratios CSV")
    _add_common(p, data=False)
    p.add_argument("--ledger", help="JSON with phases, reference and comparison")
    p.add_argument("--table", action="append", choices=sorted(REFERENCE_FLOPS),
                   help="built-in table; repeatable (default: all when --ledger is absent)")
    p.add_argument("--estimate", action="store_true", help="also estimate per-epoch FLOPs of the encoders")

    p = sub.add_parser("report", help="aggregate metrics CSVs across seeds -> mean/std summary CSV")
    _add_common(p, data=False)
    p.add_argument("inputs", nargs="+", help="metrics CSV paths or glob patterns")

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)

    parser.epilog = "\n".join(f"--- {name} ---\n{sp.format_help()}" for name, sp in sub.choices.items())
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if not ns.command:
        parser.print_help()
        return EXIT_OK
    try:
        if ns.command == "rerun":
            doc = _read(ns.manifest)
            if doc.get("toolkit") != "avfuse" or "config" not in doc:
                raise ConfigError(f"{ns.manifest}: not a run manifest")
            return _run_one(doc["command"], doc["args"], doc["config"], ns.out)
        doc = _read(ns.config) if ns.config else {}
        doc = apply_overrides(doc, ns.set)
        cfg = from_json(doc)
        seeds = parse_seeds(ns.seeds) if ns.seeds else None
        if ns.jobs < 1:
            raise ConfigError("--jobs: must be >= 1")
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    args = {k: v for k, v in vars(ns).items() if k not in _RUNNER_ARGS}
    for key in ("checkpoint", "data", "ledger"):
        if args.get(key):
            args[key] = str(Path(args[key]).resolve())
    out = ns.out or cfg.out_dir
    return dispatch(ns.command, args, cfg.to_json(), out, seeds, ns.jobs)


if __name__ == "__main__":
    sys.exit(main())
