"""Command-line entry point: steerlab <subcommand> [options]."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..container import atomic_write_text
from ..errors import MissingArtifact, SteerlabError
from ..toymodel import load_model, save_model
from .config import ExperimentConfig, dump_config, load_config, parse_config_text
from .corpus import generate_corpus, save_dataset
from .pipeline import (
    DEFAULT_TAUS,
    Artifacts,
    Experiment,
    ablate,
    ablation_csv,
    dump_report,
    eval_report,
    export_pca,
    pca_csv,
    sweep_csv,
    sweep_tau,
    tradeoff_csv,
    tradeoff_rows,
)

log = logging.getLogger("steerlab")

MODEL_FILE = "model.bin"
ARTIFACT_FILE = "artifacts.bin"


def _overrides(pairs: list[str]) -> dict:
    return parse_config_text("\n".join(pairs))


def _config(args) -> ExperimentConfig:
    overrides = _overrides(args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    return load_config(args.config, overrides)


def _experiment(cfg: ExperimentConfig, need_artifacts: bool = True) -> tuple[Experiment, Artifacts | None]:
    out = Path(cfg.out_dir)
    model_path, art_path = out / MODEL_FILE, out / ARTIFACT_FILE
    if not model_path.exists():
        raise MissingArtifact(f"no planted model at {model_path}; run `steerlab build` first")
    ex = Experiment(cfg, model=load_model(model_path))
    if not need_artifacts:
        return ex, None
    if not art_path.exists():
        raise MissingArtifact(f"no artifacts at {art_path}; run `steerlab build` first")
    return ex, Artifacts.load(art_path)


def _emit(text: str, path: str | None) -> None:
    if path:
        atomic_write_text(path, text)
        log.info("wrote %s", path)
    else:
        sys.stdout.write(text)


def cmd_gen_corpus(args) -> None:
    records = generate_corpus(args.n_records, args.forget_ratio, args.seed or 0)
    save_dataset(args.out, records)
    log.info("wrote %d records to %s", len(records), args.out)


def cmd_build(args) -> None:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / MODEL_FILE
    if model_path.exists():
        ex = Experiment(cfg, model=load_model(model_path))
    else:
        ex = Experiment(cfg)
        save_model(model_path, ex.model)
    arts = ex.build()
    arts.save(out / ARTIFACT_FILE)
    atomic_write_text(out / "config.txt", dump_config(cfg))
    for key, a in sorted(arts.subspaces.items()):
        log.info("%s layer %d: rank %d", key[0], key[1], a.rank)


def cmd_eval(args) -> None:
    cfg = _config(args)
    ex, arts = _experiment(cfg)
    report = eval_report(ex, arts)
    _emit(dump_report(report), args.report or str(Path(cfg.out_dir) / "report.json"))


def cmd_sweep_tau(args) -> None:
    cfg = _config(args)
    ex, arts = _experiment(cfg)
    taus = [float(t) for t in args.taus.split(",")] if args.taus else DEFAULT_TAUS
    _emit(sweep_csv(sweep_tau(ex, arts, taus)), args.out)


def cmd_ablate(args) -> None:
    cfg = _config(args)
    ex, arts = _experiment(cfg)
    _emit(ablation_csv(ablate(ex, arts)), args.out)


def cmd_export_pca(args) -> None:
    cfg = _config(args)
    ex, arts = _experiment(cfg)
    _emit(pca_csv(export_pca(ex, arts, args.layer)), args.out)


def cmd_tradeoff(args) -> None:
    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.reports]
    if len(labels) != len(args.reports):
        raise SystemExit("--labels must name every report")
    reports = {}
    for label, path in zip(labels, args.reports):
        with open(path, encoding="utf-8") as f:
            reports[label] = json.load(f)
    _emit(tradeoff_csv(tradeoff_rows(reports, args.with_vanilla)), args.out)


def cmd_theory_check(args) -> None:
    cfg = _config(args)
    ex, arts = _experiment(cfg)
    result = {
        "forget_and_retain": ex.theory_check(arts).to_dict(),
        "synthetic_retain": ex.synthetic_retain_check(arts).to_dict(),
    }
    _emit(json.dumps(result, sort_keys=True, indent=2) + "\n", args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steerlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.set_defaults(func=func)
        return p

    p = sub.add_parser("gen-corpus", help="write the bundled synthetic corpus as line-delimited JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--n-records", type=int, default=400)
    p.add_argument("--forget-ratio", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_corpus)

    experiment_command("build", cmd_build, "plant the toy model (if needed) and build subspace artifacts")
    p = experiment_command("eval", cmd_eval, "vanilla and steered evaluation over all splits")
    p.add_argument("--report", help="report path (default: <out_dir>/report.json)")
    p = experiment_command("sweep-tau", cmd_sweep_tau, "evaluate over a grid of gate thresholds")
    p.add_argument("--taus", help="comma-separated thresholds")
    p.add_argument("--out")
    p = experiment_command("ablate", cmd_ablate, "run the ablation matrix")
    p.add_argument("--out")
    p = experiment_command("export-pca", cmd_export_pca, "2-D PCA of intervention-layer states")
    p.add_argument("--layer", type=int)
    p.add_argument("--out")
    p = experiment_command("theory-check", cmd_theory_check, "first-order loss-change checks")
    p.add_argument("--out")

    p = sub.add_parser("tradeoff", help="forget/retain accuracy rows from eval reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--labels")
    p.add_argument("--with-vanilla", action="store_true", help="prepend the planted model's row")
    p.add_argument("--out")
    p.set_defaults(func=cmd_tradeoff)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (SteerlabError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
