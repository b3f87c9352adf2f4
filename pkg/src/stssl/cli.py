"""Command-line entry point: generate-data, train, evaluate, probe, plot.

Exit codes: 0 success, 1 user error (bad config, missing file, malformed CSV),
2 numerical abort during training.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import generate_synthetic
from .evaluation import (evaluate, make_probe_grid, ood_metadata_eval, predict_logits, prior_probe,
                         report_from_logits, sample_ood_locations)
from .experiments import (ConfigError, ExperimentConfig, dry_run, get_preset, load_config, load_data,
                          preset_names, save_config)
from .model import CheckpointError, read_container
from .plotting import PlotInputError, csv_kind, plot_probe, plot_pseudo_curves, write_pseudo_csv
from .train import NumericalError, TrainState, load_checkpoint, run_training

log = logging.getLogger("stssl")

EXIT_OK, EXIT_USER, EXIT_NUMERICAL = 0, 1, 2


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which is reserved for numerical aborts
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Helpers


def _resolve_config(args, checkpoint_meta: dict | None = None) -> ExperimentConfig:
    if args.config and args.preset:
        raise UserError("give either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = get_preset(args.preset)
    elif checkpoint_meta and "experiment" in checkpoint_meta.get("extra", {}):
        cfg = ExperimentConfig.from_dict(checkpoint_meta["extra"]["experiment"])
    else:
        raise UserError("no experiment given: use --config PATH or --preset NAME")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UserError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _checkpoint_meta(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"checkpoint not found: {p}")
    _, meta = read_container(p)
    return meta


def _write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_state(args, cfg: ExperimentConfig) -> TrainState:
    try:
        return load_checkpoint(args.checkpoint, cfg.train_config())
    except FileNotFoundError as exc:
        raise UserError(f"checkpoint not found: {args.checkpoint}") from exc


# ---------------------------------------------------------------------------
# Commands


def cmd_generate_data(args) -> int:
    cfg = _resolve_config(args)
    if cfg.dataset.source != "synthetic":
        raise UserError(f"preset/config {cfg.name!r} reads existing manifests; nothing to generate")
    world = cfg.dataset.synthetic
    if args.seed is not None:
        world = replace(world, seed=args.seed)
    out = _out_dir(args)
    h = cfg.hash
    subsets = {"train": world, "test": replace(world, samples_total=cfg.dataset.test_samples)}
    for subset, wcfg in subsets.items():
        manifest = generate_synthetic(wcfg, out, subset, extra_info={"config_hash": h})
        csv_path = out / f"{subset}.csv"
        n_lab = np.bincount([c for r in manifest.records for c in r.labels], minlength=manifest.num_classes)
        print(f"{subset}: {len(manifest)} records, {manifest.num_classes} classes ({manifest.task_mode}), "
              f"{manifest.image_size}px -> {csv_path}")
        print(f"  label counts: {n_lab.tolist()}")
        print(f"  sha256 {_sha256(csv_path)}")
        if "note" in manifest.info:
            print(f"  note: {manifest.info['note']}")
    print(f"config_hash {h}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    h = cfg.hash
    save_config(cfg, out / "config.yaml")
    if args.dry_run:
        res = dry_run(cfg, shrink_model=not args.full_size, out_dir=out)
        print(f"dry run ok: {cfg.name} ({res.state.step} step, networks {sorted(res.state.models)}) "
              f"config_hash {h}")
        return EXIT_OK
    tcfg = cfg.train_config()
    data = load_data(cfg)
    deployed = tcfg.deployed_role

    def eval_fn(state: TrainState) -> dict:
        rep = evaluate(state.ema_model(deployed), data.test, cfg.eval.batch_size)
        return {"score": rep.score, "accuracy": rep.accuracy, "mAP": rep.mAP}

    res = run_training(tcfg, data.train, data.labeled_ids, data.unlabeled_ids, out, eval_fn=eval_fn,
                       resume_from=args.resume, config_hash=h, checkpoint_extra={"experiment": cfg.to_dict()})
    write_pseudo_csv(res.metrics, out / "pseudo.csv", h)
    summary = {"config_hash": h, "name": cfg.name, "steps": res.state.step, "seconds": res.seconds,
               "best_score": res.best_score, "checkpoints": {k: str(v) for k, v in res.checkpoints.items()},
               "deployed_role": deployed}
    for role in res.state.models:
        summary[f"test/{role}"] = evaluate(res.state.ema_model(role), data.test, cfg.eval.batch_size).to_dict()
    _write_json(out / "summary.json", summary)
    rep = summary[f"test/{deployed}"]
    print(f"trained {cfg.name}: {res.state.step} steps in {res.seconds:.1f}s; {deployed} score {rep['score']:.4f}; "
          f"config_hash {h}")
    return EXIT_OK


def _per_class_rows(report, role: str, h: str) -> list[list]:
    return [[role, c, "" if ap is None else repr(float(ap)), h] for c, ap in enumerate(report.per_class_ap)]


def cmd_evaluate(args) -> int:
    meta = _checkpoint_meta(args.checkpoint)
    cfg = _resolve_config(args, meta)
    out = _out_dir(args)
    h = cfg.hash
    state = _load_state(args, cfg)
    data = load_data(cfg)
    models = {role: state.ema_model(role) for role in state.models}
    payload = {"config_hash": h, "checkpoint": str(args.checkpoint), "step": state.step, "reports": {}}
    rows = []
    for role, model in models.items():
        rep = evaluate(model, data.test, cfg.eval.batch_size)
        payload["reports"][role] = rep.to_dict()
        rows += _per_class_rows(rep, role, h)
    with (out / "report.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "class", "average_precision", "config_hash"])
        w.writerows(rows)
    _write_json(out / "report.json", payload)

    subs = sample_ood_locations(data.lat_range, data.lon_range, cfg.eval.ood_count, cfg.eval.ood_margin,
                                cfg.eval.ood_seed)
    component = cfg.eval.ood_component
    if component != "location":
        days = [float(d) for d in np.random.default_rng(cfg.eval.ood_seed).uniform(0, 365, len(subs))]
        subs = [replace(s, day_of_year=d) for s, d in zip(subs, days)]
    if "teacher" in models and "student" in models:
        ood = ood_metadata_eval(models["teacher"], models["student"], data.test, subs, component,
                                cfg.eval.batch_size)
        ood_payload = {"config_hash": h, **ood.to_dict()}
        table = ood.rows()
    else:
        role = next(iter(models))
        model = models[role]
        base = predict_logits(model, data.test, cfg.eval.batch_size)
        scores, same = [], True
        for s in subs:
            meta_arr = data.test.meta_array()
            meta_arr[:, 0], meta_arr[:, 1] = s.latitude, s.longitude
            if component != "location":
                meta_arr[:, 2] = s.day_of_year
            over = predict_logits(model, data.test, cfg.eval.batch_size, meta_arr)
            same &= bool((over == base).all())
            scores.append(report_from_logits(over, data.test).score)
        uses_meta = model.config.uses_metadata
        if not uses_meta and not same:
            raise AssertionError(f"{role} predictions changed under a metadata override")
        base_score = report_from_logits(base, data.test).score
        ood_payload = {"config_hash": h, "component": component, "model": role, "uses_metadata": uses_meta,
                       "baseline": base_score, "scores": scores, "invariant": same}
        table = [{"model": role, "metadata": uses_meta, "ood_component": "--", "score": base_score, "std": None},
                 {"model": role, "metadata": uses_meta, "ood_component": component,
                  "score": float(np.mean(scores)), "std": float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0}]
    _write_json(out / "ood.json", ood_payload)
    with (out / "ood.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "metadata", "ood_component", "score", "std", "config_hash"])
        for r in table:
            w.writerow([r["model"], r["metadata"], r["ood_component"], repr(float(r["score"])),
                        "" if r["std"] is None else repr(float(r["std"])), h])
    for role, rep in payload["reports"].items():
        print(f"{role}: score {rep['score']:.4f}")
    for r in table:
        std = "" if r["std"] is None else f" +- {r['std']:.4f}"
        print(f"  {r['model']:8s} ood={r['ood_component']:9s} {r['score']:.4f}{std}")
    print(f"config_hash {h}")
    return EXIT_OK


def cmd_probe(args) -> int:
    meta = _checkpoint_meta(args.checkpoint)
    cfg = _resolve_config(args, meta)
    out = _out_dir(args)
    state = _load_state(args, cfg)
    if "teacher" not in state.models:
        raise UserError("the probe needs a checkpoint with a metadata-consuming teacher")
    ev = cfg.eval
    if cfg.dataset.source == "synthetic":
        lat_range, lon_range = cfg.dataset.synthetic.lat_range, cfg.dataset.synthetic.lon_range
    else:
        lat_range, lon_range = load_data(cfg).lat_range, load_data(cfg).lon_range
    grid = make_probe_grid(lat_range, lon_range, ev.probe_margin, ev.probe_n_lat, ev.probe_n_lon,
                           ev.probe_n_days, ev.probe_day)
    res = prior_probe(state.ema_model("teacher"), grid, ev.probe_image_value, model_id=f"{cfg.name}@{state.step}")
    path = res.to_csv(out / "probe.csv", cfg.hash)
    print(f"probe: {len(grid.points)} points x {res.confidences.shape[1]} classes -> {path}; config_hash {cfg.hash}")
    return EXIT_OK


def cmd_plot(args) -> int:
    out = _out_dir(args)
    kinds = [csv_kind(p) for p in args.inputs]
    written = []
    if all(k == "probe" for k in kinds):
        for p in args.inputs:
            written.append(plot_probe(p, out / f"{Path(p).stem}-class{args.class_index}.png", args.class_index))
    elif all(k == "pseudo" for k in kinds):
        labels = args.labels.split(",") if args.labels else None
        if labels and len(labels) != len(args.inputs):
            raise UserError("--labels needs one name per input")
        written.append(plot_pseudo_curves(args.inputs, out / "pseudo_labels.png", labels))
    else:
        raise UserError("plot inputs must be all probe CSVs or all pseudo-label CSVs")
    for p in written:
        print(p)
    return EXIT_OK


def cmd_presets(args) -> int:
    if args.name:
        cfg = get_preset(args.name)
        print(f"# config_hash: {cfg.hash}")
        print(cfg.to_yaml(), end="")
    else:
        for name in preset_names():
            print(f"{name:32s} {get_preset(name).description}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML/JSON file")
    common.add_argument("--preset", help="named preset (see `stssl presets`)")
    common.add_argument("--out", default="runs/out", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the experiment seed")

    parser = _Parser(prog="stssl", description="Spatiotemporal teacher/student semi-supervised learning")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", parents=[common], help="render the synthetic world to disk")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", parents=[common], help="train (teacher and) student")
    p.add_argument("--dry-run", action="store_true", help="validate and run one step on stand-in data")
    p.add_argument("--full-size", action="store_true", help="dry run with the configured backbone size")
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="test metrics and OOD-metadata report")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("probe", parents=[common], help="teacher prior on a constant image over a lat/lon/day grid")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("plot", help="render probe heatmaps or pseudo-label curves from CSV")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", default="runs/plots")
    p.add_argument("--class-index", type=int, default=0)
    p.add_argument("--labels", help="comma-separated legend names for pseudo-label CSVs")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("presets", help="list presets or print one as YAML")
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc.component} at step {exc.step}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, indent=2, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_NUMERICAL
    except (UserError, ConfigError, PlotInputError, CheckpointError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
