"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 divergence (non-finite loss).
Per-epoch records go to stdout as one JSON object per line.
"""
import argparse
import glob
import json
import logging
import os
import sys

import numpy as np
import pandas as pd

from . import io as gio
from .cohort import (
    PRESETS as INTERVALS,
    CohortSample,
    attach_imaging,
    attach_tabular,
    cohort_stats,
    extract_transitions,
    filter_by_interval,
    read_diagnosis_table,
    synthesize_cohort,
)
from .errors import DivergenceError, ValidationError
from .metrics import RocCurve, confusion_matrix_normalized, ConfusionCounts, compute_metrics, mean_roc
from .tabular import fit_schema, load_column_kinds

log = logging.getLogger("gfemamba")

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 2, 3


def _emit(records, path=None, **extra):
    lines = [json.dumps({**extra, **r}, default=gio._json_default) for r in records]
    for line in lines:
        print(line, flush=True)
    if path:
        with open(path, "a") as fh:
            fh.writelines(line + "\n" for line in lines)


def _overrides(args):
    cfg = gio.read_json(args.config) if args.config else {}
    if not isinstance(cfg, dict):
        raise ValidationError(f"{args.config}: config must be a JSON object")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.deterministic:
        cfg["deterministic"] = True
    return cfg


def _resolve(base, path):
    return path if path is None or os.path.isabs(path) else os.path.normpath(os.path.join(base, path))


def _load_cohort(path):
    data = gio.read_json(path)
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    for d in data.get("samples", []):
        s = CohortSample.from_dict(d)
        s.mri, s.pet = _resolve(base, s.mri), _resolve(base, s.pet)
        samples.append(s)
    if not samples:
        raise ValidationError(f"{path}: cohort has no samples")
    return samples, data.get("columns", {})


def _rows(samples):
    return [dict(s.features, delta_t_days=s.delta_t) for s in samples]


def _volumes(paths, what):
    out = []
    for p in paths:
        if p is None:
            raise ValidationError(f"sample without a {what} volume")
        out.append(gio.load_volume(p))
    return out


def _fingerprints(cohort_path, samples):
    vols = sorted({p for s in samples for p in (s.mri, s.pet) if p})
    return {"cohort": gio.fingerprint([cohort_path]), "volumes": gio.fingerprint(vols) if vols else None}


# -- subcommands -----------------------------------------------------------


def cmd_synth_cohort(args):
    rng_seed = 0 if args.seed is None else args.seed
    c = synthesize_cohort(args.n_samples, signal=args.signal, dims=(args.dims,) * 3, seed=rng_seed,
                          dt_range=INTERVALS[args.interval])
    os.makedirs(args.out, exist_ok=True)
    c.events.to_csv(os.path.join(args.out, "diagnosis.csv"), index=False)
    c.table.to_csv(os.path.join(args.out, "table.csv"), index=False)
    gio.write_json(os.path.join(args.out, "schema.json"), {"columns": c.kinds})
    index = []
    for (sid, iso), (mri, pet) in c.volumes.items():
        stem = f"volumes/{sid}_{iso}"
        gio.save_volume(os.path.join(args.out, stem + "_mri"), mri)
        gio.save_volume(os.path.join(args.out, stem + "_pet"), pet)
        scan = c.scan_dates[(sid, iso)].isoformat()
        index.append({"subject_id": sid, "date": scan, "mri": stem + "_mri", "pet": stem + "_pet"})
    gio.write_json(os.path.join(args.out, "volume_index.json"), index)
    log.info("wrote %d samples, %d subjects to %s", len(c.samples), c.events.subject_id.nunique(), args.out)
    return EXIT_OK


def cmd_build_cohort(args):
    events = read_diagnosis_table(args.diagnosis)
    samples, drops = extract_transitions(events)
    n_all = len(samples)
    if args.lo is not None or args.hi is not None:
        if args.lo is None or args.hi is None:
            raise ValidationError("--lo and --hi go together")
        samples = filter_by_interval(samples, args.lo, args.hi)
    else:
        samples = filter_by_interval(samples, args.interval)
    drops.append(f"interval filter removed {n_all - len(samples)} of {n_all} transitions")
    kinds = {}
    if args.table:
        kinds = load_column_kinds(args.schema) if args.schema else {}
        table = pd.read_csv(args.table, dtype={"subject_id": str})
        samples, more = attach_tabular(samples, table, list(kinds))
        drops += more
    if args.index:
        index = gio.read_json(args.index)
        base = os.path.dirname(os.path.abspath(args.index))
        out_base = os.path.abspath(args.out)
        for e in index:
            for key in ("mri", "pet"):
                if e.get(key):
                    e[key] = os.path.relpath(_resolve(base, e[key]), out_base)
        samples, more = attach_imaging(samples, index, args.tolerance)
        drops += more
    if not samples:
        raise ValidationError("no samples survive cohort construction")
    os.makedirs(args.out, exist_ok=True)
    gio.write_json(os.path.join(args.out, "cohort.json"),
                   {"columns": kinds, "samples": [s.to_dict() for s in samples]})
    gio.write_json(os.path.join(args.out, "stats.json"), cohort_stats(samples).to_dict())
    with open(os.path.join(args.out, "drops.txt"), "w") as fh:
        fh.writelines(line + "\n" for line in drops)
    log.info("cohort: %d samples (%d dropped lines)", len(samples), len(drops))
    return EXIT_OK


def cmd_train_gan(args):
    from .training import preset_configs, train_generator

    gcfg, _, tcfg = preset_configs(args.preset, "generator", _overrides(args))
    samples, _ = _load_cohort(args.cohort)
    pairs = [s for s in samples if s.pet]
    if args.max_pairs:
        pairs = pairs[: args.max_pairs]
    if not pairs:
        raise ValidationError("cohort has no MRI/PET pairs")
    mri = _volumes([s.mri for s in pairs], "MRI")
    pet = _volumes([s.pet for s in pairs], "PET")
    os.makedirs(args.out, exist_ok=True)
    logfile = os.path.join(args.out, "log.jsonl")
    open(logfile, "w").close()
    try:
        _, manifest = train_generator(mri, pet, gcfg, tcfg, args.out, _fingerprints(args.cohort, pairs))
    except DivergenceError as exc:
        _emit(exc.manifest.epochs, logfile, stage="generator")
        raise
    _emit(manifest.epochs, logfile, stage="generator")
    return EXIT_OK


def _features(args, samples, tcfg):
    from .training import extract_features, load_gan

    gan = load_gan(args.generator)
    mri = _volumes([s.mri for s in samples], "MRI")
    real = None
    if tcfg.use_real_pet:
        real = [gio.load_volume(s.pet) if s.pet else None for s in samples]
    return gan, mri, extract_features(gan.generator, mri, real)


def _kinds(args, columns):
    kinds = load_column_kinds(args.schema) if args.schema else columns
    if not kinds:
        raise ValidationError("no column kinds: pass --schema or build the cohort with one")
    return kinds


def cmd_train_classifier(args):
    from .training import preset_configs, save_classifier, train_classifier

    _, ccfg, tcfg = preset_configs(args.preset, "classifier", _overrides(args))
    samples, columns = _load_cohort(args.cohort)
    kinds = _kinds(args, columns)
    gan, mri, feats = _features(args, samples, tcfg)
    rows = _rows(samples)
    schema, report = fit_schema(rows, kinds, embedding_dim=ccfg.d)
    os.makedirs(args.out, exist_ok=True)
    logfile = os.path.join(args.out, "log.jsonl")
    open(logfile, "w").close()
    fps = {**_fingerprints(args.cohort, samples), "generator": gio.fingerprint([args.generator])}
    try:
        model, manifest = train_classifier(feats, rows, [s.label for s in samples], schema, ccfg, tcfg,
                                           gen=gan.generator, mri=mri, fingerprints=fps)
    except DivergenceError as exc:
        exc.manifest.write(os.path.join(args.out, "manifest.json"))
        _emit(exc.manifest.epochs, logfile, stage="classifier")
        raise
    ckpt = os.path.join(args.out, "classifier.ckpt")
    save_classifier(ckpt, model, {"dropped_columns": report})
    manifest.checkpoint = ckpt
    manifest.write(os.path.join(args.out, "manifest.json"))
    _emit(manifest.epochs, logfile, stage="classifier")
    return EXIT_OK


def cmd_evaluate(args):
    from .training import TrainConfig, evaluate_samples, load_classifier

    samples, _ = _load_cohort(args.cohort)
    model, _ = load_classifier(args.classifier)
    _, _, feats = _features(args, samples, TrainConfig(use_real_pet=args.real_pet))
    report, _ = evaluate_samples(model, feats, _rows(samples), [s.label for s in samples],
                                 impute_interval=not args.keep_interval)
    report["provenance"] = f"held-out evaluation of {os.path.basename(args.cohort)}"
    gio.write_json(args.out, report)
    _emit([{k: report[k] for k in ("n", "counts", "metrics", "auc")}], stage="evaluate")
    return EXIT_OK


def cmd_crossval(args):
    from .training import evaluate_run, preset_configs

    _, ccfg, tcfg = preset_configs(args.preset, "classifier", _overrides(args))
    samples, columns = _load_cohort(args.cohort)
    kinds = _kinds(args, columns)
    _, _, feats = _features(args, samples, tcfg)
    reports, aggregate, manifests = evaluate_run(
        feats, _rows(samples), [s.label for s in samples], [s.subject_id for s in samples], kinds, ccfg, tcfg,
        k=args.k, seed=tcfg.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    logfile = os.path.join(args.out, "log.jsonl")
    open(logfile, "w").close()
    for fold, (rep, man) in enumerate(zip(reports, manifests)):
        gio.write_json(os.path.join(args.out, f"fold_{fold:02d}.json"), rep)
        _emit(man.epochs, logfile, stage="classifier", fold=fold)
    gio.write_json(os.path.join(args.out, "aggregate.json"),
                   {"k": args.k, "provenance": f"{args.k}-fold grouped cross-validation", **aggregate})
    _emit([{"aggregate": aggregate}], stage="crossval")
    return EXIT_OK


def cmd_report(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = sorted(glob.glob(os.path.join(args.reports, "*.json"))) if os.path.isdir(args.reports) else [args.reports]
    reports = [r for r in (gio.read_json(p) for p in paths) if isinstance(r, dict) and "counts" in r]
    if not reports:
        raise ValidationError(f"no metrics reports found in {args.reports}")
    os.makedirs(args.out, exist_ok=True)
    curves = [RocCurve(np.array([p[0] for p in r["roc_points"]]), np.array([p[1] for p in r["roc_points"]]), r["auc"])
              for r in reports if r.get("roc_points")]
    summary = {"n_reports": len(reports)}
    if curves:
        m = mean_roc(curves)
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        for i, c in enumerate(curves):
            ax.plot(c.fpr, c.tpr, lw=0.8, alpha=0.4, label=f"fold {i} (AUC {c.auc:.3f})")
        ax.plot(m["fpr"], m["mean_tpr"], color="C3", lw=2,
                label=f"mean (AUC {m['mean_auc']:.3f} ± {m['std_auc']:.3f})")
        ax.fill_between(m["fpr"], m["lower"], m["upper"], color="C3", alpha=0.15, label="± 1.5 std")
        ax.plot([0, 1], [0, 1], "k--", lw=0.6)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(fontsize=6, loc="lower right")
        fig.tight_layout()
        fig.savefig(os.path.join(args.out, f"roc.{args.format}"))
        plt.close(fig)
        summary.update(mean_auc=m["mean_auc"], std_auc=m["std_auc"])
    total = ConfusionCounts(*(sum(r["counts"][k] for r in reports) for k in ("tp", "fp", "tn", "fn")))
    cm, flags = confusion_matrix_normalized(total)
    fig, ax = plt.subplots(figsize=(3.5, 3.2))
    ax.imshow(cm, cmap="Blues", vmin=0, vmax=1)
    for (i, j), v in np.ndenumerate(cm):
        ax.text(j, i, f"{v:.2f}", ha="center", va="center", color="white" if v > 0.5 else "black")
    ax.set_xticks([0, 1], ["pred 0", "pred 1"])
    ax.set_yticks([0, 1], ["true 0", "true 1"])
    fig.tight_layout()
    fig.savefig(os.path.join(args.out, f"confusion.{args.format}"))
    plt.close(fig)
    rep = compute_metrics(total)
    summary.update(pooled_counts=total.__dict__, pooled_metrics=rep.to_dict(), confusion_normalized=cm.tolist(), **flags)
    gio.write_json(os.path.join(args.out, "summary.json"), summary)
    _emit([summary], stage="report")
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON of config field overrides")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=("desk", "paper"), default="desk")
    common.add_argument("--deterministic", action="store_true", help="force deterministic algorithms")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gfemamba", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-cohort", parents=[common], help="write a synthetic cohort")
    s.add_argument("--out", required=True)
    s.add_argument("--n-samples", type=int, default=128)
    s.add_argument("--signal", type=float, default=1.0)
    s.add_argument("--dims", type=int, default=16)
    s.add_argument("--interval", choices=sorted(INTERVALS), default="one-year")
    s.set_defaults(func=cmd_synth_cohort)

    s = sub.add_parser("build-cohort", parents=[common], help="diagnosis table -> labelled cohort")
    s.add_argument("--diagnosis", required=True)
    s.add_argument("--table")
    s.add_argument("--schema")
    s.add_argument("--index", help="volume index JSON")
    s.add_argument("--interval", choices=sorted(INTERVALS), default="one-year")
    s.add_argument("--lo", type=float)
    s.add_argument("--hi", type=float)
    s.add_argument("--tolerance", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_cohort)

    s = sub.add_parser("train-gan", parents=[common], help="pretrain the MRI->PET generator")
    s.add_argument("--cohort", required=True)
    s.add_argument("--max-pairs", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_gan)

    s = sub.add_parser("train-classifier", parents=[common], help="train the classifier on a cohort")
    s.add_argument("--cohort", required=True)
    s.add_argument("--generator", required=True)
    s.add_argument("--schema")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("evaluate", parents=[common], help="score a trained classifier on a cohort")
    s.add_argument("--cohort", required=True)
    s.add_argument("--generator", required=True)
    s.add_argument("--classifier", required=True)
    s.add_argument("--real-pet", action="store_true")
    s.add_argument("--keep-interval", action="store_true", help="use the recorded interval instead of imputing")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("crossval", parents=[common], help="grouped k-fold cross-validation")
    s.add_argument("--cohort", required=True)
    s.add_argument("--generator", required=True)
    s.add_argument("--schema")
    s.add_argument("-k", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("report", parents=[common], help="ROC and confusion-matrix plots from reports")
    s.add_argument("--reports", required=True, help="a report JSON or a directory of them")
    s.add_argument("--format", choices=("svg", "png"), default="svg")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    import torch

    torch.set_num_threads(max(1, min(torch.get_num_threads(), os.cpu_count() or 1)))
    try:
        return args.func(args)
    except DivergenceError as exc:
        log.error("divergence: %s", exc)
        return EXIT_DIVERGENCE
    except (ValidationError, FileNotFoundError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
