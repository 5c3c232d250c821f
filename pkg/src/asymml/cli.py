"""Command-line front end: gen-data, train, eval, mine-preview, ablate.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from threadpoolctl import threadpool_limits

from asymml.config import ExperimentConfig, deep_merge, load_config
from asymml.dataset import generate_synthetic, load_dataset, save_dataset
from asymml.errors import ConfigurationError, DegenerateInputError, TrainingDiverged
from asymml.evaluation import append_results, evaluate, fit_whitening_for
from asymml.experiment import ABLATION_ROWS, student_sizes
from asymml.io import read_json, write_json
from asymml.losses import LossKind
from asymml.mining import mine_hard_negatives, refresh_epoch_pool
from asymml.models import StudentModel, TeacherModel, build_synthetic_teacher
from asymml.trainer import train

log = logging.getLogger("asymml")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
TEACHER_FILE = "teacher.f32"
PROTOCOL_NAMES = {"sym": "symmetric", "asym": "asymmetric",
                  "symmetric": "symmetric", "asymmetric": "asymmetric"}
ABLATE_COLUMNS = ["name", "loss", "mode", "self", "pos", "neg", "status",
                  "sym_mAP", "sym_mP@10", "asym_mAP", "asym_mP@10", "best_epoch"]


class InputError(Exception):
    """Missing or unreadable input files (exit code 2)."""


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _resolve(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "data", None) is not None:
        cfg = replace(cfg, dataset_dir=args.data)
    log.info("config digest %s (seed %d)", cfg.digest(), cfg.seed)
    return cfg


def _load_inputs(cfg):
    src = Path(cfg.dataset_dir)
    if not (src / "meta.json").is_file():
        raise InputError(f"no dataset at {src}; run gen-data first")
    teacher_path = src / TEACHER_FILE
    if not teacher_path.is_file():
        raise InputError(f"teacher file {teacher_path} is missing")
    data = load_dataset(src)
    teacher = TeacherModel.load(teacher_path)
    if teacher.table.shape[0] != data.inputs.shape[0]:
        raise InputError(f"teacher table has {teacher.table.shape[0]} rows, "
                         f"dataset has {data.inputs.shape[0]} examples")
    return data, teacher


def _whitening(cfg, protocol, student, teacher, training_set):
    if cfg.whitening == "none":
        return None
    if cfg.whitening == "auto":
        return fit_whitening_for(protocol, student, teacher, training_set)
    # an explicit space; evaluate() rejects a mismatch with the protocol
    return fit_whitening_for("symmetric" if cfg.whitening == "student" else "asymmetric",
                             student, teacher, training_set)


def cmd_gen_data(args):
    cfg = _resolve(args)
    out = Path(args.out) if args.out is not None else Path(cfg.dataset_dir)
    data = generate_synthetic(cfg.data)
    try:
        save_dataset(data, out)
        build_synthetic_teacher(data).save(out / TEACHER_FILE)
    except OSError as exc:
        raise InputError(f"cannot write dataset to {out}: {exc}") from None
    c = cfg.data
    print(f"dataset written to {out}: {c.train_size} train, {c.db_size} db, "
          f"{c.num_queries} queries, {c.num_classes} classes, d_in={c.d_in}, "
          f"d_teacher={c.d_teacher}, seed={c.seed}")
    return EXIT_OK


def _train(cfg, data, teacher, out, on_epoch_start=None):
    init = StudentModel.init(student_sizes(data.config, cfg.hidden), cfg.seed)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        init.save(out / "init", seed=cfg.seed, epoch=0)
        init.save(out / "checkpoint", seed=cfg.seed, epoch=0)

    def on_best(epoch, model):
        if out is not None:
            model.save(out / "checkpoint", seed=cfg.seed, epoch=epoch)

    best, tlog = train(data.training_set, teacher, init, cfg.train,
                       on_epoch_start=on_epoch_start, on_best=on_best)
    if out is not None:
        best.save(out / "checkpoint", seed=cfg.seed, epoch=tlog.best_epoch)
        tlog.write_csv(out / "train_log.csv")
    return best, tlog


def cmd_train(args):
    cfg = _resolve(args)
    data, teacher = _load_inputs(cfg)
    out = Path(cfg.out_dir)
    _, tlog = _train(cfg, data, teacher, out)
    final = tlog.records[tlog.best_epoch - 1].val_score if tlog.best_epoch else tlog.initial_val_score
    write_json(out / "config.json", cfg.to_dict())
    print(f"final validation score: {final!r} (best epoch {tlog.best_epoch}, "
          f"{len(tlog.records)} epochs run)")
    return EXIT_OK


def _load_encoder(checkpoint, teacher):
    if checkpoint == "teacher":
        return teacher, "teacher"
    path = Path(checkpoint)
    if not (path / "student.json").is_file():
        raise InputError(f"no checkpoint at {path}")
    model, _ = StudentModel.load(path)
    return model, "student"


def cmd_eval(args):
    cfg = _resolve(args)
    if args.protocol is not None:
        if args.protocol not in PROTOCOL_NAMES:
            raise ConfigurationError(f"unknown protocol {args.protocol!r}; use sym or asym")
        protocols = [PROTOCOL_NAMES[args.protocol]]
    else:
        protocols = list(cfg.protocols)
    data, teacher = _load_inputs(cfg)
    checkpoint = args.checkpoint or str(Path(cfg.out_dir) / "checkpoint")
    student, kind = _load_encoder(checkpoint, teacher)
    loss = cfg.train.loss.resolved()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for protocol in protocols:
        w = _whitening(cfg, protocol, student, teacher, data.training_set)
        report = evaluate(protocol, student, teacher, data.task, w, config_digest=cfg.digest())
        report.meta["encoder"] = kind
        (out / f"eval_{protocol}.json").write_text(report.to_json() + "\n")
        loss_name = "teacher" if kind == "teacher" else loss.kind.value
        rows.append(report.csv_row(loss_name, loss.mode.value, cfg.seed, _now()))
        print(f"{protocol}: mAP={report.mAP:.6f} mP@10={report.mP10:.6f}")
    append_results(out / "results.csv", rows)
    return EXIT_OK


def cmd_mine_preview(args):
    cfg = _resolve(args)
    data, teacher = _load_inputs(cfg)
    ts = data.training_set
    anchor = int(args.anchor) if args.anchor is not None else int(ts.ids[0])
    if anchor not in ts:
        raise ConfigurationError(f"anchor {anchor} is not a training example")
    loss = cfg.train.loss.resolved()
    mining = replace(cfg.train.mining, k_negatives=cfg.train.num_negatives, mode=loss.mode)
    rows = []

    def record(epoch, student, pool):
        if pool is None:
            pool = refresh_epoch_pool(ts, mining, epoch, cfg.seed)
        mined = mine_hard_negatives([anchor], student, teacher, ts, pool, mining)[anchor]
        for rank, (i, s) in enumerate(mined, start=1):
            rows.append([epoch, rank, i, repr(s)])

    out = Path(cfg.out_dir)
    _train(cfg, data, teacher, None, on_epoch_start=record)
    out.mkdir(parents=True, exist_ok=True)
    path = Path(args.csv) if args.csv else out / "mine_preview.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "rank", "id", "similarity"])
        w.writerows(rows)
    print(f"mined negatives for anchor {anchor} over {rows[-1][0] if rows else 0} epochs "
          f"written to {path}")
    return EXIT_OK


def _sweep_rows(args):
    if args.sweep is not None:
        path = Path(args.sweep)
        if not path.is_file():
            raise InputError(f"sweep file {path} does not exist")
        doc = read_json(path)
        rows = doc.get("rows") if isinstance(doc, dict) else doc
        if not isinstance(rows, list):
            raise ConfigurationError("sweep must be a list of rows or {\"rows\": [...]}")
        return rows
    # without a sweep file: the contrastive/regression ablation
    return [{"name": name, "loss": {"kind": "regression" if name == "Reg" else "contrastive",
                                    "mode": "asym", "include_self_positive": s,
                                    "use_positives": p, "use_negatives": n}}
            for name, (s, p, n) in ABLATION_ROWS.items()]


def _ablate_one(base, row, index):
    """Train and test one sweep row; never raises."""
    name = str(row.get("name", f"row{index}"))
    result = {"name": name, "loss": "", "mode": "", "self": "", "pos": "", "neg": "",
              "status": "ok", "best_epoch": ""}
    try:
        merged = deep_merge(base, {"train": row.get("train", {})})
        merged["train"]["loss"] = dict(row.get("loss", {}))
        cfg = ExperimentConfig.from_dict(merged)
        loss = cfg.train.loss.resolved()
        result.update(loss=loss.kind.value, mode=loss.mode.value,
                      self=int(loss.include_self_positive) if loss.kind is LossKind.CONTRASTIVE else "",
                      pos=int(loss.use_positives) if loss.uses_labels else "",
                      neg=int(loss.use_negatives) if loss.uses_labels else "")
        data = generate_synthetic(cfg.data)
        teacher = build_synthetic_teacher(data)
        student, tlog = _train(cfg, data, teacher, None)
        result["best_epoch"] = tlog.best_epoch
        for protocol, prefix in (("symmetric", "sym"), ("asymmetric", "asym")):
            w = _whitening(cfg, protocol, student, teacher, data.training_set)
            rep = evaluate(protocol, student, teacher, data.task, w)
            result[f"{prefix}_mAP"] = repr(rep.mAP)
            result[f"{prefix}_mP@10"] = repr(rep.mP10)
    except TrainingDiverged as exc:
        result["status"] = f"diverged: {exc}"
    except (ConfigurationError, DegenerateInputError, ValueError, TypeError) as exc:
        result["status"] = f"failed: {exc}"
    return result


def _ablate_worker(job):
    base, row, index, part = job
    # one BLAS thread per worker process; the processes are the parallelism
    with threadpool_limits(limits=1):
        result = _ablate_one(base, row, index)
    write_json(part, result)
    return part


def cmd_ablate(args):
    cfg = _resolve(args)
    base = cfg.to_dict()
    rows = _sweep_rows(args)
    out = Path(cfg.out_dir)
    parts_dir = out / "ablate_parts"
    parts_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(base, row, i, str(parts_dir / f"row{i:04d}.json")) for i, row in enumerate(rows)]
    workers = 1 if args.strict_determinism else min(max(1, args.threads or 1), os.cpu_count() or 1)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_ablate_worker, jobs))
    else:
        parts = [_ablate_worker(j) for j in jobs]

    # merge the private files in sweep order
    path = Path(args.csv) if args.csv else out / "ablation.csv"
    failed = 0
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATE_COLUMNS, restval="")
        w.writeheader()
        for part in parts:
            r = read_json(part)
            failed += r["status"] != "ok"
            w.writerow(r)
            Path(part).unlink()
    parts_dir.rmdir()
    print(f"{len(rows)} sweep rows ({failed} failed) written to {path}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with defaults/overrides layers")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help="output directory (dataset directory for gen-data)")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads, and worker processes for ablate")
    common.add_argument("--strict-determinism", action="store_true",
                        help="single-threaded BLAS and serial sweeps")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="asymml", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate synthetic data and teacher")
    t = sub.add_parser("train", parents=[common], help="train a student")
    t.add_argument("--data", help="dataset directory (overrides the config)")
    e = sub.add_parser("eval", parents=[common], help="retrieval testing of a checkpoint")
    e.add_argument("--data", help="dataset directory (overrides the config)")
    e.add_argument("--checkpoint", help="checkpoint directory, or 'teacher'")
    e.add_argument("--protocol", help="sym or asym (default: both)")
    m = sub.add_parser("mine-preview", parents=[common],
                       help="dump one anchor's mined negatives per epoch")
    m.add_argument("--data", help="dataset directory (overrides the config)")
    m.add_argument("--anchor", type=int)
    m.add_argument("--csv", help="output CSV path")
    a = sub.add_parser("ablate", parents=[common], help="train+test a sweep of loss configs")
    a.add_argument("--sweep", help="JSON list of rows {name, loss, train}")
    a.add_argument("--csv", help="output CSV path")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "mine-preview": cmd_mine_preview, "ablate": cmd_ablate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = 1 if args.strict_determinism else args.threads
    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DegenerateInputError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, InputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
