"""``outfitrank`` command line: data generation, training, fine-tuning, evaluation, reports.

Run directory layout (root = $OUTFITRANK_RUN_DIR, else ``run.dir`` from the config)::

    data/                         dataset (never modified after creation)
    arch-<x>/initial/             checkpoint before stage one
    arch-<x>/stage-one/           general model
    arch-<x>/stage-two-<mode>/userN/   per-user fine-tuned checkpoints
    arch-<x>/metrics/<stage>.<split>{,.ndcg,.topk}.csv
    report/                       summary table CSVs, curve CSVs, figures

Errors go to stderr as one line ``outfitrank: error kind=<kind> exit=<code> msg=<text>``.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import training
from .catalog import DatasetError, Dataset, generate_dataset, load_dataset, save_dataset
from .config import PAPER_SCALE, ConfigError, RunConfig
from .metrics import Metrics
from .models import (CheckpointVersionError, CorruptCheckpointError, FashionNet, VariantMismatchError,
                     build, load_checkpoint, save_checkpoint)
from .training import STAGES, ConfigurationError, TrainingDiverged, stages_for

log = logging.getLogger("outfitrank")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_MISMATCH = 5
EXIT_EXISTS = 6
EXIT_CORRUPT = 7
EXIT_DIVERGED = 8
EXIT_REQUEST = 9

STAGE_LABELS = {"initial": "Initial", "stage-one": "Stage one", "stage-two-direct": "Stage two (direct)",
                "stage-two-partial": "Stage two (partial)", "stage-two-whole": "Stage two (whole)"}
ARCHS = ("a", "b", "c")
RESOLVED = "resolved-config.txt"


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind, self.code = kind, code


def _exists(msg):
    return CliError("exists", EXIT_EXISTS, msg)


def _missing(msg):
    return CliError("missing-input", EXIT_MISSING, msg)


def _request(msg):
    return CliError("bad-request", EXIT_REQUEST, msg)


# -- layout -------------------------------------------------------------------------------

class Layout:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    def arch(self, arch: str) -> Path:
        return self.root / f"arch-{arch}"

    def checkpoint(self, arch: str, stage: str) -> Path:
        return self.arch(arch) / stage

    def user_checkpoint(self, arch: str, mode: str, user: int) -> Path:
        return self.arch(arch) / f"stage-two-{mode}" / f"user{user}"

    def metrics(self, arch: str) -> Path:
        return self.arch(arch) / "metrics"

    @property
    def report(self) -> Path:
        return self.root / "report"


def _nonempty(path: Path) -> bool:
    return path.exists() and (path.is_file() or any(path.iterdir()))


def _claim(path: Path, force: bool) -> None:
    """Make ``path`` a fresh directory; refuse to touch existing output without --force."""
    if _nonempty(path):
        if not force:
            raise _exists(f"{path} already exists (use --force to replace it)")
        shutil.rmtree(path) if path.is_dir() else path.unlink()
    path.mkdir(parents=True, exist_ok=True)


def _write_resolved(cfg: RunConfig, directory: Path) -> None:
    (directory / RESOLVED).write_text(cfg.resolved_text())


def _load_data(layout: Layout) -> Dataset:
    if not (layout.data / "manifest.txt").exists():
        raise _missing(f"no dataset at {layout.data} (run generate-data first)")
    return load_dataset(layout.data)


def _load_net(path: Path, arch: str, ds: Dataset) -> FashionNet:
    if not (path / "manifest.txt").exists():
        raise _missing(f"no checkpoint at {path}")
    net, _, _ = load_checkpoint(path, expect_variant=arch)
    if net.backbone_config.image_size != ds.config.image_size or tuple(net.categories) != tuple(ds.categories):
        raise CliError("mismatch", EXIT_MISMATCH,
                       f"checkpoint {path} expects S={net.backbone_config.image_size} categories="
                       f"{','.join(net.categories)}; dataset has S={ds.config.image_size} "
                       f"categories={','.join(ds.categories)}")
    return net


def _stage_networks(layout: Layout, arch: str, stage: str, ds: Dataset) -> FashionNet | dict[int, FashionNet]:
    if stage in ("initial", "stage-one"):
        return _load_net(layout.checkpoint(arch, stage), arch, ds)
    mode = stage[len("stage-two-"):]
    return {u: _load_net(layout.user_checkpoint(arch, mode, u), arch, ds) for u in range(len(ds.users))}


# -- commands -----------------------------------------------------------------------------

def cmd_generate_data(cfg: RunConfig, layout: Layout, force: bool = False) -> Path:
    _claim(layout.data, force)
    ds = generate_dataset(cfg.catalog(), cfg["seed"])
    save_dataset(ds, layout.data)
    _write_resolved(cfg, layout.data)
    c = ds.config
    print(f"dataset {layout.data}: users={c.n_users} items={ds.catalog.n_items} "
          f"positives={'/'.join(map(str, c.positives))} neutrals={'/'.join(map(str, c.neutrals))} per user")
    return layout.data


def cmd_train(cfg: RunConfig, layout: Layout, arch: str, force: bool = False) -> None:
    ds = _load_data(layout)
    init_dir, one_dir = layout.checkpoint(arch, "initial"), layout.checkpoint(arch, "stage-one")
    if not force and (_nonempty(init_dir) or _nonempty(one_dir)):
        raise _exists(f"{layout.arch(arch)} already has trained checkpoints (use --force)")
    _claim(init_dir, True), _claim(one_dir, True)
    tc = cfg.train()
    net = build(arch, cfg.backbone(), cfg.matching(), seed=cfg["seed"], categories=ds.categories)
    pre = training.pretrain_backbone(net, ds, tc)
    save_checkpoint(net, init_dir, extra={"stage": "initial"})
    pre.write_csv(init_dir / "pretrain_loss.csv")
    _write_resolved(cfg, init_dir)
    curve, state = training.train_stage_one(net, ds, tc, checkpoint_dir=layout.arch(arch))
    save_checkpoint(net, one_dir, optimizer=state, extra={"stage": "stage-one"})
    curve.write_csv(one_dir / "loss.csv")
    _write_resolved(cfg, one_dir)
    print(f"arch {arch}: stage one loss {curve.losses[0]:.4f} -> {curve.losses[-1]:.4f}; "
          f"checkpoints in {layout.arch(arch)}")


def _finetune_job(root: str, raw: dict[str, str], arch: str, mode: str, user: int) -> tuple[int, float, float]:
    cfg, layout = RunConfig(raw), Layout(root)
    ds = _load_data(layout)
    general = _load_net(layout.checkpoint(arch, "stage-one"), arch, ds)
    initial = _load_net(layout.checkpoint(arch, "initial"), arch, ds) if mode == "direct" else None
    target = layout.user_checkpoint(arch, mode, user)
    target.mkdir(parents=True, exist_ok=True)
    net, curve, state = training.fine_tune(general, ds, user, cfg.train(mode), initial=initial,
                                           checkpoint_dir=target.parent)
    save_checkpoint(net, target, optimizer=state, extra={"stage": f"stage-two-{mode}", "user": str(user)})
    curve.write_csv(target / "loss.csv")
    _write_resolved(cfg, target)
    return user, curve.losses[0], curve.losses[-1]


def cmd_finetune(cfg: RunConfig, layout: Layout, arch: str, mode: str, users: list[int] | None = None,
                 jobs: int = 1, force: bool = False) -> None:
    if mode == "partial" and arch == "a":
        raise ConfigurationError("partial fine-tuning needs a separable feature network (arch b or c)")
    ds = _load_data(layout)
    _load_net(layout.checkpoint(arch, "stage-one"), arch, ds)
    if mode == "direct":
        _load_net(layout.checkpoint(arch, "initial"), arch, ds)
    users = list(range(len(ds.users))) if users is None else users
    for u in users:
        if not 0 <= u < len(ds.users):
            raise _request(f"user {u} outside 0..{len(ds.users) - 1}")
    for u in users:
        if _nonempty(layout.user_checkpoint(arch, mode, u)) and not force:
            raise _exists(f"{layout.user_checkpoint(arch, mode, u)} already exists (use --force)")
    for u in users:
        _claim(layout.user_checkpoint(arch, mode, u), True)
    args = [(str(layout.root), cfg.raw, arch, mode, u) for u in users]
    if jobs > 1 and len(users) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_finetune_job, *zip(*args)))
    else:
        results = [_finetune_job(*a) for a in args]
    for u, first, last in results:
        print(f"arch {arch} {mode} user {u}: loss {first:.4f} -> {last:.4f}")


def _fmt(x: float) -> str:
    return f"{x:.10f}"


def write_metrics(directory: Path, stage: str, split: str, per_user: dict[int, Metrics], agg: Metrics,
                  ds: Dataset, k: int) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    t = ds.outfits
    base = directory / f"{stage}.{split}"
    paths = [base.with_name(base.name + ".csv"), base.with_name(base.name + ".ndcg.csv"),
             base.with_name(base.name + ".topk.csv")]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "n_records", "n_positive", "mean_ndcg", f"ndcg_at_{k}", f"top{k}_positive"])
        for u, m in per_user.items():
            ids = t.select(u, split)
            w.writerow([u, len(ids), int(t.label[ids].sum()), _fmt(m.mean_ndcg), _fmt(m.ndcg_at[k - 1]),
                        _fmt(m.topk_positive[k - 1])])
        w.writerow(["aggregate", "", "", _fmt(agg.mean_ndcg), _fmt(agg.ndcg_at[k - 1]), _fmt(agg.topk_positive[k - 1])])
    for path, name, series in ((paths[1], "m", agg.ndcg_at), (paths[2], "k", agg.topk_positive)):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([name, "ndcg" if name == "m" else "positives"])
            for i, v in enumerate(series, 1):
                w.writerow([i, _fmt(v)])
    return paths


def available_stages(layout: Layout, arch: str) -> list[str]:
    out = []
    for stage in STAGES:
        if stage in ("initial", "stage-one"):
            ok = (layout.checkpoint(arch, stage) / "manifest.txt").exists()
        else:
            ok = (layout.user_checkpoint(arch, stage[len("stage-two-"):], 0) / "manifest.txt").exists()
        if ok:
            out.append(stage)
    return out


def cmd_evaluate(cfg: RunConfig, layout: Layout, arch: str, stages: list[str] | None = None,
                 split: str | None = None, force: bool = False) -> dict[str, Metrics]:
    ds = _load_data(layout)
    split = split or cfg["eval.split"]
    k = cfg["eval.k"]
    stages = stages or available_stages(layout, arch)
    if not stages:
        raise _missing(f"no checkpoints under {layout.arch(arch)}")
    out_dir = layout.metrics(arch)
    for stage in stages:
        if _nonempty(out_dir / f"{stage}.{split}.csv") and not force:
            raise _exists(f"{out_dir / f'{stage}.{split}.csv'} already exists (use --force)")
    results = {}
    for stage in stages:
        nets = _stage_networks(layout, arch, stage, ds)
        per, agg = training.evaluate(nets, ds, split)
        n_min = min(len(ds.outfits.select(u, split)) for u in per)
        if k > n_min:
            raise _request(f"eval.k={k} exceeds the smallest {split} list ({n_min})")
        write_metrics(out_dir, stage, split, per, agg, ds, k)
        results[stage] = agg
        print(f"arch {arch} {stage} {split}: mean NDCG {agg.mean_ndcg:.5f}, top-{k} positives "
              f"{agg.topk_positive[k - 1]:.3f}")
    _write_resolved(cfg, out_dir)
    return results


def cmd_recommend(cfg: RunConfig, layout: Layout, arch: str, stage: str, user: int, k: int,
                  split: str | None = None) -> list[tuple[int, float]]:
    ds = _load_data(layout)
    split = split or cfg["eval.split"]
    if not 0 <= user < len(ds.users):
        raise _request(f"user {user} outside 0..{len(ds.users) - 1}")
    n = len(ds.outfits.select(user, split))
    if not 1 <= k <= n:
        raise _request(f"k={k} outside 1..{n} (user {user} has {n} {split} outfits)")
    if stage.startswith("stage-two-"):
        net = _load_net(layout.user_checkpoint(arch, stage[len("stage-two-"):], user), arch, ds)
    else:
        net = _load_net(layout.checkpoint(arch, stage), arch, ds)
    ranked, scores = training.ranked_list(net, ds, user, split)
    cats = ds.categories
    print("rank\toutfit\tscore\tlabel\t" + "\t".join(cats))
    rows = []
    for i in range(k):
        oid = int(ranked.ids[i])
        items = ds.outfits.items[oid]
        print(f"{i + 1}\t{oid}\t{scores[i]:.6f}\t{'positive' if ranked.labels[i] else 'neutral'}\t"
              + "\t".join(str(x) for x in items))
        rows.append((oid, float(scores[i])))
    return rows


def _read_csv(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def cmd_report(cfg: RunConfig, layout: Layout, run_dirs: list[Path], out: Path | None = None,
               force: bool = False, figures: bool = True) -> Path:
    """Combine metric CSVs of one or more run directories (e.g. seeds) into one summary table per architecture and stage."""
    split, k = cfg["eval.split"], cfg["eval.k"]
    out = out or layout.report
    rows: dict[tuple[str, str], list[tuple[float, float]]] = {}
    runs_long = []
    curves: dict[tuple[str, str], list[tuple[np.ndarray, np.ndarray]]] = {}
    for run in run_dirs:
        if not Path(run).is_dir():
            raise _missing(f"run directory {run} does not exist")
        lay = Layout(run)
        for arch in ARCHS:
            for stage in STAGES:
                base = lay.metrics(arch) / f"{stage}.{split}"
                f = base.with_name(base.name + ".csv")
                if not f.exists():
                    continue
                table = _read_csv(f)
                header, agg = table[0], table[-1]
                if agg[0] != "aggregate" or header[5] != f"top{k}_positive":
                    raise CliError("corrupt", EXIT_CORRUPT, f"{f}: not a top-{k} metrics file")
                vals = (float(agg[3]), float(agg[5]))
                rows.setdefault((arch, stage), []).append(vals)
                runs_long.append([str(run), arch, STAGE_LABELS[stage], _fmt(vals[0]), _fmt(vals[1])])
                nd = np.array([float(r[1]) for r in _read_csv(base.with_name(base.name + ".ndcg.csv"))[1:]])
                tk = np.array([float(r[1]) for r in _read_csv(base.with_name(base.name + ".topk.csv"))[1:]])
                curves.setdefault((arch, stage), []).append((nd, tk))
    if not rows:
        raise _missing(f"no {split} metric files under {', '.join(map(str, run_dirs))}")
    _claim(out, force)
    order = [(a, s) for a in ARCHS for s in STAGES if (a, s) in rows]
    with open(out / "table2.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["architecture", "training_strategy", "mean_ndcg", f"top{k}_positive", "runs",
                    "mean_ndcg_stderr"])
        for a, s in order:
            v = np.array(rows[(a, s)])
            se = v[:, 0].std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else 0.0
            w.writerow([f"FashionNet {a.upper()}", STAGE_LABELS[s], _fmt(v[:, 0].mean()), _fmt(v[:, 1].mean()),
                        len(v), _fmt(se)])
    with open(out / "table2_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "architecture", "training_strategy", "mean_ndcg", f"top{k}_positive"])
        w.writerows(runs_long)
    mean_curves = {}
    for key in order:
        n = min(len(c[0]) for c in curves[key])
        mean_curves[key] = (np.mean([c[0][:n] for c in curves[key]], axis=0),
                            np.mean([c[1][:n] for c in curves[key]], axis=0))
    for fname, idx, axis in (("ndcg_at_m.csv", 0, "m"), ("topk_positive.csv", 1, "k")):
        n = min(len(c[idx]) for c in mean_curves.values())
        with open(out / fname, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([axis] + [f"{a}:{s}" for a, s in order])
            for i in range(n):
                w.writerow([i + 1] + [_fmt(mean_curves[key][idx][i]) for key in order])
    if figures:
        from .plotting import plot_curves
        labels = {key: STAGE_LABELS[key[1]] for key in order}
        plot_curves({key: c[0] for key, c in mean_curves.items()}, labels, "m", "NDCG@m", out / "ndcg_at_m.png")
        plot_curves({key: c[1] for key, c in mean_curves.items()}, labels, "k", "positive outfits in top k",
                    out / "topk_positive.png")
    _write_resolved(cfg, out)
    print(f"report {out}: {len(order)} rows from {len(run_dirs)} run(s)")
    return out


def cmd_run(cfg: RunConfig, layout: Layout, archs: list[str], jobs: int = 1, force: bool = False,
            figures: bool = True) -> Path:
    """Whole protocol: data, then per architecture train, fine-tune, evaluate; then one report."""
    cmd_generate_data(cfg, layout, force)
    for arch in archs:
        cmd_train(cfg, layout, arch, force)
        for stage in stages_for(arch):
            if stage.startswith("stage-two-"):
                cmd_finetune(cfg, layout, arch, stage[len("stage-two-"):], jobs=jobs, force=force)
        cmd_evaluate(cfg, layout, arch, force=force)
    return cmd_report(cfg, layout, [layout.root], force=force, figures=figures)


# -- argument handling ------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'section.key = value' config file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--force", action="store_true", help="replace existing outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    p = argparse.ArgumentParser(prog="outfitrank", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate-data", parents=[common], help="generate the synthetic dataset")
    g.add_argument("--paper-scale", action="store_true", help="202/46/62 positives per user")
    t = sub.add_parser("train", parents=[common], help="pretrain the backbone and run stage one")
    t.add_argument("--arch", choices=ARCHS)
    f = sub.add_parser("finetune", parents=[common], help="per-user stage-two fine-tuning")
    f.add_argument("--arch", choices=ARCHS)
    f.add_argument("--mode", choices=("whole", "partial", "direct"))
    who = f.add_mutually_exclusive_group()
    who.add_argument("--user", type=int)
    who.add_argument("--all-users", action="store_true")
    f.add_argument("--jobs", type=int, default=1)
    e = sub.add_parser("evaluate", parents=[common], help="write metric CSVs for trained stages")
    e.add_argument("--arch", choices=ARCHS)
    e.add_argument("--stage", choices=STAGES, action="append")
    e.add_argument("--split", choices=("train", "val", "test"))
    r = sub.add_parser("recommend", parents=[common], help="list a user's top-k outfits")
    r.add_argument("--arch", choices=ARCHS)
    r.add_argument("--stage", choices=STAGES, default="stage-two-whole")
    r.add_argument("--user", type=int, required=True)
    r.add_argument("--k", type=int, default=10)
    r.add_argument("--split", choices=("train", "val", "test"))
    rep = sub.add_parser("report", parents=[common], help="summary tables and curves")
    rep.add_argument("runs", nargs="*", type=Path, help="run directories (default: the run root)")
    rep.add_argument("--out", type=Path)
    rep.add_argument("--no-figures", action="store_true")
    a = sub.add_parser("run", parents=[common], help="full pipeline for one or more architectures")
    a.add_argument("--arch", choices=ARCHS, action="append")
    a.add_argument("--mode", choices=("whole", "partial", "direct"), help=argparse.SUPPRESS)
    a.add_argument("--paper-scale", action="store_true")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--no-figures", action="store_true")
    return p


def _resolve(args) -> tuple[RunConfig, Layout]:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "paper_scale", False):
        overrides.update(PAPER_SCALE)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "arch", None) and isinstance(args.arch, str):
        overrides["model.arch"] = args.arch
    if getattr(args, "mode", None):
        overrides["train.mode"] = args.mode
    file_raw = RunConfig.load(args.config).raw if args.config else {}
    cfg = RunConfig({**file_raw, **overrides})
    root = os.environ.get("OUTFITRANK_RUN_DIR") or cfg["run.dir"]
    return cfg, Layout(root)


def _dispatch(args) -> None:
    cfg, layout = _resolve(args)
    arch = cfg["model.arch"]
    if args.command == "generate-data":
        cmd_generate_data(cfg, layout, args.force)
    elif args.command == "train":
        cmd_train(cfg, layout, arch, args.force)
    elif args.command == "finetune":
        users = [args.user] if args.user is not None else None
        cmd_finetune(cfg, layout, arch, cfg["train.mode"], users, args.jobs, args.force)
    elif args.command == "evaluate":
        cmd_evaluate(cfg, layout, arch, args.stage, args.split, args.force)
    elif args.command == "recommend":
        cmd_recommend(cfg, layout, arch, args.stage, args.user, args.k, args.split)
    elif args.command == "report":
        cmd_report(cfg, layout, args.runs or [layout.root], args.out, args.force, not args.no_figures)
    elif args.command == "run":
        cmd_run(cfg, layout, args.arch or list(ARCHS), args.jobs, args.force, not args.no_figures)


def _classify(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, CliError):
        return exc.kind, exc.code
    if isinstance(exc, (ConfigError, ConfigurationError)):
        return "config", EXIT_CONFIG
    if isinstance(exc, VariantMismatchError):
        return "mismatch", EXIT_MISMATCH
    if isinstance(exc, (CorruptCheckpointError, CheckpointVersionError, DatasetError)):
        return "corrupt", EXIT_CORRUPT
    if isinstance(exc, FileNotFoundError):
        return "missing-input", EXIT_MISSING
    if isinstance(exc, TrainingDiverged):
        return "diverged", EXIT_DIVERGED
    return "internal", EXIT_INTERNAL


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        _dispatch(args)
    except Exception as exc:  # every failure becomes one parsable line plus a distinct code
        kind, code = _classify(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"outfitrank: error kind={kind} exit={code} msg={msg}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            log.debug("internal error", exc_info=True)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
