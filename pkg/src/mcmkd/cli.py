"""Command-line runner.

Exit codes: 0 success, 1 configuration error, 2 data or format error,
3 training divergence or a failed numerical check.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, pipeline
from .config import ExperimentConfig, load as load_config
from .data import (ConfigError, FormatError, SyntheticSlide, archive_to_windows, read_feature_archive,
                   windows_to_archive, write_ppm)
from .heatmap import feature_grid, similarity_grid, write_heatmap
from .mcm import Variant
from .mil import SplitSpec, make_splits
from .tensor import TrainingDivergence
from .rng import derive_seed

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class DataError(RuntimeError):
    pass


# -- helpers ---------------------------------------------------------------------------


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["seeds"] = (args.seed,)
    if args.variant is not None:
        over["variant"] = args.variant
    if getattr(args, "lr", None) is not None:
        over["finetune_lr"] = args.lr
        over["finetune_lr_sweep"] = ()
    return cfg.with_overrides(**over) if over else cfg


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _slides_dir(out: Path) -> Path:
    return out / "slides"


def _read_dataset(cfg: ExperimentConfig, out: Path):
    """Windows and labels written by ``gen``: (ids, labels, windows per slide)."""
    d = _slides_dir(out)
    index = d / "labels.csv"
    if not index.exists():
        raise DataError(f"no generated slides under {d}; run `gen` first")
    ids, labels, windows = [], [], []
    with open(index) as fh:
        for row in csv.DictReader(fh):
            ids.append(row["slide_id"])
            labels.append(int(row["label"]))
            path = d / f"{row['slide_id']}.mcfa"
            if not path.exists():
                raise DataError(f"missing archive {path}")
            arc = read_feature_archive(path)
            if arc.s != cfg.s or arc.dim != cfg.patch * cfg.patch * 3:
                raise ConfigError(f"{path.name} holds s={arc.s}, {arc.dim} values per patch; "
                                  f"config expects s={cfg.s}, patch={cfg.patch}")
            windows.append(archive_to_windows(arc, cfg.patch))
    return ids, labels, windows


def _dataset_replicate(cfg: ExperimentConfig, out: Path, seed: int) -> pipeline.Replicate:
    ids, labels, windows = _read_dataset(cfg, out)
    slides = [SyntheticSlide(grid=np.zeros((0, 0), dtype=np.int64), pixels=np.zeros((0, 0, 3)), label=y,
                             seed=0, slide_id=i) for i, y in zip(ids, labels)]
    splits = make_splits(labels, SplitSpec(seed=derive_seed(seed, "splits")))
    return pipeline.Replicate(seed, slides, windows, splits)


def _encoders(cfg: ExperimentConfig, out: Path, seed: int):
    """Teacher and student from ``out/pretrain`` if present, else pretrain through the cache."""
    pre = out / "pretrain"
    t_path, s_path = pre / "teacher.mckp", pre / "student.mckp"
    if t_path.exists() and s_path.exists():
        return checkpoint.load_encoder(t_path, cfg.patch), checkpoint.load_encoder(s_path, cfg.patch)
    teacher, student, _ = pipeline.pretrained_encoders(cfg, seed, out / "cache")
    return teacher, student


def _check_dims(cfg: ExperimentConfig, enc, what: str) -> None:
    if enc.out_dim != cfg.d_f:
        raise ConfigError(f"{what} produces {enc.out_dim}-dim features but config has d_f={cfg.d_f}")


# -- commands ---------------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, out: Path, args) -> int:
    seed = cfg.seeds[0]
    man = pipeline.RunManifest("gen", cfg, [seed])
    out.mkdir(parents=True, exist_ok=True)
    d = _slides_dir(out)
    d.mkdir(exist_ok=True)
    man.write(out)
    rep = pipeline.make_replicate(cfg, seed)
    rows = []
    for slide, ws in zip(rep.slides, rep.windows):
        windows_to_archive(d / f"{slide.slide_id}.mcfa", ws)
        write_ppm(d / f"{slide.slide_id}.ppm", slide.pixels)
        man.artifacts[slide.slide_id] = f"slides/{slide.slide_id}.mcfa"
        rows.append([slide.slide_id, slide.label, len(ws)])
    _write_csv(d / "labels.csv", ["slide_id", "label", "n_windows"], rows)
    man.artifacts["labels"] = "slides/labels.csv"
    man.finished = time.time()
    man.write(out)
    print(f"wrote {len(rows)} slides, {sum(r[2] for r in rows)} windows to {d}")
    return EXIT_OK


def cmd_pretrain(cfg: ExperimentConfig, out: Path, args) -> int:
    seed = cfg.seeds[0]
    man = pipeline.RunManifest("pretrain", cfg, [seed], extra={"key": pipeline.pretrain_key(cfg, seed)})
    pre = out / "pretrain"
    pre.mkdir(parents=True, exist_ok=True)
    man.write(out)
    teacher, student, info = pipeline.pretrained_encoders(cfg, seed, out / "cache")
    checkpoint.save_encoder(pre / "teacher.mckp", teacher)
    checkpoint.save_encoder(pre / "student.mckp", student)
    man.artifacts.update(teacher="pretrain/teacher.mckp", student="pretrain/student.mckp")
    man.finished = time.time()
    man.write(out)
    print(f"teacher {teacher.num_parameters()} params, student {student.num_parameters()} params "
          f"(cache {info['cache']})")
    return EXIT_OK


def cmd_finetune(cfg: ExperimentConfig, out: Path, args) -> int:
    seed = cfg.seeds[0]
    variant = Variant(cfg.variant)
    man = pipeline.RunManifest("finetune", cfg, [seed])
    man.components = {"student": True, "context_encoder": variant.uses_context, "predictor": True,
                      "teacher": variant is not Variant.MCM}
    man.derived = {"finetune": derive_seed(seed, "finetune", variant.value)}
    out.mkdir(parents=True, exist_ok=True)
    man.write(out)
    rep = _dataset_replicate(cfg, out, seed)
    teacher, student = _encoders(cfg, out, seed)
    _check_dims(cfg, student, "the student")
    st, model, reports = pipeline.finetune(cfg, rep.split_windows("train"), teacher, student, variant.value,
                                           man.derived["finetune"])
    ft = out / "finetune"
    ft.mkdir(exist_ok=True)
    tag = variant.value
    checkpoint.save_encoder(ft / f"student-{tag}.mckp", st)
    aux = {f"context.{k}": v for k, v in (model.context.state_dict().items() if model.context else [])}
    aux.update({f"predictor.{k}": v for k, v in model.predictor.state_dict().items()})
    checkpoint.save(ft / f"auxiliary-{tag}.mckp", aux)
    losses = [x for r in reports for x in r.losses]
    _write_csv(ft / f"loss-{tag}.csv", ["batch_index", "loss"], [[i, _fmt(v)] for i, v in enumerate(losses)])
    man.artifacts.update({"student": f"finetune/student-{tag}.mckp",
                          "auxiliary": f"finetune/auxiliary-{tag}.mckp", "losses": f"finetune/loss-{tag}.csv"})
    man.finished = time.time()
    man.write(out)
    print(f"{tag}: {len(losses)} batches, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return EXIT_OK


def cmd_train_mil(cfg: ExperimentConfig, out: Path, args) -> int:
    if not args.checkpoint:
        raise ConfigError("train-mil needs --checkpoint")
    man = pipeline.RunManifest("train-mil", cfg, list(cfg.seeds),
                               extra={"checkpoint": Path(args.checkpoint).name})
    out.mkdir(parents=True, exist_ok=True)
    man.write(out)
    enc = checkpoint.load_encoder(args.checkpoint, cfg.patch)
    _check_dims(cfg, enc, f"checkpoint {args.checkpoint}")
    rows, tests = [], []
    for seed in cfg.seeds:
        rep = _dataset_replicate(cfg, out, seed)
        res = pipeline.evaluate_features(cfg, rep, pipeline.slide_features(enc, rep), seed)
        for split in ("train", "val", "test"):
            rows.append([seed, split, _fmt(res.auroc[split])])
        tests.append(res.auroc["test"])
    mean, sd = pipeline.mean_sd(tests)
    rows += [["mean", "test", _fmt(mean)], ["sd", "test", _fmt(sd)]]
    name = f"mil-{Path(args.checkpoint).stem}.csv"
    _write_csv(out / name, ["seed", "split", "auroc"], rows)
    man.artifacts["metrics"] = name
    man.finished = time.time()
    man.write(out)
    print(f"test AUROC {mean:.4f} +/- {sd:.4f} over {len(tests)} seeds")
    return EXIT_OK


def _table(cfg: ExperimentConfig, out: Path, arms, command: str) -> tuple[int, dict]:
    man = pipeline.RunManifest(command, cfg, list(cfg.seeds), extra={"arms": list(arms)})
    man.derived = {str(s): s for s in cfg.seeds}
    out.mkdir(parents=True, exist_ok=True)
    man.write(out)
    results = {arm: {} for arm in arms}
    failed = {}
    for seed in cfg.seeds:
        rep = pipeline.make_replicate(cfg, seed)
        teacher, student, _ = pipeline.pretrained_encoders(cfg, seed, out / "cache")
        for arm in arms:
            if arm in failed:
                continue
            try:
                results[arm][seed] = pipeline.run_arm(cfg, rep, teacher, student, arm)
            except TrainingDivergence as exc:
                failed[arm] = str(exc)
    header = ["arm"] + [f"seed_{s}" for s in cfg.seeds] + ["mean", "sd", "contrast_mean", "status"]
    rows = []
    for arm in arms:
        if arm in failed:
            rows.append([arm] + [""] * (len(cfg.seeds) + 3) + ["failed"])
            continue
        vals = [results[arm][s].auroc["test"] for s in cfg.seeds]
        mean, sd = pipeline.mean_sd(vals)
        contrast = float(np.mean([results[arm][s].contrast for s in cfg.seeds]))
        rows.append([arm] + [_fmt(v) for v in vals] + [_fmt(mean), _fmt(sd), _fmt(contrast), "ok"])
    _write_csv(out / f"{command}.csv", header, rows)
    man.artifacts["table"] = f"{command}.csv"
    man.finished = time.time()
    man.write(out)
    for row in rows:
        print(" ".join(f"{c:>10}" if i else f"{c:<9}" for i, c in enumerate(
            [row[0]] + [c[:6] for c in row[1:-1]] + [row[-1]])))
    for arm, msg in failed.items():
        print(f"{arm} failed: {msg}", file=sys.stderr)
    return (EXIT_DIVERGED if failed else EXIT_OK), results


def cmd_eval(cfg: ExperimentConfig, out: Path, args) -> int:
    """Baseline against the configured variant over the seed list."""
    code, _ = _table(cfg, out, (pipeline.BASELINE, cfg.variant), "eval")
    return code


def cmd_ablate(cfg: ExperimentConfig, out: Path, args) -> int:
    code, _ = _table(cfg, out, pipeline.ARMS, "ablate")
    return code


def cmd_heatmap(cfg: ExperimentConfig, out: Path, args) -> int:
    if not args.checkpoint or not args.slide:
        raise ConfigError("heatmap needs --checkpoint and --slide")
    try:
        ref = tuple(int(v) for v in args.ref.split(","))
    except ValueError:
        ref = ()
    if len(ref) != 2:
        raise ConfigError(f"--ref expects row,col, got {args.ref!r}")
    man = pipeline.RunManifest("heatmap", cfg, list(cfg.seeds[:1]),
                               extra={"checkpoint": Path(args.checkpoint).name, "slide": args.slide, "ref": ref})
    out.mkdir(parents=True, exist_ok=True)
    man.write(out)
    path = _slides_dir(out) / f"{args.slide}.mcfa"
    if not path.exists():
        raise DataError(f"no archive for slide {args.slide!r} at {path}")
    arc = read_feature_archive(path)
    enc = checkpoint.load_encoder(args.checkpoint, cfg.patch)
    windows = archive_to_windows(arc, cfg.patch)
    feats = np.stack([enc.encode(w.patches) for w in windows])
    grid = feature_grid(feats, arc.origins, arc.s, (cfg.grid, cfg.grid))
    try:
        sims = similarity_grid(grid, ref)
    except KeyError as exc:
        raise DataError(str(exc.args[0])) from None
    prefix = f"heatmap-{args.slide}-{Path(args.checkpoint).stem}"
    write_heatmap(out / prefix, sims)
    man.artifacts.update(csv=f"{prefix}.csv", pgm=f"{prefix}.pgm")
    man.finished = time.time()
    man.write(out)
    print(f"wrote {prefix}.csv and {prefix}.pgm")
    return EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig, out: Path, args) -> int:
    from .gradcheck import run_all
    t0 = time.perf_counter()
    reports = run_all(seed=cfg.seeds[0])
    worst = 0.0
    for name, rep in reports.items():
        worst = max(worst, rep.max_rel_error)
        print(f"{'ok  ' if rep.passed else 'FAIL'} {name:<24} max rel err {rep.max_rel_error:.2e}")
    ok = all(r.passed for r in reports.values())
    print(f"{len(reports)} checks, worst {worst:.2e}, {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_DIVERGED


COMMANDS = {
    "gen": cmd_gen, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "train-mil": cmd_train_mil,
    "eval": cmd_eval, "ablate": cmd_ablate, "heatmap": cmd_heatmap, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcmkd", description="Masked context modelling with distillation, desk scale.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--seed", type=int, help="run a single seed instead of the config's seed list")
    ap.add_argument("--out", default="run", help="output directory (default: run)")
    ap.add_argument("--variant", help="one of " + ", ".join(v.value for v in Variant))
    ap.add_argument("--lr", type=float, help="fine-tuning learning rate (disables the sweep)")
    ap.add_argument("--checkpoint", help="student checkpoint for train-mil and heatmap")
    ap.add_argument("--slide", help="slide id for heatmap, e.g. slide_0003")
    ap.add_argument("--ref", default="0,0", help="reference patch row,col for heatmap")
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which would read as a data error here
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, Path(args.out), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
