"""
cli.py

Command-line entry point:

    python3 -m rangeseg_core <subcommand> [flags]

    synth     generate a labeled synthetic dataset
    project   dump range images and point groups for scans
    train     train a model on a dataset
    infer     write per-point .label predictions (--knn to refine)
    eval      mIoU of predictions against ground truth
    bench     per-stage timing report
    params    parameter count per preset
    history   recent runs from the audit ledger

Configuration layers: defaults < dataset.yaml < --config file < flags. The
resolved config is written to <out>/config.yaml. Failures end with a single
'🛑 [ERROR] ...' line and a non-zero exit code.
"""

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from .config import (ABLATIONS, ModelConfig, PRESETS, PRESET_REFERENCE_PARAMS, build_run_config, load_yaml,
                     manifest_layer, read_manifest, save_yaml)
from .console import configure_console, setup_logger, start_session_log, stop_session_log
from .errors import RangeSegError
from .evaluation import (ConfusionMatrix, bench, miou, pixel_accuracy, write_bench_report,
                         write_eval_report)
from .grouping import augment_features, export_groups, make_groups
from .inference import infer_dataset, load_model, pipeline_stages
from .network import build_model, count_parameters
from .projection import build_range_image, export_range_image
from .runs import history, record_run
from .scan_io import list_scan_pairs, read_label_file, read_scan, scan_id
from .synth import SceneSpec, generate_dataset
from .training import compute_class_weights, load_dataset, train

# --- CONFIGURATION ---
EXIT_USAGE = 2
EXIT_FORMAT = 4
BENCH_SOFT_TARGET_MS = 100.0
CONFIG_SNAPSHOT = "config.yaml"
EVAL_REPORT = "eval.csv"
BENCH_REPORT = "bench.csv"

logger = setup_logger("cli")


# --- FLAGS ---

def _add_common(p):
    p.add_argument("--config", help="YAML config file (overrides dataset.yaml, overridden by flags)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="parallel scans for infer/eval/synth")
    p.add_argument("--verbose", action="store_true")


def _add_geometry(p):
    p.add_argument("--width", type=int, help="range image width (default 2048)")
    p.add_argument("--height", type=int, help="range image height (default 64)")
    p.add_argument("--fov-up-deg", type=float)
    p.add_argument("--fov-down-deg", type=float)
    p.add_argument("--k", type=int, help="group window side (default 4)")
    p.add_argument("--stride", type=int, help="group window stride (default 4)")


def _add_model(p):
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--ablation", choices=["spatial", "local", "attention", "context", "full"])
    p.add_argument("--classes", type=int, help="number of classes")
    p.add_argument("--ignore-id", type=int)
    p.add_argument("--circular", action="store_true", default=None, help="wrap the azimuth axis")


def _add_knn(p):
    p.add_argument("--knn-window", type=int, help="KNN window side (default 7)")
    p.add_argument("--knn-k", type=int, help="KNN neighbours (default 7)")


def build_parser():
    parser = argparse.ArgumentParser(prog="rangeseg", description="Range-image LIDAR semantic segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    _add_common(p)
    p.add_argument("--num-scans", type=int, default=200)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--fov-up-deg", type=float, default=3.0)
    p.add_argument("--fov-down-deg", type=float, default=25.0)
    p.add_argument("--noise", type=float, default=0.0, help="range noise std (m)")

    p = sub.add_parser("project", help="dump range image and groups per scan")
    _add_common(p)
    _add_geometry(p)
    p.add_argument("scans", nargs="+", help=".bin scan files")

    p = sub.add_parser("train", help="train on a dataset directory")
    _add_common(p)
    _add_geometry(p)
    _add_model(p)
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--power-i", type=float)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False, default=None)
    p.add_argument("--no-progress", dest="progress", action="store_const", const=False, default=None)

    p = sub.add_parser("infer", help="predict per-point labels")
    _add_common(p)
    _add_knn(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--knn", action="store_true", help="refine labels with depth KNN")

    p = sub.add_parser("eval", help="mIoU of predictions against ground truth")
    _add_common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--ignore-id", type=int)
    p.add_argument("--data", required=True, help="dataset with ground-truth labels")
    p.add_argument("--pred", required=True, help="directory of predicted .label files")

    p = sub.add_parser("bench", help="per-stage timing report")
    _add_common(p)
    _add_geometry(p)
    _add_knn(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="include forward/reproject/knn stages")
    p.add_argument("--num-scans", type=int, default=20)
    p.add_argument("--warmup", type=int, default=1)

    p = sub.add_parser("params", help="parameter count per preset")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--ablation", choices=["spatial", "local", "attention", "context", "full"])
    p.add_argument("--classes", type=int, default=19)
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("history", help="recent runs")
    p.add_argument("--limit", type=int, default=10)
    p.add_argument("--verbose", action="store_true")
    return parser


# (flag, section, key, transform); section None means a top-level RunConfig field
FLAG_MAP = [
    ("out", None, "out", None),
    ("seed", None, "seed", None),
    ("seed", "train", "seed", None),
    ("workers", None, "workers", None),
    ("width", "projection", "width", None),
    ("height", "projection", "height", None),
    ("fov_up_deg", "projection", "fov_up", math.radians),
    ("fov_down_deg", "projection", "fov_down", math.radians),
    ("k", "grouping", "k", None),
    ("k", "model", "group_points", lambda k: k * k),
    ("stride", "grouping", "stride", None),
    ("preset", "model", "preset", None),
    ("ablation", "model", "ablation", None),
    ("classes", "model", "num_classes", None),
    ("circular", "model", "circular", None),
    ("circular", "knn", "circular", None),
    ("ignore_id", "loss", "ignore_id", None),
    ("power_i", "loss", "power_i", None),
    ("knn_window", "knn", "window", None),
    ("knn_k", "knn", "k", None),
    ("epochs", "train", "epochs", None),
    ("batch", "train", "batch_size", None),
    ("lr", "train", "lr", None),
    ("lr_decay", "train", "lr_decay", None),
    ("dtype", "train", "dtype", None),
    ("progress", "train", "progress", None),
    ("augment", "augmentation", "enabled", None),
]


def flag_layer(args):
    layer = {}
    for flag, section, key, transform in FLAG_MAP:
        value = getattr(args, flag, None)
        if value is None:
            continue
        value = transform(value) if transform else value
        target = layer if section is None else layer.setdefault(section, {})
        target[key] = value
    return layer


def resolve_config(args, dataset_dir=None, base_layers=(), needs_projection=True):
    layers = list(base_layers)
    if dataset_dir:
        layers.append(manifest_layer(read_manifest(dataset_dir)))
    if getattr(args, "config", None):
        layers.append(load_yaml(args.config))
    layers.append(flag_layer(args))
    cfg = build_run_config(layers)
    cfg.subcommand = args.command
    if dataset_dir:
        cfg.data = dataset_dir
    return cfg.validate(needs_projection=needs_projection)


def _trained_layer(cfg):
    """Config stored with a checkpoint, minus the paths of the run that wrote it."""
    return {k: v for k, v in cfg.to_dict().items() if k not in ("subcommand", "data", "val_data", "out")}


def _snapshot(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    return save_yaml(cfg.to_dict(), os.path.join(cfg.out, CONFIG_SNAPSHOT))


# --- SUBCOMMANDS ---

def cmd_synth(args):
    spec = SceneSpec(width=args.width, height=args.height, fov_up_deg=args.fov_up_deg,
                     fov_down_deg=args.fov_down_deg, noise_std=args.noise, seed=args.seed or 0)
    out = args.out or "data/synth"
    generate_dataset(args.num_scans, spec, out, workers=args.workers or 1)
    return out


def cmd_project(args):
    cfg = resolve_config(args)
    os.makedirs(cfg.out, exist_ok=True)
    for path in args.scans:
        img = build_range_image(read_scan(path), cfg.projection)
        groups = augment_features(make_groups(img, cfg.grouping))
        name = scan_id(path)
        export_range_image(img, os.path.join(cfg.out, name + ".range.bin"))
        export_groups(groups, os.path.join(cfg.out, name + ".groups.bin"))
        logger.info("%s: %d of %d pixels filled, %d groups", name, int(img.valid.sum()),
                    img.valid.size, groups.num_groups, extra={"tag": "SAVED"})
    _snapshot(cfg)
    return cfg.out


def cmd_train(args):
    cfg = resolve_config(args, args.data)
    cfg.val_data = args.val_data
    _snapshot(cfg)
    num_classes, ignore_id = cfg.model.num_classes, cfg.loss.ignore_id
    dataset = load_dataset(list_scan_pairs(args.data, require_labels=True), num_classes, ignore_id)
    if args.val_data:
        val_dataset = load_dataset(list_scan_pairs(args.val_data, require_labels=True), num_classes, ignore_id)
    else:
        val_dataset = dataset[:cfg.train.val_scans]
    loss_spec = compute_class_weights([labels for _, labels in dataset], num_classes,
                                      cfg.loss.power_i, ignore_id)
    model = build_model(cfg.model, seed=cfg.seed, dtype=cfg.train.dtype)
    logger.info("%s preset, %d parameters, %d scans, batch %d", cfg.model.preset, count_parameters(model),
                len(dataset), cfg.batch_size, extra={"tag": "TRAIN"})
    metrics = train(dataset, model, loss_spec, cfg, cfg.out, val_dataset)
    if len(metrics):
        logger.info("final loss %.4f, val mIoU %.4f", metrics["train_loss"].iloc[-1],
                    metrics["val_mIoU"].iloc[-1], extra={"tag": "DONE"})
    return cfg.out


def cmd_infer(args):
    model, trained_cfg, epoch = load_model(args.checkpoint)
    cfg = resolve_config(args, args.data, base_layers=[_trained_layer(trained_cfg)])
    _snapshot(cfg)
    scans = [scan for scan, _ in list_scan_pairs(args.data)]
    logger.info("checkpoint epoch %d, %d scans, knn=%s", epoch, len(scans), args.knn, extra={"tag": "INFER"})
    infer_dataset(model, scans, cfg, cfg.out, knn=args.knn, workers=cfg.workers)
    return cfg.out


def _scan_confusion(pair, pred_dir, num_classes, ignore_id):
    _, label_path = pair
    pred_path = os.path.join(pred_dir, os.path.basename(label_path))
    cm = ConfusionMatrix(num_classes, ignore_id)
    truth = read_label_file(label_path)
    try:
        cm.accumulate(truth, read_label_file(pred_path))
    except RangeSegError as e:
        raise type(e)(f"{pred_path}: {e}") from e
    return cm


def cmd_eval(args):
    cfg = resolve_config(args, args.data, needs_projection=False)
    _snapshot(cfg)
    pairs = list_scan_pairs(args.data, require_labels=True)
    num_classes, ignore_id = cfg.model.num_classes, cfg.loss.ignore_id
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        matrices = list(pool.map(lambda pair: _scan_confusion(pair, args.pred, num_classes, ignore_id), pairs))
    total = ConfusionMatrix(num_classes, ignore_id)
    for cm in matrices:
        total.merge(cm)
    names = read_manifest(args.data).get("dataset", {}).get("class_names")
    if names is not None and len(names) != num_classes:
        names = None
    report = write_eval_report(total, os.path.join(cfg.out, EVAL_REPORT), names)
    _, mean = miou(total)
    logger.info("mIoU %.4f, pixel accuracy %.4f over %d scans -> %s", mean, pixel_accuracy(total),
                len(pairs), report, extra={"tag": "EVAL"})
    return cfg.out


def cmd_bench(args):
    base = []
    model = None
    if args.checkpoint:
        model, trained_cfg, _ = load_model(args.checkpoint)
        base = [_trained_layer(trained_cfg)]
    cfg = resolve_config(args, args.data, base_layers=base)
    _snapshot(cfg)
    scans = [scan for scan, _ in list_scan_pairs(args.data)][:args.num_scans]
    if len(scans) < 10:
        logger.warning("only %d scans; timings are noisy below 10", len(scans), extra={"tag": "BENCH"})
    report = bench(pipeline_stages(model, cfg, knn=True), (read_scan(s) for s in scans), warmup=args.warmup)
    path = write_bench_report(report, os.path.join(cfg.out, BENCH_REPORT))
    for row in report.table.itertuples(index=False):
        logger.info("%-10s median %8.2f ms  p95 %8.2f ms", row.stage, row.median_ms, row.p95_ms,
                    extra={"tag": "BENCH"})
    geometry = sum(report.stage(name)[0] for name in ("project", "group", "reproject", "knn")
                   if name in set(report.table["stage"]))
    if geometry > BENCH_SOFT_TARGET_MS:
        logger.warning("non-learning stages take %.1f ms (target %.0f ms)", geometry, BENCH_SOFT_TARGET_MS,
                       extra={"tag": "BENCH"})
    logger.info("report -> %s", path, extra={"tag": "SAVED"})
    return cfg.out


def cmd_params(args):
    presets = [args.preset] if args.preset else list(PRESETS)
    overrides = dict(ABLATIONS[args.ablation]) if args.ablation else {}
    for name in presets:
        cfg = ModelConfig.from_preset(name, num_classes=args.classes, **overrides)
        count = count_parameters(build_model(cfg))
        reference = PRESET_REFERENCE_PARAMS[name]
        logger.info("%s: %d parameters (reference %d, %+.1f%%)", name, count, reference,
                    100.0 * (count - reference) / reference, extra={"tag": "PARAMS"})
        print(count)
    return None


def cmd_history(args):
    recent, rate = history(args.limit)
    print("\n" + "=" * 50)
    print("📊 RANGESEG RUN HISTORY")
    print("=" * 50)
    if recent.empty:
        print("No runs recorded yet.")
        return None
    print(f"Success Rate: {rate:.1f}%")
    print("-" * 50)
    for row in recent.itertuples(index=False):
        icon = "✅" if row.exit_code == 0 else "❌"
        print(f"{icon} [{row.timestamp}] {row.subcommand} (exit {row.exit_code})")
        if row.out_dir:
            print(f"   ↳ {row.out_dir}")
        if row.detail:
            print(f"   ↳ {row.detail}")
    return None


COMMANDS = {
    "synth": cmd_synth,
    "project": cmd_project,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "params": cmd_params,
    "history": cmd_history,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else 0

    configure_console(args.verbose)
    start_session_log(args.command)
    code, detail, out_dir = 0, "", None
    try:
        out_dir = COMMANDS[args.command](args)
    except RangeSegError as e:
        code, detail = e.exit_code, str(e)
    except FileNotFoundError as e:
        code, detail = EXIT_FORMAT, f"missing file: {e.filename or e}"
    except OSError as e:
        code, detail = EXIT_FORMAT, str(e)
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        code, detail = 1, f"{type(e).__name__}: {e}"
    if code:
        logger.error(detail, extra={"tag": "ERROR"})
    stop_session_log()
    try:
        record_run(args.command, argv, code, out_dir, detail)
    except Exception as e:
        logger.warning("could not record run: %s", e, extra={"tag": "AUDIT"})
    return code
