"""Operator CLI: corpus generation, patch extraction, training, evaluation,
threshold sweeps, serving, remote prediction, and the latency comparison."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, crypto, data, metrics, model, pem, report, service
from .errors import SpfError

log = logging.getLogger("spf.cli")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 (argparse's default of 2 is our runtime-error code)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _setup_logging():
    level = os.environ.get("SPF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _write_run_config(out_dir, args):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    log.info("resolved config: %s", resolved)
    with open(Path(out_dir) / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, default=str)
        fh.write("\n")


def _parse_bind(text):
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


# ------------------------------------------------------------------ commands

def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    _write_run_config(args.out, args)
    manifest = data.synth_generate(args.out, args.n, args.patch_size, args.seed)
    counts = manifest.class_counts()
    print(f"wrote {len(manifest.records)} samples "
          f"({counts['bona_fide']} bona fide, {counts['attack']} attack) to {args.out}")
    return 0


def cmd_extract(args):
    os.makedirs(args.out, exist_ok=True)
    _write_run_config(args.out, args)
    cfg = pem.PemConfig(patch_size=args.patch_size)
    images = sorted(Path(args.images).glob("*.ppm"))
    if not images:
        print(f"no .ppm images under {args.images}", file=sys.stderr)
        return 2
    done = 0
    for idx, img_path in enumerate(images):
        kp_path = img_path.with_suffix(".json")
        if not kp_path.exists():
            print(f"skipping {img_path.name}: no keypoint sidecar", file=sys.stderr)
            continue
        face = pem.FaceRecord(image=pem.read_ppm(img_path),
                              keypoints=pem.load_keypoints(kp_path),
                              source_id=img_path.stem)
        seed = data.derive_seed(args.seed, idx)
        aligned = pem.align(face, cfg)
        ps = pem.select_patches(aligned, k=args.k, out_size=args.patch_size,
                                seed=seed, cfg=cfg)
        out_base = Path(args.out) / img_path.stem
        pem.save_patchset(f"{out_base}.w32", ps)
        provenance = {
            "source": img_path.name, "seed": ps.seed, "k": ps.k,
            "patch_size": args.patch_size,
            "regions": [{"region_id": r.region_id,
                         "center": [float(c) for c in r.center],
                         "half_extent": r.half_extent,
                         "jitter_offset": list(r.jitter_offset)} for r in ps.regions],
        }
        with open(f"{out_base}.patches.json", "w", encoding="utf-8") as fh:
            json.dump(provenance, fh, indent=2)
            fh.write("\n")
        done += 1
    print(f"extracted patches for {done}/{len(images)} faces into {args.out}")
    return 0


def _load_split(args):
    manifest = data.load_manifest(args.data)
    ds = data.PatchDataset.from_manifest(manifest)
    return data.split_dataset(ds, args.val_frac, seed=args.seed)


def cmd_train(args):
    os.makedirs(args.out, exist_ok=True)
    _write_run_config(args.out, args)
    train_set, val_set = _load_split(args)
    mcfg = model.ModelConfig(branches=args.branches,
                             share_branch_weights=args.share_weights,
                             patch_size=train_set.patch_size, seed=args.seed)
    m = model.build(mcfg)
    tcfg = model.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                             epochs=args.epochs, seed=args.seed,
                             augment=not args.no_augment,
                             rand_patch=args.rand_patch)
    train_report = model.train(m, train_set, val_set, tcfg)

    out = Path(args.out)
    model.save_checkpoint(out / "checkpoint.w32", m)
    with open(out / "history.csv", "w", encoding="utf-8") as fh:
        fh.write(train_report.history_csv())
    report.training_figure(train_report, out / "training.png")
    print(f"best val ACER {train_report.best_val_acer:.4f} at epoch "
          f"{train_report.best_epoch}; checkpoint in {args.out}")
    return 0


def _eval_pairs(args):
    manifest = data.load_manifest(args.data)
    ds = data.PatchDataset.from_manifest(manifest)
    m = model.load_checkpoint(args.checkpoint)
    return model.evaluate(m, ds, model.DecisionConfig(args.threshold))


def cmd_eval(args):
    os.makedirs(args.out, exist_ok=True)
    _write_run_config(args.out, args)
    rep, _ = _eval_pairs(args)
    with open(Path(args.out) / "metrics.json", "w", encoding="utf-8") as fh:
        fh.write(rep.to_json() + "\n")

    def pct(x):
        return "undefined" if x is None else f"{100 * x:.2f}%"

    print(f"n={rep.n_samples} at H={rep.threshold}: "
          f"APCER {pct(rep.apcer)}, BPCER {pct(rep.bpcer)}, ACER {pct(rep.acer)}")
    return 0


def cmd_sweep(args):
    os.makedirs(args.out, exist_ok=True)
    _write_run_config(args.out, args)
    args.threshold = 0.5
    _, pairs = _eval_pairs(args)
    curve = metrics.sweep(pairs, n_points=args.points)
    out = Path(args.out)
    with open(out / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write(curve.to_csv())
    report.sweep_figure(curve, out / "sweep.png")
    print(f"best threshold {curve.best_threshold:.4f} with "
          f"ACER {100 * curve.best_acer:.2f}% ({args.points} points)")
    return 0


def cmd_serve(args):
    m = model.load_checkpoint(args.checkpoint)
    host, port = _parse_bind(args.bind)
    srv = service.serve(m, model.DecisionConfig(args.threshold), host, port,
                        max_connections=args.max_connections)
    print(f"serving {args.checkpoint} on {srv.address[0]}:{srv.address[1]} "
          f"(H={args.threshold})")
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        srv.shutdown()
    return 0


def cmd_predict(args):
    kp_path = args.keypoints or str(Path(args.image).with_suffix(".json"))
    face = pem.FaceRecord(image=pem.read_ppm(args.image),
                          keypoints=pem.load_keypoints(kp_path),
                          source_id=Path(args.image).stem)
    resp = service.predict_remote(face, _parse_bind(args.server), seed=args.seed,
                                  k=args.k, timeout_ms=args.timeout_ms)
    print(json.dumps({"request_id": resp.request_id,
                      "p_bona_fide": resp.p_bona_fide,
                      "label": resp.label,
                      "label_name": model.Label(resp.label).name,
                      "infer_ms": resp.infer_ms,
                      "model_digest": resp.model_digest}))
    return 0


def _live_bench(args):
    if args.trials < 1:
        raise SpfError(f"--trials must be >= 1, got {args.trials}")
    rng = np.random.default_rng(args.seed)
    face = data.synthetic_face(seed=args.seed)
    aligned = pem.align(face)
    ps = pem.select_patches(aligned, k=2, out_size=64, seed=args.seed)

    # the sensitive payload: a 224x224 8-bit face crop
    crop_region = pem.PatchRegion(center=(112.0, 176.0), half_extent=112.0,
                                  region_id=pem.CHIN)
    crop = pem.extract(aligned.image, crop_region, out_size=224)
    img_payload = bench.image_bytes(crop)
    patch_payload = bench.patch_bytes(ps.patches)

    if args.checkpoint:
        m = model.load_checkpoint(args.checkpoint)
    else:
        m = model.build(model.ModelConfig(branches=2, patch_size=64,
                                          seed=args.seed))
    views = [p.astype(np.float32) for p in ps.patches]

    def infer():
        return m.probabilities(views)

    ch = bench.ChannelConfig(rtt_ms=args.rtt_ms,
                             bandwidth_bytes_per_ms=args.bandwidth)
    clock = bench.WallClockTiming()
    key = rng.bytes(32)
    ladder = crypto.NonceLadder()
    wins = 0
    trad = patch = None
    for _ in range(args.trials):
        trad = bench.run_pipeline(bench.TRADITIONAL, img_payload, infer, ch,
                                  clock, key=key, ladder=ladder)
        patch = bench.run_pipeline(bench.PATCH_PATH, patch_payload, infer, ch,
                                   clock)
        if patch.t_total_ms < trad.t_total_ms:
            wins += 1
    comparison = bench.compare(trad, patch)
    return comparison, wins


def cmd_bench(args):
    if args.fixture:
        trad_t, patch_t = bench.load_fixture(args.fixture)
        ch = bench.ChannelConfig()
        trad = bench.run_pipeline(bench.TRADITIONAL, b"", lambda: None, ch, trad_t)
        patch = bench.run_pipeline(bench.PATCH_PATH, b"", lambda: None, ch, patch_t)
        comparison = bench.compare(trad, patch)
        wins = None
    else:
        comparison, wins = _live_bench(args)

    print(comparison.to_text())
    if wins is not None:
        print(f"patch path faster in {wins}/{args.trials} trials")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_run_config(args.out, args)
        out = Path(args.out)
        with open(out / "comparison.json", "w", encoding="utf-8") as fh:
            fh.write(comparison.to_json() + "\n")
        report.latency_figure(comparison, out / "latency.png")
    return 0


# --------------------------------------------------------------------- wiring

def build_parser(config_defaults=None):
    parser = _Parser(prog="spf", description=__doc__, epilog=(
        "A single '--config file.json' (anywhere on the command line) supplies "
        "defaults for optional flags; explicit flags win."))
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)
    overrides = {k.replace("-", "_"): v for k, v in (config_defaults or {}).items()
                 if k.replace("-", "_") not in ("func", "command")}
    subparsers = []

    def add_parser(name, **kw):
        p = sub.add_parser(name, **kw)
        subparsers.append(p)
        return p

    p = add_parser("synth", help="generate a synthetic patch corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100, help="samples per class")
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = add_parser("extract", help="extract skin patches from face images")
    p.add_argument("--images", required=True, help="directory of .ppm + .json pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=2, choices=(1, 2, 3))
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract)

    p = add_parser("train", help="train the patch classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--branches", type=int, default=2, choices=(1, 2, 3))
    p.add_argument("--share-weights", action="store_true")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rand-patch", action="store_true",
                   help="random patch-to-branch assignment each epoch")
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = add_parser("sweep", help="threshold sweep over a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--points", type=int, default=99)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = add_parser("serve", help="serve a checkpoint over the patch protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bind", default="127.0.0.1:7860")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--max-connections", type=int, default=64)
    p.set_defaults(func=cmd_serve)

    p = add_parser("predict", help="extract patches locally, classify remotely")
    p.add_argument("--image", required=True, help="binary P6 .ppm face image")
    p.add_argument("--keypoints", help="keypoint sidecar (default: image stem + .json)")
    p.add_argument("--server", required=True, help="host:port")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=2, choices=(1, 2, 3))
    p.add_argument("--timeout-ms", type=int, default=2000)
    p.set_defaults(func=cmd_predict)

    p = add_parser("bench", help="latency comparison of both pipelines")
    p.add_argument("--fixture", help="replay a constant-timing JSON table")
    p.add_argument("--checkpoint", help="model for live inference timing")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--rtt-ms", type=float, default=3.0)
    p.add_argument("--bandwidth", type=float, default=1000.0,
                   help="bytes per millisecond")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write comparison.json and latency.png here")
    p.set_defaults(func=cmd_bench)

    if overrides:
        # replaces argument-level defaults; explicit flags still win
        for p in subparsers:
            p.set_defaults(**overrides)
    return parser


def _extract_config(argv):
    """Pull one `--config file.json` out of argv; its values become defaults
    that explicit flags still override."""
    argv = list(argv)
    for i, token in enumerate(argv):
        if token == "--config":
            if i + 1 >= len(argv):
                raise SystemExit(1)
            path = argv[i + 1]
            del argv[i:i + 2]
            with open(path, "r", encoding="utf-8") as fh:
                return argv, json.load(fh)
        if token.startswith("--config="):
            path = token.split("=", 1)[1]
            del argv[i]
            with open(path, "r", encoding="utf-8") as fh:
                return argv, json.load(fh)
    return argv, {}


def main(argv=None):
    _setup_logging()
    if argv is None:
        argv = sys.argv[1:]
    try:
        argv, config = _extract_config(argv)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    parser = build_parser(config)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.func(args)
    except SpfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
