"""Command line: convert, selftest, train, eval, sweep, bench, synth.

Exit codes: 0 success, 1 a check or test failed, 2 usage, config or input error.
Heavy imports happen after argument parsing so ``--workers`` can cap the
BLAS thread pool before numpy loads.
"""

import argparse
import json
import os
import subprocess
import sys

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MANIFEST_FORMAT_VERSION = 1


def build_id():
    """``git describe`` of the source tree when available, else the package version."""
    from . import __version__

    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
            capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def run_manifest(command, config, dataset_fingerprint=None, extra=None):
    from . import _backend

    man = {
        "command": command,
        "format_version": MANIFEST_FORMAT_VERSION,
        "build_id": build_id(),
        "backend": _backend.current(),
        "config": config,
        "dataset_fingerprint": dataset_fingerprint,
    }
    if extra:
        man.update(extra)
    return man


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _split(arrays, prefix, path):
    from .errors import MissingEntry

    for suffix in ("_images", "_labels"):
        if prefix + suffix not in arrays:
            raise MissingEntry(f"{prefix}{suffix} (in {path})")
    return arrays[prefix + "_images"], arrays[prefix + "_labels"]


def _maybe_resize(xs, size):
    import numpy as np

    from .volume import resize_trilinear

    if not size or xs.shape[1:4] == (size,) * 3:
        return xs
    return np.stack([resize_trilinear(x, (size,) * 3) for x in xs])


def _precision_dtype(precision):
    import numpy as np

    return np.float64 if str(precision) == "64" else np.float32


def _load_model(path, precision):
    from .network import cast_params, load_checkpoint

    params, arch, manifest = load_checkpoint(path, with_manifest=True)
    return cast_params(params, _precision_dtype(precision)), arch, manifest


def _dataset_for_model(path, split, manifest):
    arrays, fp = _read(path)
    xs, ys = _split(arrays, split, path)
    size = manifest.get("extra", {}).get("resize", 0)
    return _maybe_resize(xs, size), ys, fp


def _read(path):
    from .volume import read_dataset

    return read_dataset(path)


# ------------------------------------------------------------- commands

def cmd_convert(args):
    from .volume import container_to_npz, npz_to_container, read_container

    import io
    import zipfile

    with open(args.input, "rb") as fh:
        data = fh.read()
    try:
        names = zipfile.ZipFile(io.BytesIO(data)).namelist()
    except zipfile.BadZipFile:
        names = []
    if "manifest.json" in names:
        read_container(args.input)
        out = container_to_npz(args.input)
        with open(args.output, "wb") as fh:
            fh.write(out)
        print(f"wrote NPZ {args.output}")
    else:
        require = () if args.no_require else ("train_images", "train_labels")
        man = npz_to_container(data, args.output, require=require)
        print(f"wrote container {args.output} (fingerprint {man['fingerprint'][:16]}, "
              f"rescaled from uint8: {', '.join(man['u8_scaled']) or 'none'})")
    return EXIT_OK


def cmd_selftest(args):
    from .equicheck import run_selftest

    results = run_selftest(precision=int(args.precision), disambiguate=not args.no_sign_fix, seed=args.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        note = f"  ({r.note})" if r.note else ""
        print(f"{status} {r.name:<20} max_residual={r.max_residual:.3e} tol={r.tolerance:.0e}{note}")
    ok = all(r.passed for r in results)
    print("selftest passed" if ok else "selftest FAILED")
    return EXIT_OK if ok else EXIT_FAIL


def arch_from_config(net, num_classes):
    from .network import Arch, BlockConfig

    widths = net["widths"] if net["preset"] == "custom" else (16, 16, 32, 32, 64)
    stride_block = net["stride_block"] if net["preset"] == "custom" else 1
    blocks = tuple(
        BlockConfig(channels=w, sigma=net["sigma"], leaky_slope=net["leaky_slope"],
                    residual=i > 0, stride=2 if i == stride_block else 1)
        for i, w in enumerate(widths))
    return Arch(blocks, num_classes, frame_sigma=net["frame_sigma"], tau=net["tau"],
                padding=net["padding"])


def cmd_train(args):
    from .config import dump_config, load_config
    from .errors import ConfigError
    from .network import init_params, save_checkpoint
    from .train import TrainConfig, train_loop

    cfg = load_config(args.config)
    if args.out_dir:
        cfg["run"]["out_dir"] = args.out_dir
    data = cfg["data"]
    if not data["path"]:
        raise ConfigError("[data] path is required", path=args.config)
    path = data["path"]
    if not os.path.isabs(path):
        path = os.path.join(os.path.dirname(os.path.abspath(args.config)), path)
    arrays, fp = _read(path)
    tx, ty = _split(arrays, data["train_split"], path)
    vx, vy = _split(arrays, data["val_split"], path)
    tx, vx = _maybe_resize(tx, data["resize"]), _maybe_resize(vx, data["resize"])
    num_classes = cfg["network"]["num_classes"] or int(max(ty.max(), vy.max()) + 1)
    try:
        arch = arch_from_config(cfg["network"], max(num_classes, 2))
        tcfg = TrainConfig(**cfg["train"])
    except ValueError as exc:
        raise ConfigError(str(exc), path=args.config) from None
    out = cfg["run"]["out_dir"]
    os.makedirs(out, exist_ok=True)
    dtype = _precision_dtype(cfg["run"]["precision"])
    params = init_params(arch, seed=tcfg.seed, dtype=dtype)
    best, history = train_loop(tx, ty, vx, vy, arch, tcfg, params=params,
                               history_path=os.path.join(out, "history.csv"))
    manifest = run_manifest("train", cfg, fp, {"arch": arch.to_dict()})
    save_checkpoint(best, arch, os.path.join(out, "checkpoint.mfc"),
                    extra={"resize": data["resize"], "run": manifest})
    write_json(os.path.join(out, "manifest.json"), manifest)
    with open(os.path.join(out, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    best_acc = max(r["val_accuracy"] for r in history) if history else float("nan")
    print(f"trained {len(history)} epochs; best val accuracy {best_acc:.4f}; outputs in {out}")
    return EXIT_OK


def _metrics_dict(m):
    return {
        "accuracy": m.accuracy,
        "mean_cross_entropy": m.mean_cross_entropy,
        "total": m.total,
        "class_total": m.class_total.tolist(),
        "class_correct": m.class_correct.tolist(),
    }


def cmd_eval(args):
    from .train import evaluate

    params, arch, man = _load_model(args.checkpoint, args.precision)
    xs, ys, fp = _dataset_for_model(args.dataset, args.split, man)
    m = evaluate(xs, ys, params, arch, batch_size=args.batch_size)
    d = _metrics_dict(m)
    print(f"accuracy {m.accuracy:.4f} ({int(m.class_correct.sum())}/{m.total})  "
          f"mean cross-entropy {m.mean_cross_entropy:.4f}")
    for k, (c, t) in enumerate(zip(m.class_correct, m.class_total)):
        print(f"  class {k}: {int(c)}/{int(t)}")
    if args.out:
        cfg = {"checkpoint": args.checkpoint, "dataset": args.dataset, "split": args.split,
               "precision": args.precision}
        write_json(args.out, {"metrics": d, "manifest": run_manifest("eval", cfg, fp)})
    return EXIT_OK


def _parse_angles(text):
    if ":" in text:
        lo, hi, step = (float(p) for p in text.split(":"))
        n = int(round((hi - lo) / step))
        return tuple(lo + step * i for i in range(n + 1))
    return tuple(float(p) for p in text.split(","))


def cmd_sweep(args):
    from .equicheck import rotation_sweep, write_sweep_csv

    params, arch, man = _load_model(args.checkpoint, args.precision)
    xs, ys, fp = _dataset_for_model(args.dataset, args.split, man)
    if args.limit:
        xs, ys = xs[:args.limit], ys[:args.limit]
    angles = _parse_angles(args.angles)
    axes = [a.strip().upper() for a in args.axes.split(",") if a.strip()]
    for a in axes:
        if a not in ("X", "Y", "Z"):
            raise ValueError(f"unknown axis {a!r}; use X, Y or Z")
    os.makedirs(args.out_dir, exist_ok=True)
    cfg = {"checkpoint": args.checkpoint, "dataset": args.dataset, "split": args.split,
           "angles": list(angles), "axes": axes, "precision": args.precision}
    for a in axes:
        res = rotation_sweep(params, arch, xs, ys, a, angles, batch_size=args.batch_size)
        path = os.path.join(args.out_dir, f"sweep_{a}.csv")
        write_sweep_csv(path, [res])
        print(f"axis {a}: accuracy at 0 deg {res.accuracy[0]:.4f}, "
              f"min {min(res.accuracy):.4f}; wrote {path}")
    write_json(os.path.join(args.out_dir, "manifest.json"), run_manifest("sweep", cfg, fp))
    return EXIT_OK


def cmd_bench(args):
    import csv

    from .bench import BENCH_HEADER, compare_backends, linear_fit, width_sweep

    widths = tuple(int(w) for w in args.widths.split(","))
    rows = []
    for size in (int(s) for s in args.sizes.split(",")):
        rows.extend(width_sweep(size, widths, args.repeats))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_HEADER)
        for r in rows:
            w.writerow(list(r[:4]) + [repr(r[4])])
    r2_all = []
    for size in sorted({r[0] for r in rows}):
        sel = [r for r in rows if r[0] == size]
        a, b, r2 = linear_fit([r[3] for r in sel], [r[4] for r in sel])
        r2_all.append(r2)
        print(f"{size}^3: seconds = {a:.4g} + {b:.4g} * w   (R^2 = {r2:.4f})")
    extra = {}
    if args.compare_backends:
        times, diff = compare_backends(repeats=args.repeats)
        for name, t in times.items():
            print(f"backend {name:<8} jet 32^3: {t * 1e3:.2f} ms")
        if "compiled" in times:
            print(f"speedup {times['python'] / times['compiled']:.2f}x, max output difference {diff:.2e}")
        extra = {"backend_seconds": times, "backend_max_diff": diff}
    cfg = {"sizes": args.sizes, "widths": list(widths), "repeats": args.repeats}
    write_json(args.out + ".manifest.json", run_manifest("bench", cfg, None, {"r_squared": r2_all, **extra}))
    return EXIT_OK


def cmd_synth(args):
    from .train import make_blob_dataset
    from .volume import save_npz, fingerprint

    tx, ty = make_blob_dataset(args.n_train, args.size, seed=args.seed)
    vx, vy = make_blob_dataset(args.n_val, args.size, seed=args.seed + 1)
    sx, sy = make_blob_dataset(args.n_test, args.size, seed=args.seed + 2)
    arrays = {"train_images": tx, "train_labels": ty, "val_images": vx, "val_labels": vy,
              "test_images": sx, "test_labels": sy}
    with open(args.output, "wb") as fh:
        fh.write(save_npz(arrays))
    cfg = {k: getattr(args, k) for k in ("n_train", "n_val", "n_test", "size", "seed")}
    write_json(args.output + ".manifest.json", run_manifest("synth", cfg, fingerprint(arrays)))
    print(f"wrote {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="movfnet", description=__doc__.split("\n")[0])
    p.add_argument("--workers", type=int, default=None, help="cap BLAS/OpenMP threads")
    p.add_argument("--backend", choices=("compiled", "python"), default=None,
                   help="kernel implementation (default: compiled when built)")
    p.add_argument("--deterministic", action="store_true",
                   help="ordered reductions (always on; accepted for scripts)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("convert", help="NPZ dataset <-> container")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--no-require", action="store_true", help="do not require train_images/train_labels")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("selftest", help="run the invariance and numerics suites")
    s.add_argument("--precision", choices=("32", "64"), default="32")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-sign-fix", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selftest)

    s = sub.add_parser("train", help="train from a config file")
    s.add_argument("config")
    s.add_argument("--out-dir", default=None)
    s.set_defaults(func=cmd_train)

    for name, func in (("eval", cmd_eval), ("sweep", cmd_sweep)):
        s = sub.add_parser(name, help=f"{name} a checkpoint on a dataset")
        s.add_argument("checkpoint")
        s.add_argument("dataset")
        s.add_argument("--split", default="test")
        s.add_argument("--precision", choices=("32", "64"), default="32")
        s.add_argument("--batch-size", type=int, default=32)
        if name == "eval":
            s.add_argument("--out", default=None, help="write metrics JSON with manifest")
        else:
            s.add_argument("--axes", default="Z,Y,X")
            s.add_argument("--angles", default="0:360:15", help="lo:hi:step or a comma list (degrees)")
            s.add_argument("--limit", type=int, default=0, help="use only the first N samples")
            s.add_argument("--out-dir", default="sweep")
        s.set_defaults(func=func)

    s = sub.add_parser("bench", help="jet runtime against kernel width")
    s.add_argument("--sizes", default="64")
    s.add_argument("--widths", default="5,9,13,17")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--out", default="bench.csv")
    s.add_argument("--compare-backends", action="store_true")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", help="write the one-vs-two blob dataset as NPZ")
    s.add_argument("output")
    s.add_argument("--n-train", type=int, default=2000)
    s.add_argument("--n-val", type=int, default=500)
    s.add_argument("--n-test", type=int, default=500)
    s.add_argument("--size", type=int, default=29)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.workers:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.workers)
    import logging

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import _backend
    from .errors import MovFNetError

    try:
        if args.backend:
            _backend.set_backend(args.backend)
        return args.func(args)
    except (MovFNetError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
