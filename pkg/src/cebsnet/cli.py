"""Command-line entry point: ``cebsnet <command> [flags]``.

Exit codes: 0 success, 1 contract violation (bad flag, key, value or shape),
2 I/O error (missing, unreadable or unwritable file).
"""

import argparse
import csv
import logging
import os
import sys
import time

import numpy as np
from PIL import Image

from . import data, kernels
from .config import ModelConfig, TrainConfig, load_config
from .metrics import format_report
from .tensor import ContractError, Tensor, no_grad
from .trainer import CheckpointError

log = logging.getLogger("cebsnet")

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


class UsageError(ContractError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; here that is a contract violation
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


def _fraction(raw):
    try:
        v = float(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {raw!r}") from None
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0,1), got {raw}")
    return v


def build_parser():
    p = _Parser(prog="cebsnet", description="Bitemporal change detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic bitemporal dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--difficulty", type=float, default=0.5)
    g.add_argument("--objects", type=int, default=None, help="changes per pair (default: random 1-6; 0 = nuisance only)")
    g.add_argument("--val-frac", type=_fraction, default=0.0)
    g.add_argument("--test-frac", type=_fraction, default=0.25)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--out", required=True, help="directory for last.ckpt and history.csv")
    t.add_argument("--epochs", type=int, help="override the config's epoch count (0 = validate only)")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test")

    r = sub.add_parser("predict", help="write the change map for one image pair")
    r.add_argument("--a", required=True)
    r.add_argument("--b", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--dump-intermediate", metavar="DIR", help="also write the seven change maps as PNGs")

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--module", help="tensorops, encoder, refine, detector or objective (default: all)")
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--seeds", type=int, default=20)

    sub.add_parser("selftest", help="run every invariant check")
    return p


# ------------------------------------------------------------------ commands

def cmd_gen_data(args):
    t0 = time.perf_counter()
    m = data.gen_synthetic(args.out, args.seed, args.count, args.size, args.difficulty,
                           args.objects, args.val_frac, args.test_frac)
    counts = ", ".join(f"{s}={len(m.ids(s))}" for s in data.SPLITS if m.ids(s))
    print(f"wrote {args.count} pairs ({3 * args.count} PNGs) of {args.size}x{args.size} to {args.out}: {counts} "
          f"[{time.perf_counter() - t0:.1f}s]")
    return EXIT_OK


def _dataset_size(manifest):
    split = next(s for s in data.SPLITS if manifest.ids(s))
    return data.read_sample(manifest, manifest.ids(split)[0], split).gt.shape[0]


def cmd_train(args):
    from .trainer import evaluate, train

    if args.config:
        model_cfg, train_cfg = load_config(args.config)
        with open(args.config) as fh:
            explicit_size = any(ln.split("#")[0].split("=")[0].strip() == "input_size" for ln in fh)
    else:
        model_cfg, train_cfg, explicit_size = ModelConfig(), TrainConfig(), False
    if args.epochs is not None:
        if args.epochs < 0:
            raise UsageError(f"--epochs must be >= 0, got {args.epochs}")
        train_cfg.epochs = args.epochs
    manifest = data.load_dataset(args.data)
    size = _dataset_size(manifest)
    if size != model_cfg.input_size:
        if explicit_size:
            raise UsageError(f"config input_size={model_cfg.input_size} but {args.data} holds {size}x{size} images")
        model_cfg.input_size = size
    model_cfg.validate()

    if train_cfg.epochs == 0:
        from .model import CEBSNet

        split = "val" if manifest.ids("val") else "train"
        model = CEBSNet(model_cfg, seed=train_cfg.seed)
        s, counts = evaluate(model, manifest, split)
        print(f"validation-only pass on split {split!r} (no checkpoint written)")
        print(format_report(s, counts))
        return EXIT_OK

    os.makedirs(args.out, exist_ok=True)
    history = os.path.join(args.out, "history.csv")
    if os.path.exists(history):
        os.remove(history)

    def progress(it, report):
        log.info("iter %d loss %.4f", it, report.value)

    result = train(model_cfg, train_cfg, manifest, out_dir=args.out, history_csv=history, progress=progress)
    if result.evals:
        with open(os.path.join(args.out, "val_metrics.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("epoch", "P", "R", "F1", "OA", "IoU"))
            for epoch, s in result.evals:
                w.writerow([epoch] + [f"{v:.6f}" for v in s.as_dict().values()])
    last = result.history[-1]
    print(f"trained {len(result.history)} iterations; loss {result.initial_loss:.4f} -> {last[-1]:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"history: {history}")
    return EXIT_OK


def cmd_eval(args):
    from .trainer import evaluate, load_checkpoint

    model, _, _ = load_checkpoint(args.ckpt)
    manifest = data.load_dataset(args.data)
    s, counts = evaluate(model, manifest, args.split)
    print(format_report(s, counts))
    return EXIT_OK


def _read_image(path, flag):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{flag}: no such file {path!r}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB")).transpose(2, 0, 1).astype(np.float32) / 255.0
    except OSError as exc:
        raise OSError(f"{flag}: cannot read image {path!r}: {exc}") from exc


def _save_map(path, prob):
    Image.fromarray(np.round(prob * 255).astype(np.uint8)).save(path)


def cmd_predict(args):
    from . import ops
    from .trainer import load_checkpoint

    a = _read_image(args.a, "--a")
    b = _read_image(args.b, "--b")
    if a.shape != b.shape:
        raise UsageError(f"image sizes differ: --a is {a.shape[2]}x{a.shape[1]}, --b is {b.shape[2]}x{b.shape[1]}")
    h, w = a.shape[1:]
    if h != w or h % 32:
        raise UsageError(f"images must be square with a side divisible by 32, got {w}x{h}")
    model, _, _ = load_checkpoint(args.ckpt)
    x = Tensor(a[None].astype(model.dtype))
    y = Tensor(b[None].astype(model.dtype))
    with no_grad():
        masks = model(x, y)
        prob = {name: ops.sigmoid(ops.upsample_bilinear(m, h, h)).data[0, 0] for name, m in masks.named()}
    change = (prob["M"] > 0.5).astype(np.uint8) * 255
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    Image.fromarray(change).save(args.out)
    print(f"wrote {args.out} ({int((change > 0).sum())} changed pixels of {h * h})")
    if args.dump_intermediate:
        os.makedirs(args.dump_intermediate, exist_ok=True)
        for name, p in prob.items():
            _save_map(os.path.join(args.dump_intermediate, f"{name}.png"), p)
        print(f"wrote {len(prob)} probability maps to {args.dump_intermediate}")
    return EXIT_OK


def cmd_gradcheck(args):
    from . import gradsuite

    modules = [args.module] if args.module else None
    if args.module and args.module not in gradsuite.SUITES:
        raise UsageError(f"--module: unknown module {args.module!r}; choose from {', '.join(gradsuite.SUITES)}")
    failed = 0
    for mod, rep in gradsuite.run_suite(modules, seeds=args.seeds, tol=args.tol):
        print(f"[{mod}] {rep}", flush=True)
        failed += not rep.passed
    print(f"{failed} failure(s)" if failed else "all gradchecks passed")
    return EXIT_CONTRACT if failed else EXIT_OK


def cmd_selftest(args):
    from . import selftest

    failed = 0
    for name, ok, detail in selftest.run():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", flush=True)
        failed += not ok
    print(f"{failed} failure(s)" if failed else "all invariants hold")
    return EXIT_CONTRACT if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        kernels.set_threads()
        return COMMANDS[args.command](args)
    except CheckpointError as exc:
        # a corrupt or truncated checkpoint is an unreadable input
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except ValueError as exc:
        # malformed CEBSNET_THREADS and similar value problems
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
