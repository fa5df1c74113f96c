"""Command-line orchestration.

Subcommands: prepare, train, eval, sr, params, gradcheck. Batch operation
only; every output-producing run writes a manifest.json sufficient to
reproduce it. Exit codes are a stable scripting contract:

    0  success
    2  usage or input error
    3  numerical divergence during training
    4  gradient audit failure

For ``train``, flag values may come from a line-based ``key=value`` config
file (--config); explicit command-line flags override file keys, which
override built-in defaults. OPSR_THREADS caps the worker threads used for
per-tile degradation in ``prepare`` (0 or unset = auto).
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from . import data as D
from . import metrics as M
from . import models as Mo
from . import training as Tr
from .tensor_ops import Rng, bilinear_resize


class UsageError(ValueError):
    pass


def _write_manifest(out_dir, command, args_dict):
    args_dict = {k: v for k, v in args_dict.items() if k != "func"}
    doc = {"command": command, "version": __version__, "args": args_dict}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _n_threads():
    env = os.environ.get("OPSR_THREADS", "0")
    try:
        n = int(env)
    except ValueError:
        n = 0
    return n if n > 0 else min(8, os.cpu_count() or 1)


# ---------------------------------------------------------------- prepare

def cmd_prepare(args):
    if not os.path.exists(args.cube):
        raise UsageError(f"cube not found: {args.cube}")
    cube = D.load_cube(args.cube)
    cube = D.normalize_cube(cube)
    tileset = D.tile_cube(cube, tile_size=args.tile)
    tileset = D.split_tiles(tileset, args.seed)

    os.makedirs(args.out, exist_ok=True)
    D.save_cube(cube, os.path.join(args.out, "normalized.hsi"))

    def one(i):
        return D.degrade(tileset.tiles[i], sigma=args.sigma, s=args.scale)

    with ThreadPoolExecutor(max_workers=_n_threads()) as ex:
        pairs = list(ex.map(one, range(len(tileset.tiles))))

    pairs_dir = os.path.join(args.out, "pairs")
    os.makedirs(pairs_dir, exist_ok=True)
    for i, pair in enumerate(pairs):
        for tag, arr in (("lr", pair.lr_upsampled), ("hr", pair.hr)):
            path = os.path.join(pairs_dir, f"tile_{i:03d}_{tag}.hsi")
            D.save_cube(D.HsiCube(data=arr), path, sidecar=False)

    index = {
        "seed": args.seed,
        "tile_size": args.tile,
        "sigma": args.sigma,
        "scale": args.scale,
        "bands": cube.bands,
        "origins": [list(o) for o in tileset.origins],
        "splits": tileset.splits,
    }
    with open(os.path.join(args.out, "tiles.json"), "w") as f:
        json.dump(index, f, indent=1, sort_keys=True)
        f.write("\n")
    _write_manifest(args.out, "prepare", vars(args))

    counts = {s: len(tileset.indices(s)) for s in D.SPLITS}
    print(f"{len(tileset.tiles)} tiles, split "
          f"{counts['train']}/{counts['val']}/{counts['test']}")
    return 0


def load_prepared(data_dir, split):
    index_path = os.path.join(data_dir, "tiles.json")
    if not os.path.exists(index_path):
        raise UsageError(f"not a prepared data directory (missing {index_path})")
    with open(index_path) as f:
        index = json.load(f)
    pairs = []
    for i, s in enumerate(index["splits"]):
        if s != split:
            continue
        lr = D.load_cube(os.path.join(data_dir, "pairs", f"tile_{i:03d}_lr.hsi"))
        hr = D.load_cube(os.path.join(data_dir, "pairs", f"tile_{i:03d}_hr.hsi"))
        pairs.append(D.LrHrPair(lr_upsampled=lr.data, hr=hr.data))
    return index, pairs


# ------------------------------------------------------------------ train

def _apply_config_file(parser, argv):
    """Pre-scan argv for --config and fold the file's key=value pairs into
    the parser defaults (flags still win)."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    if not os.path.exists(known.config):
        raise UsageError(f"config file not found: {known.config}")
    overrides = {}
    with open(known.config) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"malformed config line: {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            overrides[k.replace("-", "_")] = v
    for action in parser._actions:
        if action.dest in overrides:
            raw = overrides.pop(action.dest)
            if action.type is not None:
                raw = action.type(raw)
            elif isinstance(action.const, bool) or isinstance(action.default, bool):
                raw = raw.lower() in ("1", "true", "yes")
            parser.set_defaults(**{action.dest: raw})
    if overrides:
        raise UsageError(f"unknown config keys: {sorted(overrides)}")


def _parse_milestones(text):
    text = text.strip()
    if not text:
        return ()
    return tuple(int(t) for t in text.replace(",", " ").split())


def cmd_train(args):
    index, train_pairs = load_prepared(args.data, "train")
    _, val_pairs = load_prepared(args.data, "val")
    if not train_pairs or not val_pairs:
        raise UsageError("prepared data has an empty train or val split")

    spec = Mo.ModelSpec(arch=args.arch, channels=index["bands"], q=args.q,
                        residual=args.residual, norm_kind=args.norm)
    config = Tr.TrainConfig(epochs=args.epochs, lr=args.lr,
                            milestones=_parse_milestones(args.milestones),
                            gamma=args.gamma, seed=args.seed,
                            eval_every=args.eval_every)
    model = Mo.build_model(spec, rng=Rng(config.seed))
    print(f"{spec.arch} q={spec.q} residual={int(spec.residual)} "
          f"norm={spec.norm_kind}: {Mo.count_params(spec)} parameters")

    os.makedirs(args.out, exist_ok=True)
    try:
        best_state, log = Tr.train(model, train_pairs, val_pairs, config)
    except Tr.DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3

    tensors, best_epoch, best_ssim = best_state
    model.load_state_tensors(tensors)
    Mo.save_checkpoint(model, os.path.join(args.out, "checkpoint.opsr"),
                       epoch=best_epoch, val_ssim=best_ssim)
    log.to_csv(os.path.join(args.out, "log.csv"))
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(log.summary(), f, indent=1, sort_keys=True)
        f.write("\n")
    _write_manifest(args.out, "train", vars(args))
    print(f"best epoch {best_epoch}: validation SSIM {best_ssim:.6f}")
    return 0


# ------------------------------------------------------------------- eval

def cmd_eval(args):
    model, _, _ = Mo.load_checkpoint(args.checkpoint)
    index, pairs = load_prepared(args.data, args.split)
    if not pairs:
        raise UsageError(f"split {args.split!r} is empty")
    if index["bands"] != model.spec.channels:
        raise UsageError(
            f"checkpoint expects {model.spec.channels} bands, data has {index['bands']}"
        )
    report = M.evaluate(model, pairs)
    print(f"PSNR: {report.psnr_db:.4f} dB")
    print(f"SSIM: {report.ssim:.6f}")
    print(f"SAM:  {report.sam_deg:.4f} deg")
    out = args.out or f"metrics_{args.split}.json"
    report.to_json(out)
    return 0


# --------------------------------------------------------------------- sr

def _feather_window(size):
    w = np.minimum(np.arange(1, size + 1), np.arange(size, 0, -1)).astype(np.float64)
    return np.outer(w, w)


def tiled_forward(model, data, tile=64, overlap=8):
    """Run the model over a full [C,H,W] array in overlapping tiles blended
    by linear feathering. Falls back to a single pass for small inputs."""
    c, h, w = data.shape
    if h <= tile and w <= tile:
        return model.forward(data[None].astype(np.float32))[0]
    step = tile - overlap
    rows = sorted({*range(0, max(h - tile, 0) + 1, step), max(h - tile, 0)})
    cols = sorted({*range(0, max(w - tile, 0) + 1, step), max(w - tile, 0)})
    acc = np.zeros((c, h, w), dtype=np.float64)
    wsum = np.zeros((h, w), dtype=np.float64)
    for r in rows:
        for cc in cols:
            th, tw = min(tile, h - r), min(tile, w - cc)
            patch = data[:, r:r + th, cc:cc + tw].astype(np.float32)
            pred = model.forward(patch[None])[0]
            fw = _feather_window(tile)[:th, :tw]
            acc[:, r:r + th, cc:cc + tw] += pred.astype(np.float64) * fw
            wsum[r:r + th, cc:cc + tw] += fw
    return (acc / wsum).astype(np.float32)


def _write_pgm(path, band):
    img = np.clip(band, 0.0, 1.0)
    img8 = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(img8.tobytes())


def cmd_sr(args):
    if not os.path.exists(args.cube):
        raise UsageError(f"cube not found: {args.cube}")
    model, _, _ = Mo.load_checkpoint(args.checkpoint)
    cube = D.normalize_cube(D.load_cube(args.cube))
    if cube.bands != model.spec.channels:
        raise UsageError(
            f"checkpoint expects {model.spec.channels} bands, cube has {cube.bands}"
        )
    if args.band is not None and not 0 <= args.band < cube.bands:
        raise UsageError(f"band {args.band} out of range [0, {cube.bands})")
    up = bilinear_resize(cube.data, 2 * cube.height, 2 * cube.width)
    sr = tiled_forward(model, up)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    D.save_cube(D.HsiCube(data=sr, name=cube.name + "_sr",
                          value_range=cube.value_range), args.out)
    if args.band is not None:
        _write_pgm(args.out + f".band{args.band}.pgm", sr[args.band])
    _write_manifest(out_dir, "sr", vars(args))
    print(f"wrote {sr.shape[1]}x{sr.shape[2]}x{sr.shape[0]} SR cube to {args.out}")
    return 0


# ----------------------------------------------------------------- params

def cmd_params(args):
    spec = Mo.ModelSpec(arch=args.arch, channels=args.channels, q=args.q,
                        norm_kind=args.norm)
    print(Mo.count_params(spec))
    return 0


# -------------------------------------------------------------- gradcheck

def cmd_gradcheck(args):
    if args.coords < 1:
        raise UsageError(f"--coords must be >= 1, got {args.coords}")
    spec = Mo.ModelSpec(arch=args.arch, channels=args.channels, q=args.q,
                        residual=args.residual, norm_kind=args.norm)
    rng = Rng(args.seed)
    model = Mo.build_model(spec, rng=rng)
    hr = rng.uniform((spec.channels, args.size, args.size)).astype(np.float32)
    pair = D.degrade(hr)
    err = Tr.grad_audit(model, pair, n_coords=args.coords, seed=args.seed)
    print(f"max relative gradient error: {err:.3e}")
    if err > 1e-3:
        print("gradient audit FAILED (tolerance 1e-3)", file=sys.stderr)
        return 4
    return 0


# ------------------------------------------------------------------- main

def build_parser():
    p = argparse.ArgumentParser(prog="opsr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="normalize, tile, split, and degrade a cube")
    sp.add_argument("--cube", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--tile", type=int, default=D.DEFAULT_TILE)
    sp.add_argument("--sigma", type=float, default=D.DEFAULT_SIGMA)
    sp.add_argument("--scale", type=int, default=D.DEFAULT_SCALE)
    sp.set_defaults(func=cmd_prepare)

    st = sub.add_parser("train", help="train a model on a prepared directory")
    st.add_argument("--config", help="key=value config file (flags override)")
    st.add_argument("--data", required=True)
    st.add_argument("--arch", choices=Mo.ARCHS, required=True)
    st.add_argument("--q", type=int, default=None)
    st.add_argument("--residual", action="store_true")
    st.add_argument("--norm", choices=("none", "batch", "instance", "l1", "l2"),
                    default="none")
    st.add_argument("--epochs", type=int, default=50000)
    st.add_argument("--lr", type=float, default=1e-4)
    st.add_argument("--milestones", default="5000,40000",
                    help="comma-separated epoch indices")
    st.add_argument("--gamma", type=float, default=0.1)
    st.add_argument("--eval-every", type=int, default=50)
    st.add_argument("--seed", type=int, required=True)
    st.add_argument("--out", required=True)
    st.set_defaults(func=cmd_train)

    se = sub.add_parser("eval", help="evaluate a checkpoint on a prepared split")
    se.add_argument("--checkpoint", required=True)
    se.add_argument("--data", required=True)
    se.add_argument("--split", choices=("val", "test"), required=True)
    se.add_argument("--out", help="metrics JSON path (default metrics_<split>.json)")
    se.set_defaults(func=cmd_eval)

    ss = sub.add_parser("sr", help="true 2x super-resolution of an original cube")
    ss.add_argument("--checkpoint", required=True)
    ss.add_argument("--cube", required=True)
    ss.add_argument("--out", required=True)
    ss.add_argument("--band", type=int, default=None,
                    help="band index for an 8-bit PGM preview")
    ss.set_defaults(func=cmd_sr)

    sc = sub.add_parser("params", help="print the exact parameter count")
    sc.add_argument("--arch", choices=Mo.ARCHS, required=True)
    sc.add_argument("--channels", type=int, required=True)
    sc.add_argument("--q", type=int, default=None)
    sc.add_argument("--norm", choices=("none", "batch", "instance", "l1", "l2"),
                    default="none")
    sc.set_defaults(func=cmd_params)

    sg = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    sg.add_argument("--arch", choices=Mo.ARCHS, default="sronn")
    sg.add_argument("--channels", type=int, default=4)
    sg.add_argument("--q", type=int, default=None)
    sg.add_argument("--residual", action="store_true")
    sg.add_argument("--norm", choices=("none", "batch", "instance", "l1", "l2"),
                    default="none")
    sg.add_argument("--size", type=int, default=16)
    sg.add_argument("--coords", type=int, default=100)
    sg.add_argument("--seed", type=int, default=0)
    sg.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and argv[0] == "train":
            _apply_config_file(parser._subparsers._group_actions[0].choices["train"], argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (D.CubeFormatError, Mo.CheckpointFormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
