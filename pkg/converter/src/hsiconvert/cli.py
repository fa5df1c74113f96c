"""Command line for the archive-to-cube converter.

    hsi-convert convert --in cube.mat --var paviaU --order HWC \
        --label pavia_university --out pavia.hsi
    hsi-convert verify --in cube.mat --var paviaU --order HWC --cube pavia.hsi

Exit codes mirror the training pipeline's CLI: 0 success, 2 usage or input
error, 1 verification failure.
"""

import argparse
import sys

from . import __version__
from .convert import AXIS_ORDERS, ConvertError, SourceDescriptor, convert, verify


def cmd_convert(args):
    desc = SourceDescriptor(path=args.input, var=args.var,
                            order=args.order, label=args.label)
    meta = convert(desc, args.out)
    print(f"wrote {meta['height']}x{meta['width']}x{meta['bands']} cube "
          f"to {args.out}")
    if args.verify:
        report, err = verify(args.out, desc)
        if err or not report.ok:
            print(f"verification failed: {err or report}", file=sys.stderr)
            return 1
        print(f"verified: {report}")
    return 0


def cmd_verify(args):
    desc = SourceDescriptor(path=args.input, var=args.var,
                            order=args.order, label=args.label)
    report, err = verify(args.cube, desc)
    if err:
        print(f"FAIL: {err}", file=sys.stderr)
        return 1
    print(report)
    return 0 if report.ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="hsi-convert",
                                description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--in", dest="input", required=True,
                        help=".mat archive path")
        sp.add_argument("--var", required=True,
                        help="variable name holding the cube")
        sp.add_argument("--order", choices=AXIS_ORDERS, required=True,
                        help="axis order of the stored array")
        sp.add_argument("--label", default="",
                        help="dataset label (known labels enforce band counts)")

    sc = sub.add_parser("convert", help="archive -> cube file + sidecar")
    common(sc)
    sc.add_argument("--out", required=True, help="output cube path")
    sc.add_argument("--verify", action="store_true",
                    help="re-read and compare statistics after writing")
    sc.set_defaults(func=cmd_convert)

    sv = sub.add_parser("verify", help="compare a cube file against its source")
    common(sv)
    sv.add_argument("--cube", required=True, help="cube file to check")
    sv.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConvertError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
