"""Command-line surface of the exporter.

fcl-export export --model <id> --classes <file> --templates <file> --out <dir>
fcl-export make-checkpoint --out model.pt [--d 64 --d-token 16 --image-size 224]
"""

from __future__ import annotations

import argparse
import sys

from .exporter import ExportError, export
from .models import load_checkpoint, make_checkpoint


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcl-export")
    sub = parser.add_subparsers(dest="command", required=True)

    p_exp = sub.add_parser("export",
                           help="convert a checkpoint into engine artifacts")
    p_exp.add_argument("--model", required=True,
                       help="checkpoint path or toy:<seed>:<d>:<d_token>:<size>")
    p_exp.add_argument("--classes", required=True,
                       help="file with one class name per line")
    p_exp.add_argument("--templates", default=None,
                       help="file with one prompt template per line "
                            "(defaults to the seven generic templates)")
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--tokens-per-class", type=int, default=4)
    p_exp.add_argument("--context-template", default="a photo of a")
    p_exp.add_argument("--token-order",
                       choices=["context-first", "class-first"],
                       default="context-first")

    p_ckpt = sub.add_parser("make-checkpoint",
                            help="write a seeded random dual-encoder "
                                 "checkpoint (stand-in for a converted model)")
    p_ckpt.add_argument("--out", required=True)
    p_ckpt.add_argument("--d", type=int, default=64)
    p_ckpt.add_argument("--d-token", type=int, default=16)
    p_ckpt.add_argument("--image-size", type=int, default=224)
    p_ckpt.add_argument("--seed", type=int, default=0)
    return parser


def cmd_export(args) -> int:
    with open(args.classes) as f:
        class_names = [line.strip() for line in f if line.strip()]
    templates = None
    if args.templates:
        with open(args.templates) as f:
            templates = [line.strip() for line in f if line.strip()]
    model = load_checkpoint(args.model)
    manifest = export(model, args.model, class_names, templates, args.out,
                      tokens_per_class=args.tokens_per_class,
                      context_template=args.context_template,
                      token_order=args.token_order)
    print(f"{args.out}/manifest.json")
    print(f"classes={len(manifest['class_names'])} d={manifest['d']} "
          f"d_token={manifest['d_token']} image={manifest['image_size']}",
          file=sys.stderr)
    return 0


def cmd_make_checkpoint(args) -> int:
    make_checkpoint(args.out, d=args.d, d_token=args.d_token,
                    image_size=args.image_size, seed=args.seed)
    print(args.out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"export": cmd_export, "make-checkpoint": cmd_make_checkpoint}
    try:
        return handlers[args.command](args)
    except ExportError as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
