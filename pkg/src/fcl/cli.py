"""Command-line surface: predict, evaluate, evidence, theory-lab, selftest.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from .augment import resize_bilinear
from .config import ConfigError, RunConfig, apply_overrides, parse_config
from .dataset import load_dataset, load_image
from .encoders import (init_context, make_toy_text_encoder,
                       make_toy_visual_encoder, make_toy_vocabulary, MODE_CL_HP)
from .evidence import estimate_evidence
from .explore import explore_topk
from .numerics import RngStream
from .pipeline import (encode_classes, evaluate_dataset, prompt_ensemble_predict,
                       run_episode)
from .report import (canonical_json, write_bound_outputs,
                     write_correlation_outputs, write_evaluation_outputs,
                     write_evidence_outputs, write_failure_mode_outputs)


def _add_common_flags(p: argparse.ArgumentParser, config_required: bool = True):
    p.add_argument("--config", required=config_required,
                   help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--backend", choices=["toy", "graph"], default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--masks", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--parallel", type=int, default=None)
    p.add_argument("--prompt-mode", choices=["cl", "cl-hp"], default=None,
                   dest="prompt_mode")
    p.add_argument("--templates", default=None,
                   help="file with one prompt template per line")
    p.add_argument("--no-figures", action="store_true", dest="no_figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fcl",
        description="Episodic test-time adaptation with fair context "
                    "calibration over shared-evidence maps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_predict = sub.add_parser("predict", help="run one episode on an image")
    p_predict.add_argument("--image", required=True)
    _add_common_flags(p_predict)

    p_eval = sub.add_parser("evaluate", help="run a dataset and write reports")
    _add_common_flags(p_eval)

    p_evid = sub.add_parser("evidence",
                            help="dump per-candidate evidence maps")
    p_evid.add_argument("--image", required=True)
    _add_common_flags(p_evid)

    p_lab = sub.add_parser("theory-lab",
                           help="synthetic validation experiments")
    p_lab.add_argument("experiment",
                       choices=["bound", "margin", "failure-modes",
                                "euec-corr"])
    p_lab.add_argument("--out", default="fcl-lab")
    p_lab.add_argument("--seed", type=int, default=7)
    p_lab.add_argument("--trials", type=int, default=100)
    p_lab.add_argument("--views", type=int, default=200)
    p_lab.add_argument("--no-figures", action="store_true", dest="no_figures")

    sub.add_parser("selftest", help="run the embedded property suites")
    return parser


def _build_backend(cfg: RunConfig, class_names: list[str]):
    """(visual_encoder, text_encoder, base_ctx) for the configured backend."""
    if cfg.backend == "graph":
        if not cfg.graph_manifest:
            raise ConfigError("graph backend requires graph_manifest")
        from .graphio import load_graph_backend

        visual, text, names, base_ctx, _ = load_graph_backend(cfg.graph_manifest)
        if class_names and list(class_names) != list(names):
            raise ConfigError(
                "dataset class names do not match the exported vocabulary")
        if cfg.prompt_mode == MODE_CL_HP:
            base_ctx = init_context("", cfg.toy.n_ctx,
                                    base_ctx.tokens.shape[1], mode=MODE_CL_HP)
        return visual, text, base_ctx

    if not class_names:
        raise ConfigError("toy backend requires dataset class names")
    toy = cfg.toy
    size = cfg.augment.output_size
    enc_rng = RngStream(seed=toy.encoder_seed, stream_id=0)
    visual = make_toy_visual_encoder((size, size, 3), toy.d,
                                     enc_rng.child("visual"))
    vocab = make_toy_vocabulary(class_names, d_cls=toy.d_token,
                                vocab_seed=toy.encoder_seed)
    text = make_toy_text_encoder(vocab, toy.d, toy.d_token,
                                 enc_rng.child("text"), ctx_gain=toy.ctx_gain,
                                 template=toy.context_init)
    base_ctx = init_context(toy.context_init, toy.n_ctx, toy.d_token,
                            mode=cfg.prompt_mode)
    return visual, text, base_ctx


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, args)


def _template_setup(cfg: RunConfig, class_names: list[str], default_text):
    """Per-template class prompts for the ensemble: in cl mode the template
    seeds the soft context; in cl-hp mode it becomes the hard prompt, so the
    toy text encoder is rebuilt around it (graph backends carry fixed
    exported hard tokens and only re-seed the learnable prefix)."""
    toy = cfg.toy

    def setup(template):
        ctx = init_context(template, toy.n_ctx, toy.d_token,
                           mode=cfg.prompt_mode)
        if cfg.prompt_mode == MODE_CL_HP and cfg.backend == "toy":
            enc_rng = RngStream(seed=toy.encoder_seed, stream_id=0)
            vocab = make_toy_vocabulary(class_names, d_cls=toy.d_token,
                                        vocab_seed=toy.encoder_seed)
            encoder = make_toy_text_encoder(
                vocab, toy.d, toy.d_token, enc_rng.child("text"),
                ctx_gain=toy.ctx_gain, template=template)
            return encoder, ctx
        return default_text, ctx

    return setup


def _dataset_class_names(cfg: RunConfig) -> list[str]:
    if cfg.dataset is None:
        return []
    from .dataset import read_class_names

    return read_class_names(cfg.dataset)


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    class_names = _dataset_class_names(cfg)
    visual, text, base_ctx = _build_backend(cfg, class_names)
    image = load_image(args.image)
    episode_cfg = cfg.episode_config()
    rng = RngStream(seed=cfg.seed, stream_id=0)

    if cfg.ensemble_templates:
        setup = _template_setup(cfg, class_names, text)
        label, reports = prompt_ensemble_predict(
            args.image, image, None, episode_cfg, visual, setup, rng)
        doc = {"prediction": label,
               "class_name": class_names[label] if class_names else None,
               "per_template": [r.to_json_dict() for r in reports]}
    else:
        report = run_episode(args.image, image, None, episode_cfg, visual,
                             text, base_ctx, rng)
        doc = report.to_json_dict()
        if class_names:
            doc["class_name"] = class_names[report.prediction]
    sys.stdout.write(canonical_json(doc))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    if cfg.dataset is None:
        raise ConfigError("evaluate requires a dataset section in the config")
    items, class_names, n_skipped = load_dataset(cfg.dataset)
    visual, text, base_ctx = _build_backend(cfg, class_names)
    episode_cfg = cfg.episode_config()

    t0 = time.perf_counter()
    outcome, reports = evaluate_dataset(
        items, episode_cfg, visual, text, base_ctx, seed=cfg.seed,
        parallel=cfg.parallel, n_skipped=n_skipped)
    elapsed = time.perf_counter() - t0

    paths = write_evaluation_outputs(cfg.output_dir, cfg.to_json_dict(),
                                     outcome, reports, figures=cfg.figures)
    acc = "n/a" if outcome.accuracy is None else f"{outcome.accuracy:.4f}"
    print(f"episodes={outcome.n_episodes} skipped={outcome.n_skipped} "
          f"accuracy={acc} elapsed={elapsed:.1f}s", file=sys.stderr)
    print(paths["report"])
    return 0


def cmd_evidence(args) -> int:
    cfg = _load_config(args)
    class_names = _dataset_class_names(cfg)
    visual, text, base_ctx = _build_backend(cfg, class_names)
    episode_cfg = cfg.episode_config()
    image = load_image(args.image)
    size = cfg.augment.output_size
    x = resize_bilinear(image, size, size)

    rng = RngStream(seed=cfg.seed, stream_id=0).child(f"episode:{args.image}")
    taus = encode_classes(text, base_ctx)
    beta = cfg.beta
    scores = beta * (visual.encode(x)[None, :] @ taus.T)
    candidates = explore_topk(scores, list(range(taus.shape[0])),
                              episode_cfg.explore)
    bundle = estimate_evidence(x, visual, taus[candidates.class_ids], beta,
                               episode_cfg.evidence, rng.child("masks"))
    names = class_names or [f"class_{i}" for i in range(taus.shape[0])]
    paths = write_evidence_outputs(cfg.output_dir, names,
                                   candidates.class_ids, bundle,
                                   figures=cfg.figures)
    print(paths["stats"])
    return 0


def cmd_theory_lab(args) -> int:
    from . import theorylab

    figures = not args.no_figures
    if args.experiment == "bound":
        gen = RngStream(args.seed, 0).child("bound").generator()
        rows = []
        for _ in range(10_000):
            n = int(gen.integers(2, 101))
            scores = gen.normal(0, 4, size=n)
            c = int(gen.integers(0, n))
            m = theorylab.margin(scores, c)
            rows.append({
                "margin": m, "n_classes": n,
                "bound": theorylab.softmax_lower_bound(m, n),
                "actual": float(1.0 / np.exp(scores - scores[c]).sum())})
        paths = write_bound_outputs(args.out, rows, figures=figures)
    elif args.experiment == "margin":
        paths = _margin_experiment(args, figures)
    elif args.experiment == "failure-modes":
        cfg = theorylab.FailureWorldConfig(seed=args.seed)
        result = theorylab.run_failure_mode_experiments(cfg, args.trials)
        paths = write_failure_mode_outputs(args.out, result, figures=figures)
    else:
        result = theorylab.euec_entropy_correlation(args.views, seed=args.seed)
        paths = write_correlation_outputs(args.out, result, "euec_entropy",
                                          figures=figures)
    print(paths["summary"] if "summary" in paths else paths["points"])
    return 0


def _margin_experiment(args, figures: bool) -> dict:
    import csv
    import os

    from . import theorylab
    from .report import write_json

    world = theorylab.make_world(np.array([0.2, 0.35, 0.1]),
                                 np.array([0.3, 0.3, 0.3]), seed=args.seed)
    gen = RngStream(args.seed, 0).child("margin").generator()
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "margin_breakdown.csv")
    errors = []
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trial", "unique_term", "max_common_bias",
                         "max_competitor_unique", "max_residual",
                         "margin_direct", "margin_recombined", "abs_error"])
        for t in range(args.trials):
            a_uniq = gen.uniform(0, 1, size=world.n_classes)
            view = world.realize_view(float(gen.uniform(0, 1)), a_uniq,
                                      0.0, gen)
            bd = theorylab.margin_breakdown(view, world, world.taus0, 0, 20.0)
            err = abs(bd.margin_direct - bd.margin_recombined)
            errors.append(err)
            writer.writerow([t, f"{bd.unique_term:.10g}",
                             f"{bd.common_bias.max():.10g}",
                             f"{bd.competitor_unique.max():.10g}",
                             f"{bd.residual.max():.10g}",
                             f"{bd.margin_direct:.10g}",
                             f"{bd.margin_recombined:.10g}", f"{err:.3e}"])
    summary_path = os.path.join(args.out, "margin_breakdown.json")
    write_json(summary_path, {"trials": args.trials,
                              "max_reconstruction_error": max(errors)})
    return {"summary": summary_path, "points": csv_path}


def cmd_selftest(_args) -> int:
    from .selftest import run_selftest

    return run_selftest()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "predict": cmd_predict,
        "evaluate": cmd_evaluate,
        "evidence": cmd_evidence,
        "theory-lab": cmd_theory_lab,
        "selftest": cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:    # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
