"""Run configuration: one JSON document, schema-checked before any work.

Defaults follow the reference operating point: 64 views, temperature 20,
retained fraction 0.3, top-10 candidates, 400 masks on grids {7,9,11,13},
a 4-token context initialized from "a photo of a", and 2 AdamW steps at
learning rate 0.002 with both loss coefficients at 1. Unknown keys are
rejected with the offending path in the message.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .augment import AugmentConfig
from .calibrate import CalibConfig
from .dataset import DatasetManifest
from .encoders import EncoderConfig, MODE_CL, MODE_CL_HP
from .evidence import EvidenceConfig
from .explore import ExploreConfig
from .pipeline import EpisodeConfig


class ConfigError(ValueError):
    """Schema violation, carrying the path to the offending field."""


@dataclass
class ToyBackendConfig:
    d: int = 64
    d_token: int = 16
    n_ctx: int = 4
    context_init: str = "a photo of a"
    ctx_gain: float = 8.0
    encoder_seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    backend: str = "toy"
    beta: float = 20.0
    prompt_mode: str = MODE_CL
    ecec_epsilon: float = 1e-6
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    explore: ExploreConfig = field(default_factory=ExploreConfig)
    evidence: EvidenceConfig = field(default_factory=EvidenceConfig)
    calibrate: CalibConfig = field(default_factory=CalibConfig)
    toy: ToyBackendConfig = field(default_factory=ToyBackendConfig)
    graph_manifest: str | None = None
    dataset: DatasetManifest | None = None
    ensemble_templates: list[str] | None = None
    output_dir: str = "fcl-out"
    parallel: int = 1
    figures: bool = True

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(
            augment=self.augment, explore=self.explore, evidence=self.evidence,
            calibrate=self.calibrate,
            encoder=EncoderConfig(beta=self.beta, d=self.toy.d,
                                  backend=self.backend),
            ecec_epsilon=self.ecec_epsilon, prompt_mode=self.prompt_mode,
            ensemble_templates=self.ensemble_templates)

    def to_json_dict(self) -> dict:
        """Config echo embedded in every report; feeding it back reproduces
        the run. The parallelism degree is an execution detail that cannot
        change results, so it stays out of the echo and reports compare
        byte-identical across any degree."""
        return {
            "seed": self.seed,
            "backend": self.backend,
            "beta": self.beta,
            "prompt_mode": self.prompt_mode,
            "ecec_epsilon": self.ecec_epsilon,
            "augment": {
                "n_views": self.augment.n_views,
                "crop_scale": list(self.augment.crop_scale),
                "flip_prob": self.augment.flip_prob,
                "output_size": self.augment.output_size,
            },
            "explore": {
                "rho": self.explore.rho,
                "top_k": self.explore.top_k,
                "aggregation": self.explore.aggregation,
            },
            "evidence": {
                "n_masks": self.evidence.n_masks,
                "grid_sizes": list(self.evidence.grid_sizes),
                "gamma": self.evidence.gamma,
            },
            "calibrate": {
                "lambda_cal": self.calibrate.lambda_cal,
                "lambda_align": self.calibrate.lambda_align,
                "steps": self.calibrate.steps,
                "learning_rate": self.calibrate.learning_rate,
                "recompute_weights": self.calibrate.recompute_weights,
            },
            "toy": {
                "d": self.toy.d,
                "d_token": self.toy.d_token,
                "n_ctx": self.toy.n_ctx,
                "context_init": self.toy.context_init,
                "ctx_gain": self.toy.ctx_gain,
                "encoder_seed": self.toy.encoder_seed,
            },
            "graph_manifest": self.graph_manifest,
            "dataset": None if self.dataset is None else {
                "root": self.dataset.root,
                "layout": self.dataset.layout,
                "list_file": self.dataset.list_file,
                "classes_file": self.dataset.classes_file,
            },
            "ensemble_templates": self.ensemble_templates,
            "output_dir": self.output_dir,
            "figures": self.figures,
        }


def _expect(value, kinds, path: str):
    if not isinstance(value, kinds) or isinstance(value, bool) and bool not in (
            kinds if isinstance(kinds, tuple) else (kinds,)):
        names = kinds.__name__ if not isinstance(kinds, tuple) else \
            "/".join(k.__name__ for k in kinds)
        raise ConfigError(f"{path}: expected {names}, got {type(value).__name__}")
    return value


def _check_keys(doc: dict, allowed: set, path: str):
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{path}{key}: unknown key")


def _number(doc, key, default, path, low=None, high=None,
            low_open=False, high_open=False):
    value = doc.get(key, default)
    value = _expect(value, (int, float), f"{path}{key}")
    value = float(value)
    if low is not None and (value <= low if low_open else value < low):
        bound = f"> {low}" if low_open else f">= {low}"
        raise ConfigError(f"{path}{key}: must be {bound}, got {value}")
    if high is not None and (value >= high if high_open else value > high):
        bound = f"< {high}" if high_open else f"<= {high}"
        raise ConfigError(f"{path}{key}: must be {bound}, got {value}")
    return value


def _integer(doc, key, default, path, low=None):
    value = doc.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}{key}: expected int, got {type(value).__name__}")
    if low is not None and value < low:
        raise ConfigError(f"{path}{key}: must be >= {low}, got {value}")
    return value


def _string(doc, key, default, path, choices=None):
    value = doc.get(key, default)
    value = _expect(value, str, f"{path}{key}")
    if choices and value not in choices:
        raise ConfigError(
            f"{path}{key}: must be one of {sorted(choices)}, got {value!r}")
    return value


def config_from_dict(doc: dict, path: str = "") -> RunConfig:
    _expect(doc, dict, path or "config")
    _check_keys(doc, {
        "seed", "backend", "beta", "prompt_mode", "ecec_epsilon", "augment",
        "explore", "evidence", "calibrate", "toy", "graph_manifest", "dataset",
        "ensemble_templates", "output_dir", "parallel", "figures"}, path)

    aug_doc = _expect(doc.get("augment", {}), dict, f"{path}augment")
    _check_keys(aug_doc, {"n_views", "crop_scale", "flip_prob", "output_size"},
                f"{path}augment.")
    crop = aug_doc.get("crop_scale", [0.5, 1.0])
    if (not isinstance(crop, (list, tuple)) or len(crop) != 2
            or not all(isinstance(v, (int, float)) for v in crop)):
        raise ConfigError(f"{path}augment.crop_scale: expected [lo, hi]")
    lo, hi = float(crop[0]), float(crop[1])
    if not (0.0 < lo <= hi <= 1.0):
        raise ConfigError(
            f"{path}augment.crop_scale: need 0 < lo <= hi <= 1, got {crop}")
    augment = AugmentConfig(
        n_views=_integer(aug_doc, "n_views", 64, f"{path}augment.", low=1),
        crop_scale=(lo, hi),
        flip_prob=_number(aug_doc, "flip_prob", 0.5, f"{path}augment.",
                          low=0.0, high=1.0),
        output_size=_integer(aug_doc, "output_size", 224, f"{path}augment.",
                             low=1))

    exp_doc = _expect(doc.get("explore", {}), dict, f"{path}explore")
    _check_keys(exp_doc, {"rho", "top_k", "aggregation"}, f"{path}explore.")
    explore = ExploreConfig(
        rho=_number(exp_doc, "rho", 0.3, f"{path}explore.", low=0.0,
                    low_open=True, high=1.0),
        top_k=_integer(exp_doc, "top_k", 10, f"{path}explore.", low=1),
        aggregation=_string(exp_doc, "aggregation", "voting",
                            f"{path}explore.", choices={"voting", "mean"}))

    ev_doc = _expect(doc.get("evidence", {}), dict, f"{path}evidence")
    _check_keys(ev_doc, {"n_masks", "grid_sizes", "gamma"}, f"{path}evidence.")
    grids = ev_doc.get("grid_sizes", [7, 9, 11, 13])
    if (not isinstance(grids, (list, tuple)) or not grids
            or not all(isinstance(g, int) and g >= 2 for g in grids)):
        raise ConfigError(
            f"{path}evidence.grid_sizes: expected a list of ints >= 2")
    evidence = EvidenceConfig(
        n_masks=_integer(ev_doc, "n_masks", 400, f"{path}evidence.", low=1),
        grid_sizes=tuple(grids),
        gamma=_number(ev_doc, "gamma", 0.5, f"{path}evidence.", low=0.0,
                      low_open=True, high=1.0, high_open=True))

    cal_doc = _expect(doc.get("calibrate", {}), dict, f"{path}calibrate")
    _check_keys(cal_doc, {"lambda_cal", "lambda_align", "steps",
                          "learning_rate", "recompute_weights"},
                f"{path}calibrate.")
    recompute = cal_doc.get("recompute_weights", False)
    if not isinstance(recompute, bool):
        raise ConfigError(f"{path}calibrate.recompute_weights: expected bool")
    calibrate = CalibConfig(
        lambda_cal=_number(cal_doc, "lambda_cal", 1.0, f"{path}calibrate.",
                           low=0.0),
        lambda_align=_number(cal_doc, "lambda_align", 1.0, f"{path}calibrate.",
                             low=0.0),
        steps=_integer(cal_doc, "steps", 2, f"{path}calibrate.", low=0),
        learning_rate=_number(cal_doc, "learning_rate", 0.002,
                              f"{path}calibrate.", low=0.0, low_open=True),
        recompute_weights=recompute)

    toy_doc = _expect(doc.get("toy", {}), dict, f"{path}toy")
    _check_keys(toy_doc, {"d", "d_token", "n_ctx", "context_init", "ctx_gain",
                          "encoder_seed"}, f"{path}toy.")
    toy = ToyBackendConfig(
        d=_integer(toy_doc, "d", 64, f"{path}toy.", low=2),
        d_token=_integer(toy_doc, "d_token", 16, f"{path}toy.", low=1),
        n_ctx=_integer(toy_doc, "n_ctx", 4, f"{path}toy.", low=0),
        context_init=_string(toy_doc, "context_init", "a photo of a",
                             f"{path}toy."),
        ctx_gain=_number(toy_doc, "ctx_gain", 8.0, f"{path}toy.", low=0.0,
                         low_open=True),
        encoder_seed=_integer(toy_doc, "encoder_seed", 0, f"{path}toy."))

    dataset = None
    ds_doc = doc.get("dataset")
    if ds_doc is not None:
        _expect(ds_doc, dict, f"{path}dataset")
        _check_keys(ds_doc, {"root", "layout", "list_file", "classes_file"},
                    f"{path}dataset.")
        if "root" not in ds_doc:
            raise ConfigError(f"{path}dataset.root: required")
        layout = _string(ds_doc, "layout", "directory", f"{path}dataset.",
                         choices={"directory", "list"})
        dataset = DatasetManifest(
            root=_expect(ds_doc["root"], str, f"{path}dataset.root"),
            layout=layout,
            list_file=ds_doc.get("list_file"),
            classes_file=ds_doc.get("classes_file"))

    templates = doc.get("ensemble_templates")
    if templates is not None:
        if (not isinstance(templates, list) or not templates
                or not all(isinstance(t, str) for t in templates)):
            raise ConfigError(
                f"{path}ensemble_templates: expected a non-empty string list")

    graph_manifest = doc.get("graph_manifest")
    if graph_manifest is not None:
        _expect(graph_manifest, str, f"{path}graph_manifest")

    figures = doc.get("figures", True)
    if not isinstance(figures, bool):
        raise ConfigError(f"{path}figures: expected bool")

    return RunConfig(
        seed=_integer(doc, "seed", 0, path),
        backend=_string(doc, "backend", "toy", path, choices={"toy", "graph"}),
        beta=_number(doc, "beta", 20.0, path, low=0.0, low_open=True),
        prompt_mode=_string(doc, "prompt_mode", MODE_CL, path,
                            choices={MODE_CL, MODE_CL_HP}),
        ecec_epsilon=_number(doc, "ecec_epsilon", 1e-6, path, low=0.0,
                             low_open=True),
        augment=augment, explore=explore, evidence=evidence,
        calibrate=calibrate, toy=toy, graph_manifest=graph_manifest,
        dataset=dataset, ensemble_templates=templates,
        output_dir=_string(doc, "output_dir", "fcl-out", path),
        parallel=_integer(doc, "parallel", 1, path, low=1),
        figures=figures)


def parse_config(path: str) -> RunConfig:
    """Load, validate, and fully default a JSON run configuration."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(doc)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """CLI flags override the config file; applied last."""
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "backend", None) is not None:
        cfg.backend = args.backend
    if getattr(args, "views", None) is not None:
        cfg.augment = AugmentConfig(
            n_views=args.views, crop_scale=cfg.augment.crop_scale,
            flip_prob=cfg.augment.flip_prob,
            output_size=cfg.augment.output_size)
    if getattr(args, "rho", None) is not None:
        cfg.explore = ExploreConfig(rho=args.rho, top_k=cfg.explore.top_k,
                                    aggregation=cfg.explore.aggregation)
    if getattr(args, "topk", None) is not None:
        cfg.explore = ExploreConfig(rho=cfg.explore.rho, top_k=args.topk,
                                    aggregation=cfg.explore.aggregation)
    if getattr(args, "masks", None) is not None:
        cfg.evidence = EvidenceConfig(n_masks=args.masks,
                                      grid_sizes=cfg.evidence.grid_sizes,
                                      gamma=cfg.evidence.gamma)
    if getattr(args, "steps", None) is not None:
        cfg.calibrate = CalibConfig(
            lambda_cal=cfg.calibrate.lambda_cal,
            lambda_align=cfg.calibrate.lambda_align, steps=args.steps,
            learning_rate=cfg.calibrate.learning_rate,
            recompute_weights=cfg.calibrate.recompute_weights)
    if getattr(args, "out", None) is not None:
        cfg.output_dir = args.out
    if getattr(args, "parallel", None) is not None:
        cfg.parallel = args.parallel
    if getattr(args, "prompt_mode", None) is not None:
        cfg.prompt_mode = args.prompt_mode
    if getattr(args, "templates", None) is not None:
        with open(args.templates) as f:
            cfg.ensemble_templates = [line.strip() for line in f
                                      if line.strip()]
    if getattr(args, "no_figures", False):
        cfg.figures = False
    return cfg
