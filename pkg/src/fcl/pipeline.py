"""Episode orchestration: explore, localize evidence, calibrate, predict.

Each test image is an independent episode: nothing learned on one image
survives to the next, and every random draw inside an episode is keyed by
(global seed, image id, purpose), so episodes can run in any order or in
parallel and still produce byte-identical reports.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .augment import AugmentConfig, generate_views
from .calibrate import CalibConfig, build_pair_set, calibrate_context
from .encoders import ContextParams, EncoderConfig
from .evidence import (EvidenceConfig, common_evidence_embedding,
                       estimate_evidence, unique_evidence_embedding)
from .explore import ExploreConfig, explore_topk
from .numerics import RngStream, entropy_rows, softmax

NO_PARALLEL_ENV = "FCL_NO_PARALLEL"


@dataclass
class EpisodeConfig:
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    explore: ExploreConfig = field(default_factory=ExploreConfig)
    evidence: EvidenceConfig = field(default_factory=EvidenceConfig)
    calibrate: CalibConfig = field(default_factory=CalibConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ecec_epsilon: float = 1e-6
    prompt_mode: str = "cl"
    ensemble_templates: list[str] | None = None

    def __post_init__(self):
        if self.ecec_epsilon <= 0:
            raise ValueError("ecec denominator floor must be positive")


@dataclass
class EpisodeReport:
    image_id: str
    prediction: int
    zero_shot: int
    label: int | None
    candidate_ids: list[int]
    vote_fractions: list[float]
    view_entropies: list[float]
    calib_cal: list[float]
    calib_align: list[float]
    calib_total: list[float]
    calib_fallback: bool
    ecec: float | None
    euec: float | None
    metric_reference: int | None   # prediction the metrics were evaluated at
    retained_views: list[int] = field(default_factory=list)
    calib_initial_tokens: list | None = None
    calib_final_tokens: list | None = None
    calib_base_pairwise: dict = field(default_factory=dict)
    degraded: bool = False
    degraded_reason: str = ""
    wall_time: float = 0.0

    @property
    def correct(self) -> bool | None:
        return None if self.label is None else self.prediction == self.label

    @property
    def zero_shot_correct(self) -> bool | None:
        return None if self.label is None else self.zero_shot == self.label

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(self.view_entropies))

    def to_json_dict(self) -> dict:
        """Deterministic serialization; wall time stays out on purpose so
        repeated runs produce byte-identical reports."""
        return {
            "image_id": self.image_id,
            "prediction": self.prediction,
            "zero_shot": self.zero_shot,
            "label": self.label,
            "correct": self.correct,
            "zero_shot_correct": self.zero_shot_correct,
            "candidates": {
                "class_ids": self.candidate_ids,
                "vote_fractions": self.vote_fractions,
                "retained_views": self.retained_views,
            },
            "view_entropies": self.view_entropies,
            "calibration": {
                "cal": self.calib_cal,
                "align": self.calib_align,
                "total": self.calib_total,
                "fallback": self.calib_fallback,
                "initial_tokens": self.calib_initial_tokens,
                "final_tokens": self.calib_final_tokens,
                "base_pairwise": self.calib_base_pairwise,
            },
            "ecec": self.ecec,
            "euec": self.euec,
            "metric_reference": self.metric_reference,
            "degraded": self.degraded,
            "degraded_reason": self.degraded_reason,
        }


@dataclass
class PredictionOutcome:
    n_episodes: int
    n_correct: int
    n_skipped: int
    accuracy: float | None
    mean_ecec_correct: float | None
    mean_ecec_incorrect: float | None
    euec_entropy_pearson: float | None
    euec_entropy_spearman: float | None

    def to_json_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "n_correct": self.n_correct,
            "n_skipped": self.n_skipped,
            "accuracy": self.accuracy,
            "mean_ecec_correct": self.mean_ecec_correct,
            "mean_ecec_incorrect": self.mean_ecec_incorrect,
            "euec_entropy_pearson": self.euec_entropy_pearson,
            "euec_entropy_spearman": self.euec_entropy_spearman,
        }


def encode_classes(text_encoder, ctx: ContextParams,
                   class_ids: list[int] | None = None) -> np.ndarray:
    if class_ids is None and hasattr(text_encoder, "encode_all"):
        return text_encoder.encode_all(ctx)
    ids = class_ids if class_ids is not None else range(text_encoder.n_classes)
    return np.stack([text_encoder.encode(c, ctx) for c in ids])


def compute_ecec(z: np.ndarray, pred_id: int, candidate_ids: list[int],
                 common_embs: dict, taus0: dict, epsilon: float) -> float:
    """Shared-evidence bias of a prediction: how much of its score advantage
    over each rival is reproduced by the pairwise common-evidence embedding,
    relative to the full image. Denominator terms are floored at epsilon."""
    if len(candidate_ids) < 2:
        raise ValueError("ecec needs at least two candidates")
    if pred_id not in candidate_ids:
        raise ValueError("prediction must be one of the candidates")
    num = 0.0
    den = 0.0
    for y in candidate_ids:
        if y == pred_id:
            continue
        gap = taus0[pred_id] - taus0[y]
        key = (pred_id, y) if (pred_id, y) in common_embs else (y, pred_id)
        num += max(0.0, float(common_embs[key] @ gap))
        den += max(epsilon, float(np.asarray(z) @ gap))
    return num / den


def compute_euec(x: np.ndarray, pred_col: int, candidate_ids: list[int],
                 spatial_maps: np.ndarray, common_map_fn, visual_encoder,
                 tau_pred: np.ndarray) -> float:
    """Mean alignment of the prediction's unique-evidence embeddings (its
    spatial map minus each pairwise shared map) with its text embedding."""
    if len(candidate_ids) < 2:
        raise ValueError("euec needs at least two candidates")
    vals = []
    for col, cid in enumerate(candidate_ids):
        if col == pred_col:
            continue
        q = common_map_fn(pred_col, col)
        z_uniq = unique_evidence_embedding(visual_encoder, x,
                                           spatial_maps[pred_col], q)
        vals.append(float(z_uniq @ tau_pred))
    return float(np.mean(vals))


def run_episode(image_id: str, x: np.ndarray, label: int | None,
                cfg: EpisodeConfig, visual_encoder, text_encoder,
                base_ctx: ContextParams, rng: RngStream) -> EpisodeReport:
    """One full episode. Failures after the zero-shot stage degrade to the
    zero-shot prediction with the report flagged rather than raising."""
    t0 = time.perf_counter()
    beta = cfg.encoder.beta
    episode_rng = rng.child(f"episode:{image_id}")

    views = generate_views(x, cfg.augment, episode_rng.child("views"))
    view_embs = visual_encoder.encode_batch(views.views)
    x_canon = views.views[0]

    taus_full = encode_classes(text_encoder, base_ctx)
    n_classes = taus_full.shape[0]
    scores_full = beta * (view_embs @ taus_full.T)
    zero_shot = int(np.argmax(scores_full[0]))
    view_entropies = entropy_rows(softmax(scores_full)).tolist()

    report = EpisodeReport(
        image_id=image_id, prediction=zero_shot, zero_shot=zero_shot,
        label=label, candidate_ids=[zero_shot], vote_fractions=[1.0],
        view_entropies=view_entropies, calib_cal=[], calib_align=[],
        calib_total=[], calib_fallback=False, ecec=None, euec=None,
        metric_reference=None)

    try:
        candidates = explore_topk(scores_full, list(range(n_classes)),
                                  cfg.explore)
        ck = candidates.class_ids
        report.candidate_ids = ck
        report.vote_fractions = [float(v) for v in candidates.vote_fractions]
        report.retained_views = [int(v) for v in candidates.retained_views]
        report.prediction = candidates.winner

        if len(ck) < 2:
            report.wall_time = time.perf_counter() - t0
            return report

        bundle = estimate_evidence(x_canon, visual_encoder, taus_full[ck],
                                   beta, cfg.evidence,
                                   episode_rng.child("masks"))
        common_embs = {}
        for a in range(len(ck)):
            for b in range(a + 1, len(ck)):
                q = bundle.common_map(a, b)
                common_embs[(ck[a], ck[b])] = common_evidence_embedding(
                    visual_encoder, x_canon, q)

        base_taus = {c: taus_full[c] for c in ck}
        pair_set = build_pair_set(ck, common_embs, view_embs[0], base_taus,
                                  beta)
        ctx_star, trace = calibrate_context(base_ctx, pair_set, base_taus,
                                            text_encoder, cfg.calibrate, beta)
        report.calib_cal = [float(v) for v in trace.cal]
        report.calib_align = [float(v) for v in trace.align]
        report.calib_total = [float(v) for v in trace.total]
        report.calib_fallback = trace.fallback
        report.calib_initial_tokens = trace.initial_tokens.tolist()
        report.calib_final_tokens = trace.final_tokens.tolist()
        report.calib_base_pairwise = {
            f"{i}-{j}": [float(p[0]), float(p[1])]
            for (i, j), p in sorted(trace.base_pairwise.items())}

        taus_star = encode_classes(text_encoder, ctx_star, ck)
        final_scores = beta * (view_embs @ taus_star.T)
        final = explore_topk(final_scores, ck,
                             ExploreConfig(rho=cfg.explore.rho, top_k=1,
                                           aggregation=cfg.explore.aggregation))
        report.prediction = final.winner

        # metrics evaluate the pre-adaptation prediction at the base context
        ref = zero_shot if zero_shot in ck else ck[0]
        report.metric_reference = ref
        report.ecec = compute_ecec(view_embs[0], ref, ck, common_embs,
                                   base_taus, cfg.ecec_epsilon)
        report.euec = compute_euec(x_canon, ck.index(ref), ck,
                                   bundle.spatial_maps, bundle.common_map,
                                   visual_encoder, taus_full[ref])
    except Exception as exc:   # noqa: BLE001 - degrade, never crash the run
        report.prediction = zero_shot
        report.degraded = True
        report.degraded_reason = f"{type(exc).__name__}: {exc}"

    report.wall_time = time.perf_counter() - t0
    return report


def prompt_ensemble_predict(image_id: str, x: np.ndarray, label: int | None,
                            cfg: EpisodeConfig, visual_encoder, template_setup,
                            rng: RngStream) -> tuple[int, list]:
    """Run one full episode per template and majority-vote the predictions.

    template_setup(template) -> (text_encoder, base_ctx) builds each
    template's class prompts: the starting soft context in cl mode, the
    fixed hard-prompt tokens (with a fresh learnable prefix) in cl-hp mode.
    Ties break by summed winning vote fractions, then class index.
    """
    templates = cfg.ensemble_templates or []
    if not templates:
        raise ValueError("prompt ensemble needs at least one template")
    reports = []
    for t_idx, template in enumerate(templates):
        text_encoder, ctx_t = template_setup(template)
        rep = run_episode(f"{image_id}#t{t_idx}", x, label, cfg,
                          visual_encoder, text_encoder, ctx_t, rng)
        reports.append(rep)

    strengths = []
    for rep in reports:
        frac = 0.0
        if rep.prediction in rep.candidate_ids:
            frac = rep.vote_fractions[rep.candidate_ids.index(rep.prediction)]
        strengths.append(frac)
    winner = majority_vote_labels([r.prediction for r in reports], strengths)
    return winner, reports


def majority_vote_labels(labels: list[int], strengths: list[float]) -> int:
    """Most frequent label; ties break by summed strengths, then the lower
    label."""
    counts: dict[int, int] = {}
    total: dict[int, float] = {}
    for lab, s in zip(labels, strengths):
        counts[lab] = counts.get(lab, 0) + 1
        total[lab] = total.get(lab, 0.0) + float(s)
    return int(min(counts, key=lambda c: (-counts[c], -total[c], c)))


_WORKER_STATE: dict = {}


def _init_worker(visual_encoder, text_encoder, base_ctx, cfg, seed):
    _WORKER_STATE.update(visual=visual_encoder, text=text_encoder,
                         ctx=base_ctx, cfg=cfg, seed=seed)


def _run_worker(item):
    image_id, x, label = item
    rng = RngStream(seed=_WORKER_STATE["seed"], stream_id=0)
    return run_episode(image_id, x, label, _WORKER_STATE["cfg"],
                       _WORKER_STATE["visual"], _WORKER_STATE["text"],
                       _WORKER_STATE["ctx"], rng)


def aggregate_reports(reports: list[EpisodeReport],
                      n_skipped: int = 0) -> PredictionOutcome:
    labeled = [r for r in reports if r.label is not None]
    n_correct = sum(1 for r in labeled if r.correct)
    accuracy = n_correct / len(labeled) if labeled else None

    with_metrics = [r for r in labeled if r.ecec is not None]
    ok = [r.ecec for r in with_metrics
          if r.metric_reference == r.label]
    bad = [r.ecec for r in with_metrics
           if r.metric_reference != r.label]
    euec_pairs = [(r.mean_entropy, r.euec) for r in reports
                  if r.euec is not None]
    pearson = spearman = None
    if len(euec_pairs) >= 3:
        ent = np.array([p[0] for p in euec_pairs])
        euec = np.array([p[1] for p in euec_pairs])
        if ent.std() > 0 and euec.std() > 0:
            pearson = float(stats.pearsonr(ent, euec).statistic)
            spearman = float(stats.spearmanr(ent, euec).statistic)

    return PredictionOutcome(
        n_episodes=len(reports),
        n_correct=n_correct,
        n_skipped=n_skipped,
        accuracy=accuracy,
        mean_ecec_correct=float(np.mean(ok)) if ok else None,
        mean_ecec_incorrect=float(np.mean(bad)) if bad else None,
        euec_entropy_pearson=pearson,
        euec_entropy_spearman=spearman,
    )


def evaluate_dataset(items, cfg: EpisodeConfig, visual_encoder, text_encoder,
                     base_ctx: ContextParams, seed: int, parallel: int = 1,
                     n_skipped: int = 0):
    """Run every (image_id, image, label) item as an episode.

    Episodes are independent; with parallel > 1 they fan out over a process
    pool. Reports come back sorted by image id, so the output is identical
    at any parallelism degree. FCL_NO_PARALLEL=1 forces serial execution.
    """
    items = list(items)
    if not items:
        raise ValueError("dataset produced no readable episodes")
    if os.environ.get(NO_PARALLEL_ENV) == "1":
        parallel = 1

    if parallel <= 1:
        rng = RngStream(seed=seed, stream_id=0)
        reports = [run_episode(i, x, lab, cfg, visual_encoder, text_encoder,
                               base_ctx, rng) for i, x, lab in items]
    else:
        with ProcessPoolExecutor(
                max_workers=parallel, initializer=_init_worker,
                initargs=(visual_encoder, text_encoder, base_ctx, cfg,
                          seed)) as pool:
            reports = list(pool.map(_run_worker, items))

    reports.sort(key=lambda r: r.image_id)
    outcome = aggregate_reports(reports, n_skipped=n_skipped)
    return outcome, reports
