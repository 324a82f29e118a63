"""Synthetic instantiation of the additive evidence decomposition.

Worlds here live at the embedding level: planted common/unique components
are exactly orthogonal unit vectors, class text embeddings have configured
alignments with them, and each synthetic view realizes a coefficient
combination plus noise. Because the decomposition is known by construction,
the margin algebra, the softmax bound, and the failure modes of
confidence-driven adaptation can all be checked exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .calibrate import (CalibConfig, build_pair_set, calibrate_context,
                        candidate_posterior, sensitivity_gap)
from .encoders import ContextParams, init_context, make_planted_text_encoder
from .explore import ExploreConfig, explore_topk
from .numerics import (AdamWState, RngStream, adamw_step, as_float64,
                       entropy_rows, l2_normalize, softmax)


def margin(scores_row: np.ndarray, class_index: int) -> float:
    """Score gap between class_index and its strongest competitor."""
    s = as_float64(scores_row)
    if s.size < 2:
        raise ValueError("margin needs at least two classes")
    rivals = np.delete(s, class_index)
    return float(s[class_index] - rivals.max())


def softmax_lower_bound(m: float, n_classes: int) -> float:
    """1 / (1 + (C-1) exp(-m)): the softmax probability implied by a margin."""
    if n_classes < 2:
        raise ValueError("bound needs at least two classes")
    return float(1.0 / (1.0 + (n_classes - 1) * np.exp(-m)))


def orthonormal_set(d: int, count: int, rng: RngStream) -> np.ndarray:
    """count exactly orthonormal directions via QR on seeded draws."""
    if count > d:
        raise ValueError("cannot fit that many orthogonal directions")
    gen = rng.generator()
    q, _ = np.linalg.qr(gen.normal(size=(d, count)))
    return q.T


@dataclass
class SyntheticView:
    """One realized view: coefficients plus the resulting embeddings."""

    a_com: float
    a_uniq: np.ndarray         # (C,)
    noise: np.ndarray          # (d,)
    raw: np.ndarray            # pre-normalization combination
    embedding: np.ndarray      # normalized


@dataclass
class SyntheticWorld:
    com: np.ndarray            # (d,) common-evidence direction
    uniq: np.ndarray           # (C, d) per-class unique directions
    taus0: np.ndarray          # (C, d) base class text embeddings
    text_encoder: object       # planted toy text encoder (differentiable in ctx)
    base_ctx: ContextParams
    class_names: list[str]
    background: np.ndarray | None = None   # class-neutral context direction

    @property
    def d(self) -> int:
        return self.com.shape[0]

    @property
    def n_classes(self) -> int:
        return self.uniq.shape[0]

    def realize_view(self, a_com: float, a_uniq: np.ndarray,
                     noise_scale: float, gen: np.random.Generator,
                     a_bg: float = 0.0) -> SyntheticView:
        """a_bg adds class-neutral mass: it is orthogonal to every base text
        embedding, so it dilutes all cosines the way real scene context does
        without favoring any class."""
        a_uniq = as_float64(a_uniq)
        noise = gen.normal(0.0, noise_scale / np.sqrt(self.d), size=self.d) \
            if noise_scale > 0 else np.zeros(self.d)
        raw = a_com * self.com + a_uniq @ self.uniq + noise
        if a_bg != 0.0:
            if self.background is None:
                raise ValueError("world has no background direction")
            raw = raw + a_bg * self.background
        return SyntheticView(a_com=float(a_com), a_uniq=a_uniq, noise=noise,
                             raw=raw, embedding=l2_normalize(raw))

    def common_proxy(self, bg_mix: float = 0.0) -> np.ndarray:
        """Stand-in for an estimated shared-evidence embedding: the planted
        common direction, optionally diluted with background mass."""
        if bg_mix == 0.0 or self.background is None:
            return self.com.copy()
        return l2_normalize(self.com + bg_mix * self.background)


def make_world(com_align: np.ndarray, uniq_align: np.ndarray,
               d: int = 48, d_token: int = 16, n_ctx: int = 4,
               ctx_gain: float = 8.0, target_scale: float = 0.5,
               seed: int = 0) -> SyntheticWorld:
    """Build a world whose class embeddings have the requested alignments.

    com_align[c] = <com, tau_c>, uniq_align[c] = <uniq_c, tau_c>; the
    remaining mass goes onto a per-class filler direction orthogonal to all
    planted components, keeping every tau exactly unit-norm.
    """
    com_align = as_float64(com_align)
    uniq_align = as_float64(uniq_align)
    n_classes = com_align.size
    rng = RngStream(seed=seed, stream_id=0)
    basis = orthonormal_set(d, 2 * n_classes + 2, rng.child("components"))
    com = basis[0]
    uniq = basis[1:1 + n_classes]
    fillers = basis[1 + n_classes:1 + 2 * n_classes]
    background = basis[1 + 2 * n_classes]

    taus = []
    for c in range(n_classes):
        mass = com_align[c] ** 2 + uniq_align[c] ** 2
        if mass >= 1.0:
            raise ValueError("alignments leave no mass for the filler direction")
        tau = com_align[c] * com + uniq_align[c] * uniq[c] \
            + np.sqrt(1.0 - mass) * fillers[c]
        taus.append(tau)
    taus0 = np.stack(taus)

    names = [f"class_{c}" for c in range(n_classes)]
    base_ctx = init_context("a photo of a", n_ctx, d_token)
    encoder = make_planted_text_encoder(
        names, taus0, d_token, rng.child("text-encoder"), base_ctx,
        ctx_gain=ctx_gain, target_scale=target_scale)
    return SyntheticWorld(com=com, uniq=uniq, taus0=taus0,
                          text_encoder=encoder, base_ctx=base_ctx,
                          class_names=names, background=background)


@dataclass
class MarginBreakdown:
    """Exact expansion of one view's margin over a chosen class."""

    unique_term: float
    common_bias: np.ndarray        # per competitor <com_part, tau_j - tau_y>
    competitor_unique: np.ndarray  # per competitor <uniq_j part, tau_j>
    residual: np.ndarray           # per competitor: cross-unique and noise terms
    competitor_ids: np.ndarray
    argmax_competitor: int
    margin_direct: float
    margin_recombined: float


def margin_breakdown(view: SyntheticView, world: SyntheticWorld,
                     taus: np.ndarray, y: int, beta: float) -> MarginBreakdown:
    """Decompose the pre-normalization margin for class y.

    The bracket for competitor j is common-bias + competitor-unique +
    residual, where the residual collects every cross-unique and noise
    alignment; beta * (unique - max bracket) recombines to the directly
    computed margin exactly.
    """
    taus = as_float64(taus)
    com_part = view.a_com * world.com
    uniq_parts = view.a_uniq[:, None] * world.uniq     # (C, d)
    competitors = np.array([j for j in range(world.n_classes) if j != y])

    unique_term = float(uniq_parts[y] @ taus[y])
    common_bias = np.array([float(com_part @ (taus[j] - taus[y]))
                            for j in competitors])
    comp_unique = np.array([float(uniq_parts[j] @ taus[j]) for j in competitors])

    cross_to_y = sum(float(uniq_parts[l] @ taus[y])
                     for l in range(world.n_classes) if l != y)
    noise_to_y = float(view.noise @ taus[y])
    residual = []
    for j in competitors:
        # every unique component other than j's own hits tau_j, including y's
        cross_to_j = sum(float(uniq_parts[l] @ taus[j])
                         for l in range(world.n_classes) if l != j)
        residual.append(cross_to_j + float(view.noise @ taus[j])
                        - cross_to_y - noise_to_y)
    residual = np.array(residual)

    bracket = common_bias + comp_unique + residual
    arg = int(np.argmax(bracket))
    recombined = beta * (unique_term - bracket[arg])
    scores = beta * (view.raw @ taus.T)
    return MarginBreakdown(
        unique_term=unique_term, common_bias=common_bias,
        competitor_unique=comp_unique, residual=residual,
        competitor_ids=competitors, argmax_competitor=int(competitors[arg]),
        margin_direct=margin(scores, y), margin_recombined=float(recombined))


@dataclass
class FailureWorldConfig:
    """A confusable two-class core (true class 0, confuser 1) plus bystanders.

    Alignment contrasts are kept at realistic cosine scales (gaps around
    0.1-0.2) so neither the pair weights nor the pairwise softmax saturate
    at the similarity temperature. The calibration strength knobs here
    belong to the lab experiment, not to the engine defaults.
    """

    n_classes: int = 3
    d: int = 48
    d_token: int = 32
    n_ctx: int = 4
    com_align: tuple = (0.06, 0.30, 0.04)
    uniq_align: tuple = (0.20, 0.20, 0.20)
    biased_fraction: float = 0.7
    n_views: int = 48
    a_bg: float = 1.2
    proxy_bg_mix: float = 2.0
    a_com_biased: tuple = (1.3, 1.6)
    a_uniq_biased: tuple = (0.60, 0.85)
    a_com_clean: tuple = (0.05, 0.25)
    a_uniq_clean: tuple = (1.0, 1.4)
    noise_scale: float = 0.05
    ctx_gain: float = 8.0
    target_scale: float = 0.5
    beta: float = 20.0
    rho: float = 0.3
    top_k: int = 3
    calib_steps: int = 20
    calib_lr: float = 0.005
    calib_lambda_align: float = 0.3
    entropy_steps: int = 5
    entropy_lr: float = 0.002
    seed: int = 7

    @property
    def true_class(self) -> int:
        return 0

    @property
    def confuser(self) -> int:
        return 1


def _sample_episode_views(cfg: FailureWorldConfig, world: SyntheticWorld,
                          gen: np.random.Generator):
    """Views plus the 'original image' embedding for one biased episode."""
    n_biased = int(round(cfg.biased_fraction * cfg.n_views))
    views = []
    for k in range(cfg.n_views):
        a_uniq = np.zeros(cfg.n_classes)
        if k < n_biased:
            a_com = gen.uniform(*cfg.a_com_biased)
            a_uniq[cfg.true_class] = gen.uniform(*cfg.a_uniq_biased)
        else:
            a_com = gen.uniform(*cfg.a_com_clean)
            a_uniq[cfg.true_class] = gen.uniform(*cfg.a_uniq_clean)
        views.append(world.realize_view(a_com, a_uniq, cfg.noise_scale, gen,
                                        a_bg=cfg.a_bg))
    a_orig = np.zeros(cfg.n_classes)
    a_orig[cfg.true_class] = float(np.mean(cfg.a_uniq_biased))
    original = world.realize_view(float(np.mean(cfg.a_com_biased)), a_orig,
                                  cfg.noise_scale, gen, a_bg=cfg.a_bg)
    return views, original


def entropy_minimization_steps(view_embs: np.ndarray, text_encoder,
                               ctx0: ContextParams, beta: float, steps: int,
                               lr: float, probe_embedding: np.ndarray,
                               probe_class: int) -> dict:
    """Minimal confidence-driven comparator: AdamW on the mean prediction
    entropy of the given views. Returns the probe class's full-label-space
    probability after each step."""
    n_classes = text_encoder.n_classes
    ctx = ctx0.copy()
    state = AdamWState.init(ctx.tokens, lr=lr)

    def probe(ctx_now):
        taus = np.stack([text_encoder.encode(c, ctx_now) for c in range(n_classes)])
        post = candidate_posterior(probe_embedding, taus, beta)
        return float(post[probe_class])

    trajectory = [probe(ctx)]
    for _ in range(steps):
        taus = np.stack([text_encoder.encode(c, ctx) for c in range(n_classes)])
        posts = softmax(beta * (view_embs @ taus.T))
        ent = entropy_rows(posts)
        # dH/ds_c = -p_c (log p_c + H) for each view row
        logp = np.log(np.maximum(posts, 1e-300))
        ds = -posts * (logp + ent[:, None]) / view_embs.shape[0]
        grad = np.zeros_like(ctx.tokens)
        for c in range(n_classes):
            upstream = beta * (ds[:, c] @ view_embs)
            grad += text_encoder.encode_vjp(c, ctx, upstream)
        tokens, state = adamw_step(ctx.tokens, grad, state)
        ctx = ctx.with_tokens(tokens)
        trajectory.append(probe(ctx))
    return {"wrong_prob_trajectory": trajectory, "context": ctx}


def run_failure_mode_experiments(cfg: FailureWorldConfig, n_trials: int,
                                 seed: int | None = None) -> dict:
    """Three seeded experiments on the biased world.

    (a) entropy minimization on retained views amplifies the wrong class;
    (b) majority voting over the biased views picks the wrong class;
    (c) fair-context calibration with the planted common component shrinks
        the pairwise sensitivity gap and flips episodes to the true class.
    """
    seed = cfg.seed if seed is None else seed
    world = make_world(np.array(cfg.com_align), np.array(cfg.uniq_align),
                       d=cfg.d, d_token=cfg.d_token, n_ctx=cfg.n_ctx,
                       ctx_gain=cfg.ctx_gain, target_scale=cfg.target_scale,
                       seed=seed)
    explore_cfg = ExploreConfig(rho=cfg.rho, top_k=cfg.top_k)
    calib_cfg = CalibConfig(steps=cfg.calib_steps, learning_rate=cfg.calib_lr,
                            lambda_align=cfg.calib_lambda_align)
    y, j = cfg.true_class, cfg.confuser
    class_ids = list(range(cfg.n_classes))

    trials = []
    for t in range(n_trials):
        gen = RngStream(seed=seed, stream_id=0).child(f"trial:{t}").generator()
        views, original = _sample_episode_views(cfg, world, gen)
        embs = np.stack([v.embedding for v in views])

        taus0 = np.stack([world.text_encoder.encode(c, world.base_ctx)
                          for c in class_ids])
        scores = cfg.beta * (embs @ taus0.T)
        candidates = explore_topk(scores, class_ids, explore_cfg)
        vote_pred = candidates.winner

        ent = entropy_minimization_steps(
            embs[candidates.retained_views], world.text_encoder, world.base_ctx,
            cfg.beta, cfg.entropy_steps, cfg.entropy_lr,
            original.embedding, probe_class=j)

        base_taus = {c: taus0[c] for c in class_ids}
        ck = candidates.class_ids
        proxy = world.common_proxy(cfg.proxy_bg_mix)
        common = {}
        for a in range(len(ck)):
            for b in range(a + 1, len(ck)):
                common[(ck[a], ck[b])] = proxy
        pair_set = build_pair_set(ck, common, original.embedding,
                                  base_taus, cfg.beta)
        ctx_star, trace = calibrate_context(
            world.base_ctx, pair_set, base_taus, world.text_encoder,
            calib_cfg, cfg.beta)

        taus_star = np.stack([world.text_encoder.encode(c, ctx_star)
                              for c in ck])
        final_scores = cfg.beta * (embs @ taus_star.T)
        final = explore_topk(final_scores, ck,
                             ExploreConfig(rho=cfg.rho, top_k=1))
        gap0 = sensitivity_gap(proxy, taus0[y], taus0[j])
        tau_y_star = world.text_encoder.encode(y, ctx_star)
        tau_j_star = world.text_encoder.encode(j, ctx_star)
        gap_star = sensitivity_gap(proxy, tau_y_star, tau_j_star)

        trials.append({
            "trial": t,
            "vote_prediction": int(vote_pred),
            "vote_wrong": bool(vote_pred != y),
            "wrong_prob_trajectory": ent["wrong_prob_trajectory"],
            "fcl_prediction": int(final.winner),
            "fcl_correct": bool(final.winner == y),
            "gap_before": gap0,
            "gap_after": gap_star,
            "gap_reduced": bool(gap_star < gap0),
            "cal_loss_before": trace.cal[0],
            "cal_loss_after": trace.cal[-1],
        })

    wrong_votes = [t for t in trials if t["vote_wrong"]]
    flipped = [t for t in wrong_votes if t["fcl_correct"]]
    traj = np.array([t["wrong_prob_trajectory"] for t in trials])
    mean_traj = traj.mean(axis=0)
    summary = {
        "n_trials": n_trials,
        "vote_wrong_fraction": len(wrong_votes) / n_trials,
        "flip_fraction": (len(flipped) / len(wrong_votes)) if wrong_votes else 0.0,
        "gap_reduced_fraction": float(np.mean([t["gap_reduced"] for t in trials])),
        "mean_wrong_prob_trajectory": mean_traj.tolist(),
        "wrong_prob_strictly_increasing": bool(np.all(np.diff(mean_traj) > 0)),
        "true_class": y,
        "confuser": j,
    }
    return {"config": cfg, "summary": summary, "trials": trials}


def euec_entropy_correlation(n_views: int, seed: int = 0,
                             mode: str = "swept",
                             world: SyntheticWorld | None = None,
                             beta: float = 20.0,
                             noise_scale: float = 0.05) -> dict:
    """Correlate per-view prediction entropy with planted-unique alignment.

    swept: the true class's unique coefficient runs from 0 to 1 with other
    coefficients fixed, so stronger unique evidence should mean lower
    entropy. noise: every coefficient is held constant and only the residual
    noise varies, the null model where no real relation exists. constant:
    identical views, the degenerate case with no variance at all.
    """
    if n_views < 30:
        raise ValueError("need at least 30 views for a stable correlation")
    if world is None:
        world = make_world(np.array([0.2, 0.3, 0.1]), np.array([0.3, 0.3, 0.3]),
                           seed=seed)
    gen = RngStream(seed=seed, stream_id=0).child("euec-corr").generator()
    y = 0
    taus = world.taus0

    alignments = []
    entropies = []
    for k in range(n_views):
        a_uniq = np.zeros(world.n_classes)
        if mode == "swept":
            a_uniq[y] = k / (n_views - 1)
            a_com = 0.6
        elif mode == "noise":
            a_uniq[:] = 0.3
            a_com = 0.6
            noise_scale = max(noise_scale, 0.3)
        elif mode == "constant":
            a_uniq[:] = 0.3
            a_com = 0.6
            noise_scale = 0.0
        else:
            raise ValueError(f"unknown mode {mode!r}")
        view = world.realize_view(a_com, a_uniq, noise_scale, gen)
        post = softmax(beta * (view.embedding @ taus.T))
        entropies.append(float(entropy_rows(post[None, :])[0]))
        alignments.append(float(view.embedding @ world.uniq[y]))

    alignments = np.array(alignments)
    entropies = np.array(entropies)
    if alignments.std() == 0.0 or entropies.std() == 0.0:
        return {"degenerate": True, "pearson": None, "spearman": None,
                "entropy": entropies.tolist(), "alignment": alignments.tolist()}
    pearson = float(stats.pearsonr(entropies, alignments).statistic)
    spearman = float(stats.spearmanr(entropies, alignments).statistic)
    return {"degenerate": False, "pearson": pearson, "spearman": spearman,
            "entropy": entropies.tolist(), "alignment": alignments.tolist()}
