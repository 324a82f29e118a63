"""Embedded property suites behind the `selftest` command.

Each check is self-contained, seeded, and fast; together they cover the
numeric invariants, the brute-force oracle equivalences, the gradient
contract, and episode determinism. The CLI returns nonzero if any fails.
"""

from __future__ import annotations

import time
from collections import Counter

import numpy as np

from .calibrate import CalibConfig, Pair, PairSet, total_loss_and_grad
from .encoders import init_context, make_toy_text_encoder, make_toy_vocabulary
from .evidence import EvidenceConfig, class_evidence_map, sample_masks
from .explore import ExploreConfig, explore_topk
from .numerics import (AdamWState, RngStream, adamw_step, entropy, js_divergence,
                       l2_normalize, softmax)
from .pipeline import run_episode
from .report import canonical_json
from .theorylab import margin, softmax_lower_bound
from .toyworld import ToyImageWorld, ToyWorldConfig


def check_softmax_entropy(seed: int = 0):
    gen = RngStream(seed, 1).generator()
    for _ in range(10_000):
        n = int(gen.integers(2, 51))
        scores = gen.normal(0, 5, size=n)
        p = softmax(scores)
        if abs(p.sum() - 1.0) > 1e-9 or p.min() < 0 or p.max() > 1:
            return False, "softmax output is not a probability distribution"
        h = entropy(p)
        if not (0.0 <= h <= np.log(n) + 1e-12):
            return False, f"entropy {h} outside [0, ln {n}]"
    return True, "10000 instances"


def check_js_properties(seed: int = 0):
    gen = RngStream(seed, 2).generator()
    for _ in range(2_000):
        n = int(gen.integers(2, 12))
        p = softmax(gen.normal(0, 3, size=n))
        q = softmax(gen.normal(0, 3, size=n))
        a, b = js_divergence(p, q), js_divergence(q, p)
        if abs(a - b) > 1e-12:
            return False, "asymmetric divergence"
        if not (0.0 <= a <= np.log(2) + 1e-12):
            return False, f"divergence {a} outside [0, ln 2]"
        if js_divergence(p, p) > 1e-15:
            return False, "nonzero self-divergence"
    return True, "2000 random pairs"


def check_normalize_idempotent(seed: int = 0):
    gen = RngStream(seed, 3).generator()
    for _ in range(2_000):
        v = gen.normal(0, 10, size=int(gen.integers(1, 40)))
        if np.linalg.norm(v) == 0:
            continue
        once = l2_normalize(v)
        if np.linalg.norm(l2_normalize(once) - once) > 1e-12:
            return False, "normalize is not idempotent"
    return True, "2000 vectors"


def check_adamw_quadratic(seed: int = 0):
    gen = RngStream(seed, 4).generator()
    x = gen.normal(0, 1, size=8)
    state = AdamWState.init(x, lr=0.01)
    losses = []
    for _ in range(25):
        losses.append(float(x @ x))
        x, state = adamw_step(x, 2 * x, state)
    losses.append(float(x @ x))
    diffs = np.diff(losses[3:])
    if np.any(diffs > 0):
        return False, "objective increased after step 3"
    return True, "monotone descent on x^2"


def check_softmax_bound(seed: int = 0):
    gen = RngStream(seed, 5).generator()
    for _ in range(10_000):
        n = int(gen.integers(2, 101))
        scores = gen.normal(0, 4, size=n)
        c = int(gen.integers(0, n))
        bound = softmax_lower_bound(margin(scores, c), n)
        actual = float(softmax(scores)[c])
        if actual < bound - 1e-12:
            return False, f"bound violated: {actual} < {bound}"
    return True, "10000 instances"


def _brute_force_explore(scores, class_ids, rho, k):
    """Independent path: python sorts and a Counter, no numpy tricks."""
    n = scores.shape[0]
    posts = [softmax(row) for row in scores]
    ents = [entropy(p) for p in posts]
    order = sorted(range(n), key=lambda i: (ents[i], i))
    keep = sorted(order[:max(1, int(np.floor(rho * n)))])
    votes = Counter()
    for i in keep:
        row = posts[i]
        best = min(range(len(row)), key=lambda c: (-row[c], c))
        votes[best] += 1
    fractions = {c: votes.get(c, 0) / len(keep) for c in range(scores.shape[1])}
    means = np.mean([posts[i] for i in keep], axis=0)
    ranked = sorted(range(scores.shape[1]),
                    key=lambda c: (-fractions[c], -means[c], c))
    top = ranked[:min(k, scores.shape[1])]
    return keep, [int(class_ids[c]) for c in top], \
        [fractions[c] for c in top]


def check_explore_oracle(seed: int = 0):
    gen = RngStream(seed, 6).generator()
    for _ in range(200):
        n = int(gen.integers(1, 9))
        c = int(gen.integers(2, 6))
        k = int(gen.integers(1, 6))
        rho = float(gen.uniform(0.1, 1.0))
        scores = gen.normal(0, 3, size=(n, c))
        cfg = ExploreConfig(rho=rho, top_k=k)
        got = explore_topk(scores, list(range(c)), cfg)
        keep, ids, fracs = _brute_force_explore(scores, list(range(c)), rho, k)
        if list(got.retained_views) != keep:
            return False, "retained view mismatch"
        if got.class_ids != ids:
            return False, f"candidate order mismatch: {got.class_ids} vs {ids}"
        if np.max(np.abs(np.array(fracs) - got.vote_fractions)) > 1e-12:
            return False, "vote fraction mismatch"
    return True, "200 instances"


def check_evidence_oracle(seed: int = 0):
    gen = RngStream(seed, 7).generator()
    for _ in range(200):
        h, w = int(gen.integers(2, 9)), int(gen.integers(2, 9))
        n_m = int(gen.integers(1, 17))
        cfg = EvidenceConfig(n_masks=n_m, grid_sizes=(2, 3),
                             gamma=float(gen.uniform(0.2, 0.8)))
        masks = sample_masks(cfg, h, w, RngStream(seed, int(gen.integers(1 << 30))))
        deltas = gen.normal(0, 1, size=n_m)
        got = class_evidence_map(deltas, masks, h, w)
        want = np.zeros((h, w))
        for u in range(h):
            for v in range(w):
                for d, m in zip(deltas, masks):
                    if m.pixel_mask[u, v]:
                        want[u, v] += d
        want /= n_m
        if np.max(np.abs(got - want)) > 1e-12:
            return False, "evidence map differs from double loop"
    return True, "200 instances"


def check_gradient(seed: int = 0, episodes: int = 8):
    gen = RngStream(seed, 8).generator()
    for e in range(episodes):
        d, d_token, k = 16, 6, 3
        names = [f"c{i}" for i in range(k)]
        vocab = make_toy_vocabulary(names, d_cls=d_token, vocab_seed=seed + e)
        enc = make_toy_text_encoder(vocab, d, d_token,
                                    RngStream(seed, 100 + e), ctx_gain=2.0)
        ctx = init_context("a photo of a", 3, d_token)
        ctx = ctx.with_tokens(ctx.tokens + gen.normal(0, 0.1, ctx.tokens.shape))
        base = {c: enc.encode(c, ctx) for c in range(k)}
        pairs = [Pair(i=i, j=j, z_common=l2_normalize(gen.normal(size=d)),
                      weight=float(gen.uniform(0.1, 1.0)))
                 for i in range(k) for j in range(i + 1, k)]
        pair_set = PairSet(pairs=pairs, candidate_ids=list(range(k)))
        cfg = CalibConfig()
        delta = ctx.with_tokens(ctx.tokens + gen.normal(0, 0.05, ctx.tokens.shape))
        _, _, _, grad = total_loss_and_grad(delta, pair_set, base, enc, cfg, 20.0)

        fd = np.zeros_like(grad)
        h = 1e-5
        for r in range(fd.shape[0]):
            for c_idx in range(fd.shape[1]):
                for sign in (1, -1):
                    t = delta.tokens.copy()
                    t[r, c_idx] += sign * h
                    l, _, _, _ = total_loss_and_grad(
                        delta.with_tokens(t), pair_set, base, enc, cfg, 20.0)
                    fd[r, c_idx] += sign * l / (2 * h)
        scale = max(np.max(np.abs(fd)), 1e-12)
        rel = np.max(np.abs(grad - fd)) / scale
        if rel > 1e-4:
            return False, f"gradient mismatch: relative error {rel:.2e}"
    return True, f"{episodes} episodes"


def check_map_normalization(seed: int = 0):
    from .evidence import common_evidence_map, spatial_softmax

    gen = RngStream(seed, 9).generator()
    for _ in range(1_000):
        h, w = int(gen.integers(2, 12)), int(gen.integers(2, 12))
        s_i = spatial_softmax(gen.normal(0, 2, size=(h, w)))
        s_j = spatial_softmax(gen.normal(0, 2, size=(h, w)))
        q = common_evidence_map(s_i, s_j)
        for m in (s_i, s_j, q):
            if abs(m.sum() - 1.0) > 1e-9 or m.min() <= 0:
                return False, "map does not normalize"
    return True, "1000 instances"


def check_episode_determinism(seed: int = 0):
    world = ToyImageWorld(ToyWorldConfig(seed=seed + 3, n_classes=4))
    ep = world.sample_episode(RngStream(seed, 77), bias="high")
    cfg = world.episode_config(n_views=12, top_k=3, n_masks=24)
    reports = []
    for _ in range(2):
        rep = run_episode("det", ep.image, ep.label, cfg, world.visual,
                          world.text, world.base_ctx, RngStream(seed, 0))
        reports.append(canonical_json(rep.to_json_dict()))
    if reports[0] != reports[1]:
        return False, "identical runs produced different reports"
    return True, "byte-identical repeat"


CHECKS = [
    ("softmax-entropy", check_softmax_entropy),
    ("js-divergence", check_js_properties),
    ("normalize-idempotent", check_normalize_idempotent),
    ("adamw-descent", check_adamw_quadratic),
    ("softmax-bound", check_softmax_bound),
    ("explore-oracle", check_explore_oracle),
    ("evidence-oracle", check_evidence_oracle),
    ("gradient-check", check_gradient),
    ("map-normalization", check_map_normalization),
    ("episode-determinism", check_episode_determinism),
]


def run_selftest(stream=None) -> int:
    import sys

    stream = stream or sys.stdout
    failures = 0
    t_start = time.perf_counter()
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:    # noqa: BLE001 - a crash is a failure
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        dt = time.perf_counter() - t0
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name:24s} {detail} ({dt:.2f}s)", file=stream)
        failures += 0 if ok else 1
    total = time.perf_counter() - t_start
    print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed "
          f"({total:.2f}s)", file=stream)
    return 1 if failures else 0
