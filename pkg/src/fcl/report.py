"""Report emission: canonical JSON, flat CSV summaries, grayscale map dumps,
and the matplotlib figures rendered next to them.

JSON output is deterministic (sorted keys, repr floats, no timestamps), so
identical runs produce byte-identical reports; wall-clock timings are
printed to stderr instead of serialized.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt     # noqa: E402  (backend must be set first)


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        f.write(canonical_json(obj))


def evaluation_report_dict(config_echo: dict, outcome, reports) -> dict:
    return {
        "header": {
            "config": config_echo,
            "seed": config_echo.get("seed"),
            "backend": config_echo.get("backend"),
        },
        "episodes": [r.to_json_dict() for r in reports],
        "aggregate": outcome.to_json_dict(),
    }


def write_evaluation_outputs(out_dir: str, config_echo: dict, outcome,
                             reports, figures: bool = True) -> dict:
    """report.json + summary.csv (+ figures); returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    report_path = os.path.join(out_dir, "report.json")
    write_json(report_path, evaluation_report_dict(config_echo, outcome, reports))
    paths["report"] = report_path

    csv_path = os.path.join(out_dir, "summary.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "zero_shot", "fcl", "correct",
                         "ecec", "euec"])
        for r in reports:
            writer.writerow([
                r.image_id, r.zero_shot, r.prediction,
                "" if r.correct is None else str(r.correct).lower(),
                "" if r.ecec is None else f"{r.ecec:.10g}",
                "" if r.euec is None else f"{r.euec:.10g}"])
    paths["summary"] = csv_path

    if figures:
        paths.update(render_evaluation_figures(out_dir, reports))
    return paths


def render_evaluation_figures(out_dir: str, reports) -> dict:
    """Shared-evidence bias split by correctness, and unique-evidence
    alignment against view entropy."""
    paths = {}
    ok = [r.ecec for r in reports
          if r.ecec is not None and r.label is not None
          and r.metric_reference == r.label]
    bad = [r.ecec for r in reports
           if r.ecec is not None and r.label is not None
           and r.metric_reference != r.label]
    if ok or bad:
        fig, ax = plt.subplots(figsize=(5, 3.4))
        bins = np.linspace(0.0, max(ok + bad) * 1.05 + 1e-9, 24)
        if ok:
            ax.hist(ok, bins=bins, alpha=0.6, label=f"correct (n={len(ok)})",
                    color="tab:blue", density=True)
        if bad:
            ax.hist(bad, bins=bins, alpha=0.6,
                    label=f"incorrect (n={len(bad)})", color="tab:red",
                    density=True)
        ax.set_xlabel("common-evidence contribution")
        ax.set_ylabel("density")
        ax.legend(frameon=False)
        fig.tight_layout()
        path = os.path.join(out_dir, "ecec_by_correctness.png")
        fig.savefig(path, dpi=130)
        plt.close(fig)
        paths["ecec_figure"] = path

    pairs = [(r.mean_entropy, r.euec) for r in reports if r.euec is not None]
    if pairs:
        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.scatter([p[0] for p in pairs], [p[1] for p in pairs], s=14,
                   alpha=0.7, color="tab:green")
        ax.set_xlabel("mean view entropy (nats)")
        ax.set_ylabel("unique-evidence contribution")
        fig.tight_layout()
        path = os.path.join(out_dir, "euec_vs_entropy.png")
        fig.savefig(path, dpi=130)
        plt.close(fig)
        paths["euec_figure"] = path
    return paths


def write_pgm(path: str, values: np.ndarray) -> None:
    """8-bit binary PGM, min-max scaled."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    data = np.round(scaled * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_evidence_outputs(out_dir: str, class_names: list[str],
                           candidate_ids: list[int], bundle,
                           figures: bool = True) -> dict:
    """Per-candidate grayscale maps plus a JSON sidecar of raw statistics."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    stats_doc = {}
    for col, cid in enumerate(candidate_ids):
        name = class_names[cid]
        emap = bundle.evidence_maps[col]
        pgm_path = os.path.join(out_dir, f"evidence_{name}.pgm")
        write_pgm(pgm_path, emap)
        paths[f"map_{name}"] = pgm_path
        peak = np.unravel_index(int(np.argmax(emap)), emap.shape)
        stats_doc[name] = {
            "class_id": cid,
            "min": float(emap.min()),
            "max": float(emap.max()),
            "mean": float(emap.mean()),
            "sum": float(emap.sum()),
            "argmax_pixel": [int(peak[0]), int(peak[1])],
            "base_log_posterior": float(bundle.base_logp[col]),
        }
    sidecar = os.path.join(out_dir, "evidence_stats.json")
    write_json(sidecar, stats_doc)
    paths["stats"] = sidecar

    if figures and candidate_ids:
        k = len(candidate_ids)
        fig, axes = plt.subplots(1, k, figsize=(2.4 * k, 2.6), squeeze=False)
        for col, cid in enumerate(candidate_ids):
            ax = axes[0][col]
            ax.imshow(bundle.evidence_maps[col], cmap="magma")
            ax.set_title(class_names[cid], fontsize=9)
            ax.axis("off")
        fig.tight_layout()
        panel = os.path.join(out_dir, "evidence_maps.png")
        fig.savefig(panel, dpi=130)
        plt.close(fig)
        paths["panel"] = panel
    return paths


def write_failure_mode_outputs(out_dir: str, result: dict,
                               figures: bool = True) -> dict:
    import dataclasses

    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    summary_path = os.path.join(out_dir, "failure_modes.json")
    doc = dict(result["summary"])
    doc["world"] = dataclasses.asdict(result["config"])
    write_json(summary_path, doc)
    paths["summary"] = summary_path

    csv_path = os.path.join(out_dir, "failure_modes.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trial", "vote_prediction", "vote_wrong",
                         "fcl_prediction", "fcl_correct", "gap_before",
                         "gap_after", "gap_reduced", "cal_loss_before",
                         "cal_loss_after", "wrong_prob_start",
                         "wrong_prob_end"])
        for t in result["trials"]:
            traj = t["wrong_prob_trajectory"]
            writer.writerow([t["trial"], t["vote_prediction"],
                             str(t["vote_wrong"]).lower(),
                             t["fcl_prediction"],
                             str(t["fcl_correct"]).lower(),
                             f"{t['gap_before']:.10g}",
                             f"{t['gap_after']:.10g}",
                             str(t["gap_reduced"]).lower(),
                             f"{t['cal_loss_before']:.10g}",
                             f"{t['cal_loss_after']:.10g}",
                             f"{traj[0]:.10g}", f"{traj[-1]:.10g}"])
    paths["trials"] = csv_path

    if figures:
        traj = np.array([t["wrong_prob_trajectory"] for t in result["trials"]])
        fig, ax = plt.subplots(figsize=(5, 3.4))
        steps = np.arange(traj.shape[1])
        for row in traj:
            ax.plot(steps, row, color="tab:red", alpha=0.15, lw=0.8)
        ax.plot(steps, traj.mean(axis=0), color="black", lw=2, label="mean")
        ax.set_xlabel("confidence-minimization step")
        ax.set_ylabel("wrong-class probability")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig_path = os.path.join(out_dir, "confidence_amplification.png")
        fig.savefig(fig_path, dpi=130)
        plt.close(fig)
        paths["figure"] = fig_path
    return paths


def write_correlation_outputs(out_dir: str, result: dict, name: str,
                              figures: bool = True) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    summary = {k: result[k] for k in ("degenerate", "pearson", "spearman")}
    json_path = os.path.join(out_dir, f"{name}.json")
    write_json(json_path, summary)
    paths["summary"] = json_path

    csv_path = os.path.join(out_dir, f"{name}.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["entropy", "unique_alignment"])
        for e, a in zip(result["entropy"], result["alignment"]):
            writer.writerow([f"{e:.10g}", f"{a:.10g}"])
    paths["points"] = csv_path

    if figures and not result["degenerate"]:
        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.scatter(result["entropy"], result["alignment"], s=12, alpha=0.7)
        ax.set_xlabel("view entropy (nats)")
        ax.set_ylabel("planted-unique alignment")
        ax.set_title(f"spearman = {result['spearman']:.3f}", fontsize=10)
        fig.tight_layout()
        fig_path = os.path.join(out_dir, f"{name}.png")
        fig.savefig(fig_path, dpi=130)
        plt.close(fig)
        paths["figure"] = fig_path
    return paths


def write_bound_outputs(out_dir: str, rows: list[dict],
                        figures: bool = True) -> dict:
    """rows: per-instance {margin, n_classes, bound, actual}."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    csv_path = os.path.join(out_dir, "bound_check.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["margin", "n_classes", "bound", "actual"])
        for r in rows:
            writer.writerow([f"{r['margin']:.10g}", r["n_classes"],
                             f"{r['bound']:.10g}", f"{r['actual']:.10g}"])
    paths["points"] = csv_path

    violations = sum(1 for r in rows if r["actual"] < r["bound"] - 1e-12)
    summary = {"instances": len(rows), "violations": violations}
    json_path = os.path.join(out_dir, "bound_check.json")
    write_json(json_path, summary)
    paths["summary"] = json_path

    if figures:
        fig, ax = plt.subplots(figsize=(4.2, 4.2))
        ax.scatter([r["bound"] for r in rows], [r["actual"] for r in rows],
                   s=6, alpha=0.4)
        ax.plot([0, 1], [0, 1], color="black", lw=1)
        ax.set_xlabel("margin lower bound")
        ax.set_ylabel("actual probability")
        fig.tight_layout()
        fig_path = os.path.join(out_dir, "bound_check.png")
        fig.savefig(fig_path, dpi=130)
        plt.close(fig)
        paths["figure"] = fig_path
    return paths
