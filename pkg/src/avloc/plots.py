"""CSM heatmaps, detection timelines and the CSM-std summary; every figure has a CSV twin."""
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import cross_similarity_matrix  # noqa: E402


def plot_csm(F_v, F_a, png_path, csv_path, title=None):
    """Heatmap of the audio (rows) x visual (columns) cosine matrix. Returns its std."""
    csm, std = cross_similarity_matrix(F_v, F_a)
    T = csm.shape[0]
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["audio_t"] + [f"v{j}" for j in range(csm.shape[1])])
        for i in range(T):
            w.writerow([i] + [f"{x:.6f}" for x in csm[i]])
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(csm, cmap="viridis", vmin=-1, vmax=1, origin="upper")
    ax.set_xlabel("visual segment")
    ax.set_ylabel("audio segment")
    ax.set_title(title or f"CSM (std {std:.3f})")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return std


def plot_timeline(annotations, detections, duration, png_path, gt_csv, pred_csv,
                  score_thresh=0.3, class_names=None):
    """Ground-truth strip above a prediction strip for one video.

    ``gt_csv`` has one row per annotated event; ``pred_csv`` one row per
    detection scoring at least ``score_thresh``.
    """
    preds = [d for d in detections if d.score >= score_thresh]
    with open(gt_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class_id", "start_sec", "end_sec"])
        for a in annotations:
            w.writerow([a.class_id, a.start, a.end])
    with open(pred_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class_id", "start_sec", "end_sec", "score"])
        for d in preds:
            w.writerow([d.class_id, f"{d.start:.4f}", f"{d.end:.4f}", f"{d.score:.4f}"])

    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(8, 2))
    for a in annotations:
        ax.broken_barh([(a.start, a.end - a.start)], (1.1, 0.8), color=cmap(a.class_id % 10))
    for d in preds:
        ax.broken_barh([(d.start, d.end - d.start)], (0.1, 0.8), color=cmap(d.class_id % 10),
                       alpha=max(0.2, min(1.0, d.score)))
    ax.set_xlim(0, duration)
    ax.set_ylim(0, 2)
    ax.set_yticks([0.5, 1.5])
    ax.set_yticklabels(["pred", "GT"])
    ax.set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)


def csm_std_summary(stds_by_variant, png_path, csv_path):
    """One row per model variant: mean of per-video CSM std."""
    names = list(stds_by_variant)
    means = [float(np.mean(stds_by_variant[n])) for n in names]
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "mean_std", "n_videos"])
        for n, m in zip(names, means):
            w.writerow([n, f"{m:.6f}", len(stds_by_variant[n])])
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(names, means, color="steelblue")
    ax.set_ylabel("mean of CSM std")
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return dict(zip(names, means))
