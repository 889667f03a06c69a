"""Figure rendering for the CLI report paths (Agg backend, files only)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def sweep_figure(curve, path):
    hs = [p[0] for p in curve.points]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(hs, [p[1] for p in curve.points], label="APCER")
    ax.plot(hs, [p[2] for p in curve.points], label="BPCER")
    ax.plot(hs, [p[3] for p in curve.points], label="ACER", linewidth=2)
    ax.axvline(curve.best_threshold, color="grey", linestyle=":",
               label=f"best H={curve.best_threshold:.3f}")
    ax.set_xlabel("threshold H")
    ax.set_ylabel("error rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_figure(report, path):
    epochs = [h[0] for h in report.history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h[1] for h in report.history], color="tab:blue",
            label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h[2] for h in report.history], color="tab:red",
             label="val ACER")
    ax2.set_ylabel("val ACER", color="tab:red")
    ax2.set_ylim(-0.02, 1.02)
    if report.best_epoch >= 0:
        ax2.axvline(report.best_epoch, color="grey", linestyle=":")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def latency_figure(comparison, path):
    stages = ["t_trans", "t_encry", "t_decry", "t_infer"]
    labels = ["transmission", "encrypt", "decrypt", "inference"]
    rows = [("ours", comparison.patch), ("traditional", comparison.traditional)]
    fig, ax = plt.subplots(figsize=(7, 2.8))
    colors = plt.get_cmap("tab10").colors
    for y, (name, b) in enumerate(rows):
        vals = [b.t_trans_ms, b.t_encry_ms, b.t_decry_ms, b.t_infer_ms]
        left = 0.0
        for v, label, color in zip(vals, labels, colors):
            ax.barh(y, v, left=left, color=color,
                    label=label if y == 0 else None)
            left += v
        ax.text(left + 2, y, f"{b.t_total_ms:.0f} ms", va="center")
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels([r[0] for r in rows])
    ax.set_xlabel("milliseconds")
    ax.legend(ncol=4, fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
