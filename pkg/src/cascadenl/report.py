"""Figures written next to the CSV / JSON-lines outputs of the CLI."""
import pathlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
    "savefig.dpi": 120,
}


def _save(fig, path):
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_bench(rows, path):
    """Interaction counts and wall-clock per variant against N (log-log)."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
        for variant in sorted({r["variant"] for r in rows}):
            sel = sorted((r for r in rows if r["variant"] == variant), key=lambda r: r["n"])
            ns = [r["n"] for r in sel]
            ax1.plot(ns, [r["interactions"] for r in sel], marker="o", label=variant)
            ax2.plot(ns, [r["seconds"] for r in sel], marker="o", label=variant)
        for ax, ylabel in ((ax1, "pair interactions"), (ax2, "forward seconds")):
            ax.set_xscale("log", base=2)
            ax.set_yscale("log")
            ax.set_xlabel("points N")
            ax.set_ylabel(ylabel)
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_training(history, path):
    """Loss and running OA per epoch."""
    with plt.rc_context(STYLE):
        fig, ax1 = plt.subplots()
        epochs = [h["epoch"] for h in history]
        ax1.plot(epochs, [h["loss"] for h in history], color="C0", label="loss")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("mean cross-entropy", color="C0")
        ax2 = ax1.twinx()
        ax2.plot(epochs, [h["oa"] for h in history], color="C1", label="train OA")
        ax2.set_ylabel("running OA", color="C1")
        ax2.set_ylim(0, 1.02)
        ax2.grid(False)
        return _save(fig, path)


def plot_ablation(rows, path):
    """Grouped bars of mIoU / mAcc / OA for each enabled-level set."""
    metrics = ("miou", "macc", "oa")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        width = 0.8 / len(metrics)
        for k, m in enumerate(metrics):
            xs = [i + (k - 1) * width for i in range(len(rows))]
            ax.bar(xs, [r[m] for r in rows], width=width, label=m)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels([f"levels {r['levels']}" for r in rows])
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, ncol=3)
        return _save(fig, path)
