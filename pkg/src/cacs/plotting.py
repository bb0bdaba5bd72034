"""Static figures for experiment reports (PNG files, no interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_PHASES = ("allocate_s", "provision_s", "checkpoint_s", "restart_s")


def _by_x(report, name):
    pts = [(x, v) for _, v, x in report.series(name)]
    return [p[0] for p in pts], [p[1] for p in pts]


def _phases(ax, report, prefix="", style="-"):
    for phase in _PHASES:
        xs, ys = _by_x(report, prefix + phase)
        if xs:
            ax.plot(xs, ys, style, marker="o", label=f"{prefix}{phase[:-2]}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("VMs")
    ax.set_ylabel("virtual seconds")


def plot_report(report, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    name = report.scenario
    if name == "scaling":
        _phases(ax, report)
    elif name == "compare":
        for backend, style in zip(report.params["backends"], ("-", "--", ":")):
            _phases(ax, report, prefix=f"{backend}/", style=style)
    elif name == "heartbeat":
        xs, ys = _by_x(report, "roundtrip_s")
        ax.plot(xs, ys, marker="o", label="measured")
        xs, ys = _by_x(report, "law_s")
        ax.plot(xs, ys, "--", label="2 floor(log2 n) L + h")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("VMs")
        ax.set_ylabel("round-trip (virtual s)")
    elif name == "burst100":
        ts = [t for t, _, _ in report.series("measured_Bps")]
        ax.plot(ts, [v for _, v, _ in report.series("measured_Bps")], label="measured")
        ax.plot(ts, [v for _, v, _ in report.series("model_Bps")], "--", label="m c1 + n c2")
        ax.axvline(report.params["apps"] - 1, color="grey", lw=0.8)
        ax.set_xlabel("virtual time (s)")
        ax.set_ylabel("bytes/s")
        twin = ax.twinx()
        twin.plot(ts, [v for _, v, _ in report.series("pool_active")], color="tab:green",
                  lw=0.8, label="pool workers")
        twin.set_ylabel("active pool workers")
    elif name == "migrate40":
        ts = [t for t, _, _ in report.series("stored_remote_bytes")]
        ax.plot(ts, [v / 1e6 for _, v, _ in report.series("stored_remote_bytes")],
                label="shared store (MB)")
        ax.set_xlabel("virtual time (s)")
        ax.set_ylabel("MB stored")
        twin = ax.twinx()
        for series, color in (("live_source", "tab:orange"), ("live_target", "tab:green")):
            twin.step(ts, [v for _, v, _ in report.series(series)], where="post", lw=0.8,
                      color=color, label=series)
        twin.set_ylabel("live applications")
        twin.legend(loc="upper right")
    ax.set_title(f"{name} (seed {report.seed})")
    ax.legend(loc="upper left", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
