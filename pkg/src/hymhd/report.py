"""CSV rate tables and the companion convergence figure."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .mms import compute_eoc

CSV_HEADER = "MeshSize,TotalEnergyComponentNormError,Rate"


def format_number(x: float) -> str:
    """12 significant digits, scientific notation, stable across runs."""
    return f"{x:.11e}"


def rate_table_rows(hs, errors):
    """CSV body rows; the rate column sits on the finer row of each pair."""
    rates = compute_eoc(errors, hs) if len(errors) > 1 else []
    rows = []
    for i, (h, e) in enumerate(zip(hs, errors)):
        rate = format_number(rates[i - 1]) if i > 0 else ""
        rows.append(f"{format_number(h)},{format_number(e)},{rate}")
    return rows


def rate_table_csv(hs, errors) -> str:
    return "\n".join([CSV_HEADER, *rate_table_rows(hs, errors)]) + "\n"


def render_rate_figure(hs, errors, k: int, path: str, title: str = ""):
    """Log-log energy error vs mesh size with slope annotations."""
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    ax.loglog(hs, errors, "o-", color="tab:blue", label=f"k={k}")
    rates = compute_eoc(errors, hs) if len(errors) > 1 else []
    for i, r in enumerate(rates):
        hx = math.sqrt(hs[i] * hs[i + 1])
        ex = math.sqrt(errors[i] * errors[i + 1])
        ax.annotate(f"{r:.2f}", (hx, ex), textcoords="offset points",
                    xytext=(2, 6), fontsize=9)
    if len(hs) > 1:
        ref = [errors[-1] * (h / hs[-1]) ** (k + 1) for h in hs]
        ax.loglog(hs, ref, "k--", linewidth=0.8, label=f"slope {k + 1}")
    ax.set_xlabel("mesh size h")
    ax.set_ylabel("energy error")
    if title:
        ax.set_title(title, fontsize=10)
    ax.grid(True, which="both", linewidth=0.3, alpha=0.5)
    ax.legend(fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
