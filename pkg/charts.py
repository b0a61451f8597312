"""
Plotly figures for policy comparison and robustness sweeps
"""
import logging

import plotly.express as px
import plotly.graph_objects as go

from utils import ensure_dir

logger = logging.getLogger(__name__)

PALETTE = px.colors.qualitative.Plotly


def _rgba(hex_color, alpha):
    hex_color = hex_color.lstrip("#")
    r, g, b = (int(hex_color[i:i + 2], 16) for i in (0, 2, 4))
    return f"rgba({r}, {g}, {b}, {alpha})"


def _band(fig, t, lo, hi, color, name, group):
    fig.add_trace(go.Scatter(
        x=list(t) + list(t)[::-1],
        y=list(hi) + list(lo)[::-1],
        fill="toself",
        fillcolor=color,
        line=dict(width=0),
        hoverinfo="skip",
        name=name,
        legendgroup=group,
        showlegend=False,
    ))


def cost_bands_figure(bands, title="Cumulative cost"):
    """
    Mean cumulative cost per policy with one- and two-standard-deviation bands

    Args:
        bands (pd.DataFrame): Rows from sim.compare_policies (policy, t, mean, lo1, hi1, lo2, hi2)
        title (str): Figure title

    Returns:
        go.Figure: The figure
    """
    fig = go.Figure()
    for i, (label, group) in enumerate(bands.groupby("policy", sort=False)):
        color = PALETTE[i % len(PALETTE)]
        _band(fig, group["t"], group["lo2"], group["hi2"], _rgba(color, 0.12), f"{label} ±2σ", label)
        _band(fig, group["t"], group["lo1"], group["hi1"], _rgba(color, 0.25), f"{label} ±1σ", label)
        fig.add_trace(go.Scatter(
            x=group["t"],
            y=group["mean"],
            mode="lines",
            line=dict(color=color, width=3),
            name=label,
            legendgroup=label,
        ))

    fig.update_layout(
        title=title,
        xaxis_title="Time slot",
        yaxis_title="Cumulative cost",
        plot_bgcolor="rgba(0,0,0,0)",
        hoverlabel=dict(bgcolor="white", font_size=12),
    )
    fig.update_yaxes(showgrid=True, gridwidth=1, gridcolor="rgba(211,211,211,0.3)")
    return fig


def robustness_figure(sweep, title="Optimal cost vs uncertainty width"):
    """Mean optimal slot-1 value against widening amount, min/max as a shaded range"""
    fig = px.line(sweep, x="width", y="mean_v1", markers=True, title=title,
                  color_discrete_sequence=[PALETTE[0]])
    _band(fig, sweep["width"], sweep["min_v1"], sweep["max_v1"], _rgba(PALETTE[0], 0.2), "range", "range")
    fig.update_layout(
        xaxis_title="Uncertainty width",
        yaxis_title="Optimal value",
        plot_bgcolor="rgba(0,0,0,0)",
    )
    fig.update_yaxes(showgrid=True, gridwidth=1, gridcolor="rgba(211,211,211,0.3)")
    return fig


def write_figure(fig, path):
    """Write a figure as standalone HTML loading plotly.js from the CDN"""
    ensure_dir(path)
    fig.write_html(path, include_plotlyjs="cdn", div_id="dccontrol-figure")
    logger.info(f"Wrote chart to {path}")
    return path
