"""Tables and figure series from the JSON files written by the CLI."""

import json
from pathlib import Path

import pandas as pd
import plotly.graph_objects as go

from fewvlm.utils.logging import logger

METRIC_TITLES = {"vqa_accuracy": "VQA accuracy", "cider": "CIDEr-D", "classify_accuracy": "accuracy"}


def markdown_table(df: pd.DataFrame, floatfmt: str = ".4f") -> str:
    def cell(v) -> str:
        return format(v, floatfmt) if isinstance(v, float) else str(v)

    header = "| " + " | ".join(map(str, df.columns)) + " |"
    sep = "|" + "|".join("---" for _ in df.columns) + "|"
    rows = ["| " + " | ".join(cell(v) for v in row) + " |" for row in df.itertuples(index=False)]
    return "\n".join([header, sep, *rows])


def collect_results(results_dir: Path | str) -> list[dict]:
    out = []
    for path in sorted(Path(results_dir).rglob("*.json")):
        try:
            rec = json.loads(path.read_text())
        except json.JSONDecodeError:
            logger.warning(f"Skipping unreadable result file {path}")
            continue
        if isinstance(rec, dict):
            rec["_path"] = str(path)
            out.append(rec)
    return out


def protocol_table(records: list[dict]) -> pd.DataFrame:
    """One row per finetune / zeroshot command output"""
    rows = []
    for rec in records:
        res = rec.get("result", {})
        if rec.get("command") == "finetune":
            rows.append({"command": "finetune", "template": res["template"], "metric": res["metric"],
                         "n_train": res["n_train"], "n_splits": len(res["per_split"]),
                         "mean": res["mean"], "std": res["std"]})
        elif rec.get("command") == "zeroshot":
            rows.append({"command": "zeroshot", "template": rec["config"]["template"],
                         "metric": res["metric"], "n_train": 0, "n_splits": 1,
                         "mean": res["score"], "std": 0.0})
    return pd.DataFrame(rows, columns=["command", "template", "metric", "n_train", "n_splits",
                                       "mean", "std"])


def objectives_table(rec: dict) -> pd.DataFrame:
    # zero-shot columns first, few-shot columns when the study ran them
    return pd.DataFrame([{"objective": obj, **s} for obj, s in rec["summary"].items()])


def prompts_tables(rec: dict) -> tuple[pd.DataFrame, pd.DataFrame]:
    zs = pd.DataFrame([{"template": t, "vqa_accuracy": v}
                       for t, v in rec["summary"]["zero_shot"].items()])
    return zs, sweep_table(rec["summary"]["sweep"], "vqa_accuracy")


def sweep_table(summary: dict, metric: str) -> pd.DataFrame:
    """Long table of template -> {n_train: score} series"""
    return pd.DataFrame([
        {"template": t, "n_train": int(n), metric: v}
        for t, series in summary.items()
        for n, v in series.items()
    ])


def episodes_table(rec: dict) -> pd.DataFrame:
    return pd.DataFrame([{"shots": int(k), "accuracy": v} for k, v in rec["summary"].items()])


def sweep_figure(sweep: pd.DataFrame) -> go.Figure:
    metric = sweep.columns[-1]
    fig = go.Figure()
    for template, grp in sweep.groupby("template", sort=True):
        grp = grp.sort_values("n_train")
        fig.add_trace(go.Scatter(x=grp["n_train"], y=grp[metric], mode="lines+markers",
                                 name=str(template)))
    fig.update_layout(xaxis_title="training examples", yaxis_title=METRIC_TITLES.get(metric, metric),
                      template="plotly_white")
    return fig


def episodes_figure(df: pd.DataFrame) -> go.Figure:
    fig = go.Figure(go.Bar(x=df["shots"].astype(str), y=df["accuracy"]))
    fig.add_hline(y=0.2, line_dash="dot", annotation_text="chance")
    fig.update_layout(xaxis_title="shots per class", yaxis_title="accuracy",
                      template="plotly_white")
    return fig


def build_report(results_dir: Path | str, output_dir: Path | str | None = None) -> dict:
    """
    Write CSV + Markdown tables and HTML figures for everything found in
    `results_dir`.

    Returns
    -------
    dict
        Table name -> Markdown, plus the list of written files.
    """
    records = collect_results(results_dir)
    out = Path(output_dir or Path(results_dir) / "report")
    out.mkdir(parents=True, exist_ok=True)

    tables: dict[str, pd.DataFrame] = {}
    figures: dict[str, go.Figure] = {}
    protocol = protocol_table(records)
    if len(protocol):
        tables["protocol"] = protocol
    for rec in records:
        kind = rec.get("experiment")
        if kind == "objectives":
            tables["objectives"] = objectives_table(rec)
        elif kind == "prompts":
            tables["prompts_zero_shot"], tables["prompts_sweep"] = prompts_tables(rec)
            figures["prompts_sweep"] = sweep_figure(tables["prompts_sweep"])
        elif kind in ("caption_prompts", "target_prompts"):
            tables[kind] = sweep_table(rec["summary"], rec["metric"])
            figures[kind] = sweep_figure(tables[kind])
        elif kind == "episodes":
            tables["episodes"] = episodes_table(rec)
            figures["episodes"] = episodes_figure(tables["episodes"])

    written = []
    markdown = {}
    for name, df in tables.items():
        df.to_csv(out / f"{name}.csv", index=False)
        markdown[name] = markdown_table(df)
        (out / f"{name}.md").write_text(markdown[name] + "\n")
        written += [str(out / f"{name}.csv"), str(out / f"{name}.md")]
    for name, fig in figures.items():
        fig.write_html(out / f"{name}.html", include_plotlyjs="cdn")
        written.append(str(out / f"{name}.html"))
    logger.info(f"Report with {len(tables)} tables and {len(figures)} figures in {out}")
    return {"tables": markdown, "files": written,
            "note": "SPICE is not computed; captioning is scored with CIDEr-D only"}
