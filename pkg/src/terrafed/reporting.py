"""Byte-deterministic result files: rounds.csv, tasks.json, curves.svg.

Floats are written with Python's shortest round-trip repr; JSON keys are
sorted; the SVG is hand-rolled from polyline/text primitives so no plotting
dependency can perturb the bytes.
"""
from __future__ import annotations

import json
import os

from .errors import TerrafedError
from .federation import LifecycleResult, RoundRecord

CSV_HEADER = (
    "task,round,client_count,mean_train_loss,miou_cumulative,"
    "per_class_iou_joined,bytes_up,bytes_down"
)


def _fmt(x: float) -> str:
    return repr(float(x))


def _join_iou(per_class) -> str:
    return "|".join("" if v is None else _fmt(v) for v in per_class)


def write_rounds_csv(records: list[RoundRecord], path) -> None:
    lines = [CSV_HEADER]
    for r in records:
        lines.append(
            f"{r.task},{r.round},{len(r.selected)},{_fmt(r.mean_train_loss)},"
            f"{_fmt(r.miou_cumulative)},{_join_iou(r.per_class_iou)},"
            f"{r.bytes_up},{r.bytes_down}"
        )
    _write_text(path, "\n".join(lines) + "\n")


def result_summary(result: LifecycleResult) -> dict:
    """The tasks.json document."""
    tasks = []
    for s in result.task_summaries:
        entry = {
            "task": s.task,
            "classes": list(s.classes),
            "end_miou": s.end_miou,
            "per_class_iou": s.per_class_iou,
            "splits": {
                str(tp): {"loss": loss, "miou": miou}
                for tp, (loss, miou) in sorted(s.split_evals.items())
            },
            "trigger": None,
        }
        if s.trigger is not None:
            entry["trigger"] = {
                "tau": s.trigger.tau,
                "miou_before": s.trigger.miou_before,
                "miou_after": s.trigger.miou_after,
                "epochs_per_client": {
                    str(k): v for k, v in sorted(s.trigger.epochs_per_client.items())
                },
            }
        tasks.append(entry)
    table = result.forgetting_table
    forgetting = None
    if table is not None:
        forgetting = {
            "loss_delta": {
                str(t): {str(tp): v for tp, v in sorted(row.items())}
                for t, row in sorted(table.loss_delta.items())
            },
            "miou_delta": {
                str(t): {str(tp): v for tp, v in sorted(row.items())}
                for t, row in sorted(table.miou_delta.items())
            },
            "cumulative_loss": {str(t): v for t, v in sorted(table.cumulative_loss.items())},
            "cumulative_miou": {str(t): v for t, v in sorted(table.cumulative_miou.items())},
        }
    return {
        "config": result.config.to_mapping(),
        "task0_miou": result.task0_miou,
        "tau": result.tau,
        "psi_broadcast_bytes": result.psi_broadcast_bytes,
        "tasks": tasks,
        "forgetting": forgetting,
    }


def write_tasks_json(result: LifecycleResult, path) -> None:
    _write_text(path, json.dumps(result_summary(result), sort_keys=True, indent=1) + "\n")


def write_curves_svg(result: LifecycleResult, path) -> None:
    """Cumulative mIoU per round with task boundaries and recovery markers."""
    records = result.records
    width, height, margin = 800, 400, 50
    n = max(len(records), 1)

    def x_at(i: int) -> float:
        return margin + (width - 2 * margin) * (i / max(n - 1, 1))

    def y_at(v: float) -> float:
        return height - margin - (height - 2 * margin) * v

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{margin}" y="{margin - 10}" font-size="12">cumulative mIoU per round</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(
            f'<text x="{margin - 40}" y="{y_at(frac):.2f}" font-size="10">{frac:.2f}</text>'
        )
    boundaries = [i for i in range(1, len(records)) if records[i].task != records[i - 1].task]
    for i in boundaries:
        x = x_at(i)
        parts.append(
            f'<line x1="{x:.2f}" y1="{margin}" x2="{x:.2f}" y2="{height - margin}" '
            f'stroke="gray" stroke-dasharray="4 3"/>'
        )
    points = " ".join(
        f"{x_at(i):.2f},{y_at(r.miou_cumulative):.2f}" for i, r in enumerate(records)
    )
    parts.append(f'<polyline points="{points}" fill="none" stroke="steelblue" stroke-width="2"/>')
    index_of_last_round = {}
    for i, r in enumerate(records):
        index_of_last_round[r.task] = i
    for s in result.task_summaries:
        if s.trigger is not None:
            i = index_of_last_round[s.task]
            parts.append(
                f'<circle cx="{x_at(i):.2f}" cy="{y_at(s.trigger.miou_after):.2f}" r="5" '
                f'fill="none" stroke="crimson" stroke-width="2"/>'
            )
    parts.append("</svg>")
    _write_text(path, "\n".join(parts) + "\n")


def _write_text(path, text: str) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise TerrafedError(f"cannot write {path}: {exc}") from exc


def emit(result: LifecycleResult, out_dir, svg: bool = False) -> dict[str, str]:
    """Write all result files into out_dir; returns name -> path."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "rounds": os.path.join(out_dir, "rounds.csv"),
        "tasks": os.path.join(out_dir, "tasks.json"),
    }
    write_rounds_csv(result.records, paths["rounds"])
    write_tasks_json(result, paths["tasks"])
    if svg:
        paths["curves"] = os.path.join(out_dir, "curves.svg")
        write_curves_svg(result, paths["curves"])
    return paths
