"""Evaluation rows, aggregates, and text/CSV rendering of the result tables."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import asdict, dataclass

CSV_COLUMNS = ("image_id", "sequence", "dataset", "qp", "task", "psnr", "d_psnr", "ssim", "d_ssim", "anchor")
ANCHORS = {"SR": "bicubic", "QE": "decoded"}
MEAN_ID = "mean"
ALL = "all"
EMPTY = "|"


@dataclass(frozen=True)
class EvalRow:
    image_id: str
    sequence: str
    dataset: str
    qp: int | str
    task: str
    psnr: float
    d_psnr: float | None
    ssim: float
    d_ssim: float | None
    anchor: str

    @property
    def is_aggregate(self) -> bool:
        return self.image_id == MEAN_ID


def _mean(values):
    values = list(values)
    if any(v is None for v in values):
        return None
    return math.fsum(values) / len(values)


def _qp_key(qp):
    return (1, 0) if qp == ALL else (0, int(qp))


def _sort_key(row: EvalRow):
    return (row.is_aggregate, row.dataset, row.sequence, _qp_key(row.qp), row.task, row.image_id)


def _average(rows: list[EvalRow], **overrides) -> EvalRow:
    base = rows[0]
    values = {
        "psnr": _mean(r.psnr for r in rows),
        "d_psnr": _mean(r.d_psnr for r in rows),
        "ssim": _mean(r.ssim for r in rows),
        "d_ssim": _mean(r.d_ssim for r in rows),
    }
    return EvalRow(**{**asdict(base), **values, "image_id": MEAN_ID, **overrides})


@dataclass
class EvalReport:
    rows: list[EvalRow]

    def aggregates(self) -> list[EvalRow]:
        """Mean over images per (dataset, task, qp), then over images and QPs per (dataset, task)."""
        per_qp = defaultdict(list)
        per_task = defaultdict(list)
        for r in self.rows:
            if r.is_aggregate:
                continue
            per_qp[(r.dataset, r.task, r.qp)].append(r)
            per_task[(r.dataset, r.task)].append(r)
        out = [_average(rs, sequence=ALL) for rs in per_qp.values()]
        out += [_average(rs, sequence=ALL, qp=ALL) for rs in per_task.values()]
        return sorted(out, key=_sort_key)

    def all_rows(self) -> list[EvalRow]:
        per_image = sorted((r for r in self.rows if not r.is_aggregate), key=_sort_key)
        return per_image + self.aggregates()

    def mean(self, task: str, qp=ALL, metric: str = "psnr", dataset: str | None = None) -> float | None:
        for r in self.aggregates():
            if r.task == task and r.qp == qp and (dataset is None or r.dataset == dataset):
                return getattr(r, metric)
        return None


def _fmt_float(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _parse_float(s: str):
    return None if s == "" else float(s)


def to_csv(rows: list[EvalRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.image_id, r.sequence, r.dataset, r.qp, r.task, _fmt_float(r.psnr), _fmt_float(r.d_psnr),
                    _fmt_float(r.ssim), _fmt_float(r.d_ssim), r.anchor])
    return buf.getvalue()


def parse_csv(text: str) -> list[EvalRow]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        qp = rec["qp"]
        out.append(EvalRow(
            image_id=rec["image_id"], sequence=rec["sequence"], dataset=rec["dataset"],
            qp=qp if qp == ALL else int(qp), task=rec["task"],
            psnr=_parse_float(rec["psnr"]), d_psnr=_parse_float(rec["d_psnr"]),
            ssim=_parse_float(rec["ssim"]), d_ssim=_parse_float(rec["d_ssim"]), anchor=rec["anchor"],
        ))
    return out


def cell(value, delta, digits: int) -> str:
    """'x (+y)' with the delta in brackets; '|' when there is nothing to show."""
    if value is None:
        return EMPTY
    v = "inf" if value == math.inf else f"{value:.{digits}f}"
    if delta is None:
        return v
    d = "exact" if delta == math.inf else f"{delta:+.{digits}f}"
    return f"{v} ({d})"


def _render(header: list[str], body: list[list[str]], rule_before: set[int] = frozenset()) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)] if body else [len(h) for h in header]
    line = "  ".join("-" * w for w in widths)

    def fmt(row):
        return "  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip()

    out = [fmt(header), line]
    for i, row in enumerate(body):
        if i in rule_before:
            out.append(line)
        out.append(fmt(row))
    return "\n".join(out) + "\n"


def to_table(rows: list[EvalRow]) -> str:
    """One line per (dataset, sequence, QP); SR and QE side by side, aggregates last."""
    grouped: dict[tuple, dict[str, EvalRow]] = {}
    order = []
    for r in rows:
        key = (r.is_aggregate, r.dataset, r.sequence if not r.is_aggregate else ALL, r.qp,
               r.image_id)
        if key not in grouped:
            grouped[key] = {}
            order.append(key)
        grouped[key][r.task] = r
    header = ["dataset", "sequence", "image", "QP", "SR PSNR", "SR SSIM", "QE PSNR", "QE SSIM"]
    body, first_agg = [], None
    for key in order:
        agg, dataset, sequence, qp, image = key
        if agg and first_agg is None:
            first_agg = len(body)
        t = grouped[key]
        sr, qe = t.get("SR"), t.get("QE")
        body.append([
            dataset, sequence, "Average" if agg else image, f"QP{qp}" if qp != ALL else "all",
            cell(sr.psnr, sr.d_psnr, 2) if sr else EMPTY,
            cell(sr.ssim, sr.d_ssim, 4) if sr else EMPTY,
            cell(qe.psnr, qe.d_psnr, 2) if qe else EMPTY,
            cell(qe.ssim, qe.d_ssim, 4) if qe else EMPTY,
        ])
    return _render(header, body, {first_agg} if first_agg else set())


def emit_report(report: EvalReport | list[EvalRow], format: str = "table-text") -> str:
    rows = report.all_rows() if isinstance(report, EvalReport) else sorted(report, key=_sort_key)
    if format == "csv":
        return to_csv(rows)
    if format == "table-text":
        return to_table(rows)
    raise ValueError(f"unknown report format {format!r}")


def comparison_table(reports: dict[str, tuple[str, EvalReport]]) -> str:
    """Average (images, QPs) per method: {method: (baseline label, report)}."""
    header = ["Method", "Baseline", "SR PSNR", "SR SSIM", "QE PSNR", "QE SSIM"]
    body = []
    for method, (baseline, rep) in reports.items():
        row = [method, baseline]
        for task in ("SR", "QE"):
            p = rep.mean(task, ALL, "psnr")
            row.append(cell(p, rep.mean(task, ALL, "d_psnr"), 2) if p is not None else EMPTY)
            s = rep.mean(task, ALL, "ssim")
            row.append(cell(s, rep.mean(task, ALL, "d_ssim"), 4) if s is not None else EMPTY)
        body.append(row)
    return _render(header, body)


@dataclass
class ArmColumn:
    name: str
    multi_qp: bool
    use_qp_map: bool
    fine_tune: bool
    # qp -> task -> (psnr, d_psnr)
    results: dict[int, dict[str, tuple[float, float]]]


def _mark(flag: bool) -> str:
    return "yes" if flag else "no"


def ablation_table(arms: list[ArmColumn], tasks=("SR", "QE")) -> str:
    """Flag rows, a task row, one row per QP and an Average row; one column per (arm, task)."""
    qps = sorted({qp for a in arms for qp in a.results})
    header = [""] + [a.name for a in arms for _ in tasks]
    body = [
        ["Multi-QPs"] + [_mark(a.multi_qp) for a in arms for _ in tasks],
        ["qp_map"] + [_mark(a.use_qp_map) for a in arms for _ in tasks],
        ["Fine-tuning"] + [_mark(a.fine_tune) for a in arms for _ in tasks],
        ["Task"] + [t for _ in arms for t in tasks],
    ]
    for qp in qps:
        row = [f"QP{qp}"]
        for a in arms:
            for t in tasks:
                v = a.results.get(qp, {}).get(t)
                row.append(cell(v[0], v[1], 2) if v else EMPTY)
        body.append(row)
    avg = ["Average"]
    for a in arms:
        for t in tasks:
            vals = [a.results[qp][t] for qp in qps if t in a.results.get(qp, {})]
            avg.append(cell(_mean(v[0] for v in vals), _mean(v[1] for v in vals), 2) if vals else EMPTY)
    body.append(avg)
    return _render(header, body, {4, 4 + len(qps)})


def ablation_csv(arms: list[ArmColumn], tasks=("SR", "QE")) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "multi_qp", "use_qp_map", "fine_tune", "qp", "task", "psnr", "d_psnr"])
    qps = sorted({qp for a in arms for qp in a.results})
    for a in arms:
        for qp in qps:
            for t in tasks:
                v = a.results.get(qp, {}).get(t)
                if v:
                    w.writerow([a.name, int(a.multi_qp), int(a.use_qp_map), int(a.fine_tune), qp, t,
                                repr(v[0]), repr(v[1])])
        for t in tasks:
            vals = [a.results[qp][t] for qp in qps if t in a.results.get(qp, {})]
            if vals:
                w.writerow([a.name, int(a.multi_qp), int(a.use_qp_map), int(a.fine_tune), ALL, t,
                            repr(_mean(v[0] for v in vals)), repr(_mean(v[1] for v in vals))])
    return buf.getvalue()


@dataclass
class BDRow:
    dataset: str
    sequence: str
    # metric key ("SR-PSNR", "SR-SSIM", "QE-PSNR", "QE-SSIM") -> (bd vs reference, bd vs naive anchor or None)
    values: dict[str, tuple[float, float | None]]


BD_KEYS = ("SR-PSNR", "SR-SSIM", "QE-PSNR", "QE-SSIM")


def bdrate_table(rows: list[BDRow]) -> str:
    header = ["Dataset", "Sequence", *[f"{k.split('-')[0]} ({k.split('-')[1]})" for k in BD_KEYS]]
    rows = sorted(rows, key=lambda r: (r.dataset, r.sequence))
    body = []
    for r in rows:
        body.append([r.dataset, r.sequence] + [cell(*r.values[k], 2) if k in r.values else EMPTY
                                               for k in BD_KEYS])
    avg = ["", "Average"]
    for k in BD_KEYS:
        vals = [r.values[k] for r in rows if k in r.values]
        avg.append(cell(_mean(v[0] for v in vals), _mean(v[1] for v in vals), 2) if vals else EMPTY)
    body.append(avg)
    return _render(header, body, {len(body) - 1})


def bdrate_csv(rows: list[BDRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "sequence", "metric", "bd_rate", "bd_rate_vs_anchor"])
    for r in sorted(rows, key=lambda r: (r.dataset, r.sequence)):
        for k in BD_KEYS:
            if k in r.values:
                ref, anc = r.values[k]
                w.writerow([r.dataset, r.sequence, k, repr(ref), "" if anc is None else repr(anc)])
    return buf.getvalue()

