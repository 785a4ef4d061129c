"""Availability-mask experiment matrix and report emission."""

import csv
import io
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import AblationConfig
from .metrics import psnr, ssim, wilcoxon_signed_rank
from .types import SchemaError, make_task, parse_mask, schema_lookup

CSV_FIELDS = ("case_id", "mask", "target", "psnr", "ssim")


@dataclass(frozen=True)
class MetricRecord:
    case_id: str
    mask: str
    target: str
    psnr: float
    ssim: float


def order_combinations(codes, targets, schema):
    """(mask, target) pairs sorted by number of inputs, then schema order.
    Pairs whose target is itself an input are dropped."""
    combos = []
    for code in codes:
        mask = parse_mask(code, schema)
        for t in targets:
            tm = schema_lookup(schema, t)
            if mask.bits[tm.index]:
                continue
            combos.append((mask, tm))
    combos.sort(key=lambda p: (p[0].count, tuple(not b for b in p[0].bits), p[1].index))
    return combos


@torch.no_grad()
def generate(model, samples, task, ablation=None, batch_size=16, mode="infer"):
    """Final images for every target of ``task`` as numpy arrays (n, H, W)."""
    model.eval()
    outs = {t.name: [] for t in task.ordered_targets()}
    names = [m.name for m in task.inputs]
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images = {n: torch.as_tensor(np.stack([s.slices[n] for s in chunk]), dtype=torch.float32)
                  for n in names}
        gt = None
        if mode == "train":
            gt = {t.name: torch.as_tensor(np.stack([s.slices[t.name] for s in chunk]), dtype=torch.float32)
                  for t in task.targets}
        res = model(images, task, ablation, gt=gt, mode=mode)
        for name, o in res.items():
            outs[name].append(o.final[:, 0].double().numpy())
    return {k: np.concatenate(v) for k, v in outs.items()}


def run_matrix(model, samples, masks: Sequence[str], targets: Sequence[str],
               ablation: Optional[AblationConfig] = None, batch_size=16) -> List[MetricRecord]:
    schema = samples[0].schema
    names = {m.name for m in schema}
    for code in masks:
        if len(code) != len(schema):
            raise SchemaError(f"mask {code!r} does not fit the {len(schema)}-modality dataset schema")
    for t in targets:
        if t not in names:
            raise SchemaError(f"target {t!r} is not a modality of this dataset")
    records = []
    for mask, tgt in order_combinations(masks, targets, schema):
        task = make_task(mask, {tgt}, schema)
        usable = [s for s in samples if s.has(list(task.inputs) + [tgt])]
        if not usable:
            continue
        out = generate(model, usable, task, ablation, batch_size)[tgt.name]
        for s, pred in zip(usable, out):
            gt = s.slices[tgt.name]
            records.append(MetricRecord(s.case_id, mask.render(), tgt.name, psnr(pred, gt), ssim(pred, gt)))
    return records


def summarize(records: Sequence[MetricRecord]):
    groups = OrderedDict()
    for r in records:
        groups.setdefault((r.mask, r.target), []).append(r)
    rows = []
    for (mask, target), rs in groups.items():
        rows.append({"mask": mask, "target": target, "n": len(rs),
                     "psnr": float(np.mean([r.psnr for r in rs])),
                     "ssim": float(np.mean([r.ssim for r in rs]))})
    return rows


def compare(records_a, records_b, label_a="A", label_b="B"):
    """Per (mask, target) Wilcoxon p-values on case-paired PSNR and SSIM."""
    def index(recs):
        d = {}
        for r in recs:
            d.setdefault((r.mask, r.target), {})[r.case_id] = r
        return d
    ia, ib = index(records_a), index(records_b)
    out = []
    for key in ia:
        if key not in ib:
            continue
        cases = sorted(set(ia[key]) & set(ib[key]))
        row = {"mask": key[0], "target": key[1], "n": len(cases), "a": label_a, "b": label_b}
        for metric in ("psnr", "ssim"):
            va = [getattr(ia[key][c], metric) for c in cases]
            vb = [getattr(ib[key][c], metric) for c in cases]
            row[f"{metric}_a"] = float(np.mean(va)) if va else float("nan")
            row[f"{metric}_b"] = float(np.mean(vb)) if vb else float("nan")
            row[f"{metric}_p"] = wilcoxon_signed_rank(va, vb) if len(cases) >= 5 else None
        out.append(row)
    return out


def records_to_csv(records, path=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([r.case_id, r.mask, r.target, f"{r.psnr:.6f}", f"{r.ssim:.6f}"])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def records_from_csv(path) -> List[MetricRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricRecord(r["case_id"], r["mask"], r["target"], float(r["psnr"]), float(r["ssim"]))
            for r in rows]


def format_table(summary_rows, schema_names, comparison=None):
    """Aligned text table: availability check marks, target, PSNR/SSIM."""
    pvals = {}
    for c in comparison or []:
        pvals[(c["mask"], c["target"])] = c
    head = list(schema_names) + ["target", "n", "PSNR", "SSIM"]
    if comparison:
        head += ["PSNR(other)", "p(PSNR)"]
    lines = []
    for row in summary_rows:
        cells = ["x" if b == "1" else "" for b in row["mask"]]
        cells += [row["target"], str(row["n"]), f"{row['psnr']:.2f}", f"{row['ssim']:.3f}"]
        if comparison:
            c = pvals.get((row["mask"], row["target"]))
            if c is None:
                cells += ["-", "-"]
            else:
                p = c["psnr_p"]
                star = "*" if p is not None and p < 0.05 else ""
                cells += [f"{c['psnr_b']:.2f}{star}", "-" if p is None else f"{p:.4f}"]
        lines.append(cells)
    widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(head)]
    fmt = lambda cells: "  ".join(c.center(w) for c, w in zip(cells, widths))
    out = [fmt(head), "  ".join("-" * w for w in widths)]
    out += [fmt(l) for l in lines]
    return "\n".join(out)


def write_report(records, out_dir, schema_names, comparison=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_to_csv(records, out_dir / "metrics.csv")
    summary = summarize(records)
    doc = {"modalities": list(schema_names), "summary": summary, "comparison": comparison or []}
    (out_dir / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    table = format_table(summary, schema_names, comparison)
    (out_dir / "table.txt").write_text(table + "\n")
    return table
