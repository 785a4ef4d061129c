import json

import numpy as np
import pytest
import torch

from medk2n.config import build_config
from medk2n.dataset import PhantomSpec, generate_phantom
from medk2n.evaluation import (MetricRecord, compare, format_table, order_combinations,
                               records_from_csv, records_to_csv, run_matrix, summarize,
                               write_report)
from medk2n.model import MedK2N
from medk2n.types import SchemaError, default_schema


@pytest.fixture(scope="module")
def tiny():
    cfg = build_config("desk", {"model": {"image_size": 16, "dim": 8, "mem_slots": 4,
                                          "cmim_dim": 8}}).validate()
    data = generate_phantom(PhantomSpec(seed=3, n_cases=6, image_size=16))
    torch.manual_seed(0)
    model = MedK2N(data[0].schema, cfg.model).eval()
    return model, data


def test_single_source_rows_for_one_target(schema):
    combos = order_combinations(["1000", "0100", "0010"], ["T2f"], schema)
    assert [(m.render(), t.name) for m, t in combos] == [("1000", "T2f"), ("0100", "T2f"), ("0010", "T2f")]


def test_order_by_input_count_then_schema(schema):
    combos = order_combinations(["1110", "0010", "1100", "1000"], ["T2f", "T2w"], schema)
    rendered = [(m.render(), t.name) for m, t in combos]
    assert rendered == [("1000", "T2w"), ("1000", "T2f"), ("0010", "T2f"),
                        ("1100", "T2w"), ("1100", "T2f"), ("1110", "T2f")]


def test_target_among_inputs_is_dropped(schema):
    assert order_combinations(["0001"], ["T2f"], schema) == []


def test_matrix_records_and_recomposition(tiny, tmp_path):
    model, data = tiny
    recs = run_matrix(model, data, ["1000", "0110"], ["T2f", "T1n"])
    assert len(recs) == 3 * len(data)  # 1000 -> T1n is dropped
    for r in recs:
        assert np.isfinite(r.psnr) and -1.0 <= r.ssim <= 1.0
    write_report(recs, tmp_path, [m.name for m in default_schema()])
    back = records_from_csv(tmp_path / "metrics.csv")
    doc = json.loads((tmp_path / "summary.json").read_text())
    assert doc["modalities"] == ["T1n", "T1c", "T2w", "T2f"]
    again = summarize(back)
    for row, ref in zip(again, doc["summary"]):
        assert (row["mask"], row["target"], row["n"]) == (ref["mask"], ref["target"], ref["n"])
        assert row["psnr"] == pytest.approx(ref["psnr"], abs=1e-5)
        assert row["ssim"] == pytest.approx(ref["ssim"], abs=1e-5)
    table = (tmp_path / "table.txt").read_text().splitlines()
    assert len(table) == 2 + 3


def test_csv_is_deterministic(tiny):
    model, data = tiny
    a = records_to_csv(run_matrix(model, data, ["1100"], ["T2f"]))
    b = records_to_csv(run_matrix(model, data, ["1100"], ["T2f"]))
    assert a == b
    assert a.splitlines()[0] == "case_id,mask,target,psnr,ssim"


def test_schema_errors(tiny):
    model, data = tiny
    with pytest.raises(SchemaError):
        run_matrix(model, data, ["100"], ["T2f"])
    with pytest.raises(SchemaError):
        run_matrix(model, data, ["1000"], ["PD"])


def _recs(values, mask="1000", target="T2f"):
    return [MetricRecord(f"c{i}", mask, target, v, v / 40.0) for i, v in enumerate(values)]


def test_compare_paired_wilcoxon():
    a = _recs([20.0, 21.0, 22.0, 23.0, 24.0, 25.0])
    same = compare(a, a)
    assert same[0]["psnr_p"] == 1.0
    b = _recs([v + 1.0 + 0.1 * i for i, v in enumerate([20.0, 21.0, 22.0, 23.0, 24.0, 25.0])])
    row = compare(a, b, "x", "y")[0]
    assert row["n"] == 6 and row["a"] == "x" and row["b"] == "y"
    assert row["psnr_p"] < 0.05
    table = format_table(summarize(a), ["T1n", "T1c", "T2w", "T2f"], compare(a, b))
    assert "p(PSNR)" in table.splitlines()[0]
    assert "*" in table.splitlines()[2]


def test_compare_too_few_cases_has_no_p():
    row = compare(_recs([1.0, 2.0, 3.0]), _recs([2.0, 3.0, 4.0]))[0]
    assert row["psnr_p"] is None
