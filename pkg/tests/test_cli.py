import copy
import csv
import hashlib
import json

import pytest

from reacfuse import evalkit
from reacfuse import pipeline as P
from reacfuse.cli import main, verify_manifest
from reacfuse.config import ConfigError, RunConfig, resolve_threads

from helpers import SMOKE_CONFIG, run_smoke


def _sha(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    codes = run_smoke(out, ["--threads", "1"])
    assert codes == [0] * len(codes) and len(codes) == 19
    return out


# -- config -------------------------------------------------------------------------

@pytest.mark.parametrize("text", [
    "[zsl]\nlo = 0.5\nhi = 0.5\n",
    "[zsl]\nstrict_lo = 0.9\nstrict_hi = 0.1\n",
    "[data]\nbogus = 1\n",
    "[nope]\nx = 1\n",
    "[mlm]\nlr = fast\n",
    "[graphormer]\nd_model = 30\nn_heads = 4\n",
])
def test_config_rejections(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[zsl]\nlo = 0.5\nhi = 0.5\n")
    assert main(["train-zsl", "threshold", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert capsys.readouterr().err.startswith("ConfigError:")
    assert main(["gen-data", "--threads", "0", "--out", str(tmp_path)]) == 2


def test_missing_input_exit_code(tmp_path, capsys):
    assert main(["pretrain-mlm", "--out", str(tmp_path)]) == 3
    assert "DataError" in capsys.readouterr().err


def test_seed_precedence(monkeypatch):
    monkeypatch.setenv("REACFUSE_SEED", "17")
    assert RunConfig().apply_overrides()["data"]["seed"] == 17
    assert RunConfig().apply_overrides(seed=3)["data"]["seed"] == 3
    assert resolve_threads(None, {"REACFUSE_THREADS": "2"}) == 2
    assert resolve_threads("1", {"REACFUSE_THREADS": "2"}) == 1


def test_resolved_config_round_trips():
    cfg = RunConfig.from_file(SMOKE_CONFIG)
    again = RunConfig.from_text(cfg.dumps())
    assert again.values == cfg.values
    assert again["labeler"]["lr"] == 3e-3 and again["adapter"]["lr"] == 8e-4


# -- gen-data -----------------------------------------------------------------------

def test_gen_data_is_reproducible(tmp_path, monkeypatch):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    args = ["gen-data", "--config", str(SMOKE_CONFIG)]
    assert main([*args, "--out", str(a)]) == 0
    assert main([*args, "--out", str(b)]) == 0
    assert _sha(a / "data/corpus.jsonl") == _sha(b / "data/corpus.jsonl")
    monkeypatch.setenv("REACFUSE_SEED", "5")
    assert main([*args, "--out", str(c)]) == 0
    assert _sha(a / "data/corpus.jsonl") != _sha(c / "data/corpus.jsonl")
    assert "seed = 5" in (c / "data/gen-data.config.ini").read_text()


# -- full smoke run -------------------------------------------------------------------

def test_eval_csv_columns(smoke):
    with open(smoke / "reports/eval-baseline.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == list(evalkit.REPORT_COLUMNS)
    assert rows[0]["model"] == "baseline" and rows[0]["subset"] == "all"


def test_every_manifest_verifies(smoke):
    manifests = sorted(smoke.glob("*/*.manifest.json"))
    assert len(manifests) == 19
    for m in manifests:
        assert verify_manifest(smoke, m.relative_to(smoke)) == []
        body = json.loads(m.read_text())
        assert (smoke / body["config"]).exists()


def test_manifest_detects_tampering(smoke, tmp_path):
    import shutil
    copy_dir = tmp_path / "run"
    shutil.copytree(smoke, copy_dir)
    with open(copy_dir / "data/corpus.jsonl", "a") as fh:
        fh.write("\n")
    bad = verify_manifest(copy_dir, "models/pretrain-mlm.manifest.json")
    assert bad == ["data/corpus.jsonl"]


def test_extension_outputs(smoke):
    for name in ("binary", "threshold", "continuous"):
        table = (smoke / f"zsl/distribution-{name}.csv").read_text().splitlines()
        assert table[0] == "source,n,positive,negative" and len(table) == 4
    assert json.loads((smoke / "reports/comparison.json").read_text())["best_combined"].startswith("zsl-")


# -- comparison ----------------------------------------------------------------------

def _report(smoke, name):
    return json.loads((smoke / f"reports/eval-{name}.json").read_text())


def test_compare_with_itself_has_zero_deltas(smoke):
    base = _report(smoke, "baseline")
    rows, _, _ = P.compare_report(base, [base])
    assert all(r[f"delta_{k}"] == 0 for r in rows for k in P.DELTA_KEYS if r[k] is not None)


def test_compare_rejects_other_split(smoke):
    other = copy.deepcopy(_report(smoke, "adapter"))
    other["split_hash"] = "0" * 64
    with pytest.raises(P.SplitMismatch):
        P.compare_report(_report(smoke, "baseline"), [other])


def test_delta_recomputed_from_reports(smoke):
    base, var = _report(smoke, "baseline"), _report(smoke, "zsl-continuous")
    rows, _, _ = P.compare_report(base, [var])
    got = next(r for r in rows if r["model"] == "zsl-continuous" and r["subset"] == "all")
    b = next(m for m in base["metrics"] if m["subset"] == "all")
    v = next(m for m in var["metrics"] if m["subset"] == "all")
    for k in P.DELTA_KEYS:
        assert got[f"delta_{k}"] == v[k] - b[k]
