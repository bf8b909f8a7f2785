import json
import socket
from argparse import Namespace
from pathlib import Path

import pytest

from kar.cli import CliError, main, resolve_manifest
from kar.expansion import STRATEGIES

from conftest import GOLDEN, MICRO

MANIFEST = str(MICRO / "manifest.json")
DATA_FLAGS = ["--docs", str(MICRO / "docs.jsonl"), "--edges", str(MICRO / "edges.jsonl"),
              "--structure", str(MICRO / "structure.json")]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_expand_base_prints_query_unchanged(capsys):
    code, out, _ = run(capsys, "expand", *DATA_FLAGS, "--strategy", "base", "find X")
    assert code == 0 and out == "find X\n"


def test_expand_writes_trace(capsys, tmp_path):
    code, out, err = run(capsys, "expand", "--manifest", MANIFEST, "--strategy", "kar", "--out", str(tmp_path),
                         "Find a paper by Alice Smith about spectral sparsifiers")
    assert code == 0 and out.startswith("Find a paper by Alice Smith")
    trace = json.loads((tmp_path / "trace_kar.json").read_text())
    assert err.strip() == f"trace: {tmp_path / 'trace_kar.json'}"
    assert trace["expanded"]["combined"] == out.rstrip("\n")


def test_eval_matches_golden_reports(capsys, tmp_path):
    code, _, _ = run(capsys, "eval", "--manifest", MANIFEST, "--out", str(tmp_path))
    assert code == 0
    goldens = sorted((GOLDEN / "eval").glob("report_*_dense.json"))
    assert len(goldens) == len(STRATEGIES)
    for g in goldens:
        assert (tmp_path / g.name).read_bytes() == g.read_bytes(), g.name


def test_eval_is_idempotent(capsys, tmp_path):
    for sub in ("a", "b"):
        assert run(capsys, "eval", "--manifest", MANIFEST, "--strategy", "kar", "--out", str(tmp_path / sub))[0] == 0
    assert (tmp_path / "a" / "report_kar_dense.json").read_bytes() == \
        (tmp_path / "b" / "report_kar_dense.json").read_bytes()


def test_compare_table_is_eight_by_four(capsys, tmp_path):
    code, out, _ = run(capsys, "compare", "--manifest", MANIFEST, "--out", str(tmp_path))
    assert code == 0
    rows = out.strip().splitlines()[2:]
    assert [r.split()[0] for r in rows] == list(STRATEGIES)
    assert all(len(r.split()) == 5 for r in rows)


def test_sweep_table(capsys, tmp_path):
    code, out, _ = run(capsys, "sweep", "--manifest", MANIFEST, "--strategy", "kar", "--param", "k",
                       "--values", "3,5,10", "--out", str(tmp_path))
    assert code == 0
    assert [line.split()[0] for line in out.strip().splitlines()[3:]] == ["3", "5", "10"]
    assert (tmp_path / "sweep_k.txt").exists()


def test_ingest_and_index(capsys, tmp_path):
    code, out, _ = run(capsys, "ingest", *DATA_FLAGS)
    assert code == 0 and json.loads(out)["entities"] == 40
    code, out, _ = run(capsys, "index", "--manifest", MANIFEST, "--out", str(tmp_path))
    assert code == 0 and json.loads(out)["dim"] == 256
    cache = tmp_path / "embeddings.jsonl"
    code, _, _ = run(capsys, "eval", "--manifest", MANIFEST, "--strategy", "kar", "--cache", str(cache),
                     "--out", str(tmp_path / "r"))
    assert code == 0
    assert (tmp_path / "r" / "report_kar_dense.json").read_bytes() == \
        (GOLDEN / "eval" / "report_kar_dense.json").read_bytes()


# -- failures -----------------------------------------------------------------------

def _one_line_error(code, err):
    assert code != 0
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("kar: error:")
    return lines[0]


def test_unknown_strategy_in_manifest(capsys, tmp_path):
    m = tmp_path / "m.json"
    m.write_text(json.dumps({**json.loads(Path(MANIFEST).read_text()), "strategies": ["magic"]}))
    code, _, err = run(capsys, "eval", "--manifest", str(m))
    assert "unknown strategy" in _one_line_error(code, err)


def test_unknown_strategy_flag_rejected(capsys):
    with pytest.raises(SystemExit) as info:
        main(["expand", *DATA_FLAGS, "--strategy", "magic", "q"])
    assert info.value.code != 0


def test_missing_index(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--manifest", MANIFEST, "--cache", str(tmp_path / "none.jsonl"))
    assert "missing index" in _one_line_error(code, err)


def test_missing_data_paths(capsys):
    code, _, err = run(capsys, "ingest")
    assert "--docs" in _one_line_error(code, err)


def test_backend_unreachable(capsys, monkeypatch):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    monkeypatch.setenv("KAR_LLM_URL", f"http://127.0.0.1:{port}/v1")
    code, _, err = run(capsys, "expand", *DATA_FLAGS, "--strategy", "hyde", "--backend-llm", "openai", "q")
    assert "attempts" in _one_line_error(code, err)


def test_secrets_rejected_in_manifest(capsys, tmp_path):
    m = tmp_path / "m.json"
    m.write_text(json.dumps({"api_key": "sk-123"}))
    code, _, err = run(capsys, "ingest", "--manifest", str(m))
    assert "secrets" in _one_line_error(code, err)


# -- configuration precedence -------------------------------------------------------------

def ns(**kw):
    base = dict(manifest=None, n=None, h=None, k=None, retriever=None, backend_llm=None, backend_embed=None,
                seed=None, workers=None, docs=None, edges=None, structure=None, queries=None, out=None,
                cache=None, strategy=None)
    base.update(kw)
    return Namespace(**base)


def test_defaults():
    m = resolve_manifest(ns(), environ={})
    assert (m.n, m.h, m.k, m.retriever) == (3, 2, 10, "dense")


def test_precedence_flags_over_manifest_over_env(tmp_path):
    mf = tmp_path / "m.json"
    mf.write_text(json.dumps({"k": 7, "n": 4, "docs": "d.jsonl"}))
    env = {"KAR_K": "20", "KAR_H": "3", "KAR_N": "9", "KAR_RETRIEVER": "bm25"}
    m = resolve_manifest(ns(manifest=str(mf), n=1), environ=env)
    assert m.n == 1  # flag
    assert m.k == 7  # manifest over environment
    assert m.h == 3 and m.retriever == "bm25"  # environment over defaults
    assert m.docs == tmp_path / "d.jsonl"  # relative to the manifest


def test_config_file_reference(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"k": 40, "h": 1}))
    mf = tmp_path / "m.json"
    mf.write_text(json.dumps({"config": "cfg.json", "h": 3}))
    m = resolve_manifest(ns(manifest=str(mf)), environ={})
    assert (m.k, m.h) == (40, 3)


def test_bad_integer_from_env():
    with pytest.raises(CliError):
        resolve_manifest(ns(), environ={"KAR_K": "ten"})
