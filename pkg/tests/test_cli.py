import json
import subprocess
import sys

import numpy as np
import pytest

from lrmpc.cli import EXIT_INSECURE, EXIT_OK, EXIT_TRANSPORT, EXIT_VALIDATION, bench_rows, main, rows_to_csv, speedup
from lrmpc.engine import build_plan, load_bundle, schedule
from lrmpc.model import fc_chain, gcn_demo, load_model, save_model
from lrmpc.ring import DEFAULT_CFG, encode_fixed
from lrmpc.sharing import reconstruct


def lrmpc(*args):
    return subprocess.Popen([sys.executable, "-m", "lrmpc.cli", *map(str, args)], stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)


def test_decompose_writes_model_and_report(tmp_path):
    save_model(fc_chain(2, [12, 8, 12], seed=1), tmp_path / "m.lrmt")
    assert main([str(a) for a in ["decompose", "--in", tmp_path / "m.lrmt", "--out", tmp_path / "lr.lrmt", "--layers", "0"]]) == EXIT_OK
    lr = load_model(tmp_path / "lr.lrmt")
    assert [l.kind for l in lr.layers] == ["lowrank_fc", "fc"]
    rep = json.loads((tmp_path / "lr.lrmt.json").read_text())
    assert rep["layers"][0]["rank"] == 2
    assert rep["layers"][0]["frobenius_error"] >= 0


def test_share_is_deterministic_and_reconstructs(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, (2, 12))
    np.save(tmp_path / "x.npy", x)
    save_model(fc_chain(2, [12, 8], seed=1), tmp_path / "m.lrmt")
    for d in ("a", "b"):
        assert main([str(a) for a in ["share", "--model", tmp_path / "m.lrmt", "--input", tmp_path / "x.npy", "--n", 4, "--seed", 5, "--out", tmp_path / d]]) == EXIT_OK
    for i in range(1, 5):
        assert (tmp_path / "a" / f"party{i}.lrmt").read_bytes() == (tmp_path / "b" / f"party{i}.lrmt").read_bytes()
    bundles = [load_bundle(tmp_path / "a" / f"party{i}.lrmt")[0] for i in range(1, 5)]
    assert np.array_equal(reconstruct([b.x for b in bundles]), encode_fixed(x, DEFAULT_CFG))
    assert len(json.loads((tmp_path / "a" / "endpoints.json").read_text())) == 4


def test_share_two_parties_minimal(tmp_path):
    np.save(tmp_path / "x.npy", np.ones((1, 4)))
    save_model(fc_chain(1, [4, 4], seed=1), tmp_path / "m.lrmt")
    assert main([str(a) for a in ["share", "--model", tmp_path / "m.lrmt", "--input", tmp_path / "x.npy", "--n", 2, "--seed", 1, "--out", tmp_path / "s"]]) == EXIT_OK
    assert sorted(p.name for p in (tmp_path / "s").iterdir()) == ["endpoints.json", "party1.lrmt", "party2.lrmt"]


def test_share_trio_role_tags(tmp_path):
    assert main([str(a) for a in ["share", "--builtin", "gcn", "--protocol", "trio", "--seed", 1, "--out", tmp_path, "--allow-insecure"]]) == EXIT_OK
    for i in (1, 2, 3):
        b, meta = load_bundle(tmp_path / f"party{i}.lrmt")
        assert (b.party, b.scheme, b.x.owner, meta["protocol"]) == (i, "trio", i, "trio")
    p1 = load_bundle(tmp_path / "party1.lrmt")[0]
    assert p1.material == {}
    assert load_bundle(tmp_path / "party2.lrmt")[0].material


@pytest.mark.parametrize("protocol", ["npc", "trio"])
def test_gcn_over_sockets_in_separate_processes(tmp_path, protocol):
    assert main([str(a) for a in ["share", "--builtin", "gcn", "--protocol", protocol, "--mode", "LR+TS+Concat", "--seed", 3, "--out", tmp_path, "--allow-insecure", "--fresh-endpoints"]]) == EXIT_OK
    procs = [
        lrmpc("run-party", "--share", tmp_path / f"party{i}.lrmt", "--endpoints", tmp_path / "endpoints.json", "--out", tmp_path / f"y{i}.lrmt", "--metrics", tmp_path / f"m{i}.json", "--allow-insecure", "--timeout", 30)
        for i in (1, 2, 3)
    ]
    for p in procs:
        _, err = p.communicate(timeout=60)
        assert p.returncode == EXIT_OK, err
    outs = [tmp_path / f"y{i}.lrmt" for i in (1, 2, 3)]
    mets = [tmp_path / f"m{i}.json" for i in (1, 2, 3)]
    assert main([str(a) for a in ["report", "--outputs", *outs, "--metrics", *mets, "--out", tmp_path / "r.json"]]) == EXIT_OK
    rep = json.loads((tmp_path / "r.json").read_text())

    from lrmpc.engine import run

    model, x = gcn_demo()
    plan = build_plan(model, protocol, "LR+TS+Concat")
    ref = run(plan, x, seed=3, allow_insecure=True)
    assert np.array_equal(np.array(rep["output"]), ref.output)
    assert rep["rounds"] == schedule(plan).rounds()
    assert rep["bytes"] == {k: v for k, v in sorted(ref.metrics.bytes.items()) if v}


def test_simulate_outputs_timeline(tmp_path, capsys):
    assert main([str(a) for a in ["simulate", "--builtin", "fc4", "--network", "wan", "--no-gantt"]]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["rounds"] == 12 and out["critical_path_ms"] > 12 * 17.5
    prof = tmp_path / "p.json"
    prof.write_text(json.dumps({"name": "slow", "latency_ms": 100, "bandwidth_gbps": 1}))
    assert main([str(a) for a in ["simulate", "--builtin", "fc4", "--network", prof, "--no-gantt", "--out", tmp_path / "t.json"]]) == EXIT_OK
    assert json.loads((tmp_path / "t.json").read_text())["critical_path_ms"] > 12 * 100


def test_bench_rows_and_speedup(tmp_path):
    model = fc_chain(16, [64, 32, 64], shape_only=True)
    rows = bench_rows(model)
    assert len(rows) == 24
    for r in rows:
        base = next(b for b in rows if (b["protocol"], b["network"], b["mode"]) == (r["protocol"], r["network"], "FullRank"))
        assert r["speedup"] == pytest.approx(base["critical_path_ms"] / r["critical_path_ms"] - 1)
    assert speedup(2.0, 1.0) == 1.0
    csv_text = rows_to_csv(rows)
    assert csv_text.count("\n") == 25 and csv_text.startswith("protocol,n,mode,network")


def test_bench_cli_offline_only(tmp_path):
    assert main([str(a) for a in ["bench", "--builtin", "fc4", "--offline-only", "--out", tmp_path / "b.json", "--csv", tmp_path / "b.csv"]]) == EXIT_OK
    rows = json.loads((tmp_path / "b.json").read_text())["rows"]
    assert len(rows) == 24 and "critical_path_ms" not in rows[0]
    assert main([str(a) for a in ["report", "--bench", tmp_path / "b.json", "--csv", tmp_path / "c.csv"]]) == EXIT_OK
    assert (tmp_path / "c.csv").read_text() == (tmp_path / "b.csv").read_text()


def test_exit_codes(tmp_path):
    # validation: bad policy layer index
    (tmp_path / "pol.json").write_text(json.dumps({"layers": [9]}))
    assert main([str(a) for a in ["simulate", "--builtin", "fc4", "--policy", tmp_path / "pol.json"]]) == EXIT_VALIDATION
    assert main([str(a) for a in ["share", "--builtin", "fc4", "--out", tmp_path / "s"]]) == EXIT_VALIDATION
    # insecure: relu plan without the flag
    assert main([str(a) for a in ["share", "--builtin", "gcn", "--out", tmp_path / "g"]]) == EXIT_INSECURE
    # transport: the other parties never show up
    assert main([str(a) for a in ["share", "--builtin", "gcn", "--seed", 1, "--out", tmp_path / "g", "--allow-insecure", "--fresh-endpoints"]]) == EXIT_OK
    code = main([str(a) for a in ["run-party", "--share", tmp_path / "g" / "party1.lrmt", "--endpoints", tmp_path / "g" / "endpoints.json", "--out", tmp_path / "y.lrmt", "--timeout", 1, "--allow-insecure"]])
    assert code == EXIT_TRANSPORT
