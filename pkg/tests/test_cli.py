import json
import math

import numpy as np
import pytest

from modnri import cli, metrics
from modnri.checkpoint import CheckpointMismatch, dumps_checkpoint, load_checkpoint, save_checkpoint
from modnri.config import ConfigError, config_from_dict, load_config
from modnri.fileio import ParseError, VersionError
from modnri.gnn import ModuleLibrary
from modnri.proposal import ProposalParams

SMALL = {
    "kind": "springs", "seed": 3, "n_particles": 5, "T": 18, "train_horizon": 16, "test_horizon": 2,
    "n_train_tasks": 4, "n_test_tasks": 40,
    "model": {"hidden": 8, "msg_dim": 4, "encoder_hidden": 8},
    "train": {"epochs": 0, "batch_size": 4},
    "test": {"budget": 60, "restart_every": 30},
    "latent": {"n_tasks": 2, "samples": 8, "top_k": 2, "gd_steps": 2, "rounds": 2},
}


def _write(tmp_path, doc, name="c.json"):
    doc = {**doc, "out_dir": str(tmp_path / "out")}
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _run(*argv):
    return cli.main(list(argv))


# ---------------------------------------------------------------------------
# config


def test_config_defaults_and_echo():
    cfg = config_from_dict({})
    echo = cfg.echo()
    assert echo["train"]["epochs"] == 300 and echo["test"]["budget"] == 2000
    assert config_from_dict(echo).echo() == echo


@pytest.mark.parametrize("doc, key", [
    ({"epochz": 3}, "epochz"),
    ({"train": {"sa_step": 3}}, "train.sa_step"),
    ({"train": {"epochs": -1}}, "train.epochs"),
    ({"kind": "kuramoto"}, "kind"),
])
def test_config_errors_name_the_key(doc, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        config_from_dict(doc)


def test_config_horizons_checked():
    with pytest.raises(ConfigError):
        config_from_dict({"T": 20, "train_horizon": 15, "test_horizon": 10})


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text('{"seed": ')
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)
    p.write_text("[1]")
    with pytest.raises(ConfigError):
        load_config(p)


def test_overrides():
    cfg = config_from_dict({"seed": 1}, seed=5, **{"test.budget": 7, "out_dir": None})
    assert cfg.seed == 5 and cfg.test.budget == 7 and cfg.out_dir == "out"


# ---------------------------------------------------------------------------
# checkpoints


def _ckpt_parts(seed=0):
    rng = np.random.default_rng(seed)
    lib = ModuleLibrary.create(rng, hidden=6, msg_dim=3, in_scale=rng.uniform(0.5, 2, 4),
                               out_scale=rng.uniform(0.01, 0.1, 4))
    prop = ProposalParams.create(rng, horizon=5, n_edge=2, hidden=6)
    prop.values[0] = -0.0
    prop.values[1] = 1e-310
    return lib, prop


def test_checkpoint_roundtrip_bitwise(tmp_path):
    lib, prop = _ckpt_parts()
    p = tmp_path / "ck.json"
    save_checkpoint(p, "springs", lib, prop, {"seed": 1})
    ck = load_checkpoint(p, expect_kind="springs")
    assert ck.library.checksum() == lib.checksum()
    for a, b in zip(lib.edge_params + lib.node_params + [lib.in_scale, lib.out_scale],
                    ck.library.edge_params + ck.library.node_params + [ck.library.in_scale, ck.library.out_scale]):
        assert a.tobytes() == b.tobytes()
    assert ck.proposal.values.tobytes() == prop.values.tobytes()
    assert ck.config == {"seed": 1}
    # re-serialising the loaded checkpoint gives the same bytes
    assert dumps_checkpoint(ck) == p.read_text()


def test_checkpoint_without_proposal(tmp_path):
    lib, _ = _ckpt_parts(1)
    save_checkpoint(tmp_path / "ck.json", "charged", lib, None, {})
    assert load_checkpoint(tmp_path / "ck.json").proposal is None


def test_checkpoint_refuses_wrong_kind(tmp_path):
    lib, prop = _ckpt_parts()
    save_checkpoint(tmp_path / "ck.json", "springs", lib, prop, {})
    with pytest.raises(CheckpointMismatch, match="springs"):
        load_checkpoint(tmp_path / "ck.json", expect_kind="charged")


def test_checkpoint_truncated_and_version(tmp_path):
    lib, prop = _ckpt_parts()
    p = tmp_path / "ck.json"
    save_checkpoint(p, "springs", lib, prop, {})
    text = p.read_text()
    p.write_text(text[: len(text) * 2 // 3])
    with pytest.raises(ParseError):
        load_checkpoint(p)
    p.write_text(text.replace('"format_version":1', '"format_version":9'))
    with pytest.raises(VersionError):
        load_checkpoint(p)
    # a damaged parameter vector is refused as a whole
    doc = json.loads(text)
    doc["proposal"]["values"] = doc["proposal"]["values"][:-1]
    p.write_text(json.dumps(doc))
    with pytest.raises(ParseError):
        load_checkpoint(p)


# ---------------------------------------------------------------------------
# command line


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    c = _write(tmp, SMALL)
    for cmd in ("generate", "meta-train", "meta-test"):
        assert _run(cmd, "--config", c) == 0
    return tmp, c


def test_generate_is_deterministic(tmp_path):
    c = _write(tmp_path, {**SMALL, "n_test_tasks": 2})
    assert _run("generate", "--config", c) == 0
    out = tmp_path / "out"
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert _run("generate", "--config", c) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first
    assert _run("generate", "--config", c, "--seed", "4") == 0
    assert (out / cli.TRAIN_TASKS).read_bytes() != first[cli.TRAIN_TASKS]


def test_untrained_meta_test_is_near_chance(run_dir):
    tmp, _ = run_dir
    summary = json.loads((tmp / "out" / cli.METRICS_JSON).read_text())
    acc = summary["aggregate"]["edge_accuracy"]
    assert summary["aggregate"]["n_tasks"] == 40
    # best-bijection chance over 20 ordered pairs is 0.588 (see test_metrics)
    assert 0.4 <= acc <= 0.6
    assert math.isfinite(summary["aggregate"]["mse_1"])


def test_meta_test_rerun_is_identical(run_dir):
    tmp, c = run_dir
    out = tmp / "out"
    before = (out / cli.METRICS_CSV).read_bytes(), (out / cli.METRICS_JSON).read_bytes()
    assert _run("meta-test", "--config", c) == 0
    assert ((out / cli.METRICS_CSV).read_bytes(), (out / cli.METRICS_JSON).read_bytes()) == before


def test_report_matches_recomputation(run_dir, capsys):
    tmp, c = run_dir
    assert _run("report", "--config", c) == 0
    out = tmp / "out"
    report = metrics.read_rows(out / cli.REPORT_CSV)
    rows = metrics.read_rows(out / cli.METRICS_CSV)
    for r in report:
        assert r["source"] == cli.METRICS_CSV
        if r["metric"] == "n_tasks":
            assert float(r["value"]) == len(rows)
            continue
        expect = np.mean([float(x[r["metric"]]) for x in rows])
        assert abs(float(r["value"]) - expect) <= 1e-12 * max(abs(expect), 1e-300)


def test_infer_latent_writes_reports(run_dir):
    tmp, c = run_dir
    assert _run("infer-latent", "--config", c) == 0
    out = tmp / "out"
    rows = metrics.read_rows(out / cli.LATENT_CSV)
    assert len(rows) == 2
    doc = json.loads((out / "latent" / f"task_{int(rows[0]['task']):04d}.json").read_text())
    assert {"best_init_state", "loss", "round_best_losses", "trajectory"} <= set(doc)


def test_exit_code_config_error(tmp_path, capsys):
    c = _write(tmp_path, {**SMALL, "train": {"epochz": 1}})
    assert _run("generate", "--config", c) == cli.EXIT_CONFIG
    assert "train.epochz" in capsys.readouterr().err
    assert _run("generate", "--config", str(tmp_path / "nope.json")) == cli.EXIT_CONFIG


def test_exit_code_missing_input(tmp_path, capsys):
    c = _write(tmp_path, SMALL)
    assert _run("meta-test", "--config", c) == cli.EXIT_RUNTIME
    assert cli.CHECKPOINT in capsys.readouterr().err
    assert _run("report", "--config", c) == cli.EXIT_RUNTIME


def test_exit_code_kind_mismatch(run_dir, tmp_path, capsys):
    tmp, _ = run_dir
    c = _write(tmp_path, {**SMALL, "kind": "charged"})
    doc = json.loads(open(c).read())
    doc["out_dir"] = str(tmp / "out")
    open(c, "w").write(json.dumps(doc))
    assert _run("meta-test", "--config", c) == cli.EXIT_CONFIG
    assert "springs" in capsys.readouterr().err


def test_exit_code_corrupt_task_file(run_dir, tmp_path, capsys):
    tmp, _ = run_dir
    c = _write(tmp_path, {**SMALL, "n_test_tasks": 1})
    assert _run("generate", "--config", c) == 0
    p = tmp_path / "out" / cli.TRAIN_TASKS
    p.write_text(p.read_text()[:100])
    assert _run("meta-train", "--config", c) == cli.EXIT_RUNTIME
    assert cli.TRAIN_TASKS in capsys.readouterr().err
