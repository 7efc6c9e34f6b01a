import numpy as np
import pytest

from freewayes.cli import WORKERS_ENV, UsageError, main, resolve_workers
from freewayes.config import Config, dump_config
from freewayes.control_loop import network_for
from freewayes.es import ESTrainer, load_checkpoint, save_checkpoint


@pytest.fixture()
def short(tmp_path):
    cfg = Config().replace(control={"episode_length": 300.0}, es={"workers": 2, "checkpoint_every": 1})
    path = tmp_path / "short.yaml"
    dump_config(cfg, path)
    return cfg, path


def test_validate_config(tmp_path, capsys):
    good = tmp_path / "ok.yaml"
    good.write_text("es:\n  workers: 20\n")
    assert main(["validate-config", "--config", str(good)]) == 0
    assert "config_hash=" in capsys.readouterr().out
    bad = tmp_path / "bad.yaml"
    bad.write_text("control:\n  lcc_cycle: 31.3\n")
    assert main(["validate-config", "--config", str(bad)]) == 1
    bad.write_text("geometry:\n  lanez: 4\n")
    assert main(["validate-config", "--config", str(bad)]) == 1
    assert "geometry.lanez" in capsys.readouterr().err


def test_usage_errors_exit_one(tmp_path):
    assert main([]) == 1
    assert main(["evaluate"]) == 1
    assert main(["baseline", "--demands", "x"]) == 1
    assert main(["rollout", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 1


def test_runtime_failure_exits_two(tmp_path, short):
    _, cfg_path = short
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["baseline", "--config", str(cfg_path), "--demands", "1", "--out", str(blocker / "x")]) == 2


def test_worker_precedence(monkeypatch):
    cfg = Config()
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert resolve_workers(None, cfg) == cfg.es.jobs
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert resolve_workers(None, cfg) == 3
    assert resolve_workers(2, cfg) == 2
    monkeypatch.setenv(WORKERS_ENV, "many")
    with pytest.raises(UsageError):
        resolve_workers(None, cfg)
    with pytest.raises(UsageError):
        resolve_workers(0, cfg)


def test_train_resume_matches_straight(tmp_path, short):
    cfg, cfg_path = short
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg_path), "--generations", "3", "--out", str(a)]) == 0
    assert main(["train", "--config", str(cfg_path), "--generations", "1", "--out", str(b)]) == 0
    assert main(["train", "--config", str(cfg_path), "--generations", "3", "--out", str(b),
                 "--checkpoint", str(b / "checkpoint.ckpt")]) == 0
    ca, cb = load_checkpoint(a / "checkpoint.ckpt"), load_checkpoint(b / "checkpoint.ckpt")
    assert ca.generation == cb.generation == 3 and np.array_equal(ca.genome, cb.genome)
    log_a = (a / "generations.csv").read_text().splitlines()
    log_b = (b / "generations.csv").read_text().splitlines()
    assert log_a[1] == "generation,demand_seed,w,F_unperturbed,max_F,mean_F,mean_N,wall_ms"
    strip = lambda lines: [line.rsplit(",", 1)[0] for line in lines[2:]]  # noqa: E731
    assert strip(log_a) == strip(log_b)
    resolved = cfg.replace(es={"generations": 3})
    assert (a / "config.yaml").read_text().startswith(f"# config_hash={resolved.hash()}")


def test_evaluate_and_baseline_outputs(tmp_path, short, capsys):
    cfg, cfg_path = short
    ck = tmp_path / "p.ckpt"
    save_checkpoint(ck, ESTrainer(cfg, network_for(cfg).init_genome(0)))
    out = tmp_path / "ev"
    assert main(["evaluate", "--config", str(cfg_path), "--checkpoint", str(ck), "--demands", "2",
                 "--seed", "4", "--out", str(out), "--workers", "1"]) == 0
    text = capsys.readouterr().out
    assert "mean_IL" in text and "pooled_TDS" in text
    rows = (out / "rows.csv").read_text().splitlines()
    assert rows[0] == f"# config_hash={cfg.hash()}" and rows[1].startswith("demand_seed,D,F,F_N")
    assert len(rows) == 4
    out2 = tmp_path / "base"
    assert main(["baseline", "--config", str(cfg_path), "--demands", "2", "--seed", "4", "--out", str(out2)]) == 0
    base_rows = (out2 / "rows.csv").read_text().splitlines()
    assert base_rows[1] == "demand_seed,D,F_N,TDS_N"
    # paired baseline numbers agree with the stand-alone baseline
    assert [r.split(",")[3] for r in rows[2:]] == [r.split(",")[2] for r in base_rows[2:]]


def test_rollout_zero_genome(tmp_path, short):
    cfg, cfg_path = short
    net = network_for(cfg)
    tr = ESTrainer(cfg, np.zeros(net.genome_size))
    ck = tmp_path / "zero.ckpt"
    save_checkpoint(ck, tr)
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["rollout", "--config", str(cfg_path), "--checkpoint", str(ck), "--seed", "2",
                     "--out", str(out)]) == 0
        outs.append(out)
    for f in ("trace.csv", "outflow.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    lines = (outs[0] / "trace.csv").read_text().splitlines()
    assert lines[1] == "time_s,agent,lane,action,setting"
    cycles = {"rm": 3.0, "dvsl": 60.0, "lcc": 30.0}
    for line in lines[2:]:
        t, agent, lane, action, setting = line.split(",")
        assert float(t) % cycles[agent] == 0
        if agent == "dvsl":
            assert action == "7" and setting == "45"
