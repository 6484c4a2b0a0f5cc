import numpy as np
import pytest

from popdebias.cli import main
from popdebias.evaluation import accuracy_metrics, ground_truth_sets, rank_matrix
from popdebias.dataset import InteractionLog
from popdebias.experiment import (ConfigError, grid_search, load_config, load_models, parse_config, prepare, run,
                                  validation_score)
from popdebias.training import pda_matrix

BASE = """\
# small synthetic fixture
data.stages=4
train.epochs_max=3
train.optimizer=adam
train.lr=0.05
train.l2=1e-5
train.dim=6
eval.k=5,10
synth.num_users=50
synth.num_items=40
synth.T=4
synth.interactions_per_stage=300
"""

MBD_EXTRA = "synth.mbd=true\nsynth.rho_T=0.8\nfair.k=5\nfair.bins=3\n"


def write_cfg(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_parse_config_and_manifest_roundtrip():
    cfg = parse_config(BASE + "mode=PDA\npda.alpha=0.5\nscore.gamma=0.25\n")
    assert cfg.train_learning_rate == 0.05 and cfg.eval_k == (5, 10) and cfg.mode == "PDA"
    assert parse_config(cfg.to_text()) == cfg


def test_parse_config_errors():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("train.nope=1\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("train.epochs_max=ten\n")
    with pytest.raises(ConfigError, match="key=value"):
        parse_config("mode PD\n")


def test_run_pd_artifacts(tmp_path):
    out = run(load_config(write_cfg(tmp_path, BASE + "mode=PD\n")), tmp_path / "pd")
    for name in ("manifest.cfg", "drift.csv", "trace.csv", "ranking.csv", "popularity.tsv", "lists.tsv"):
        assert (out / name).exists()
    assert (out / "checkpoints" / "matching.ckpt").exists()
    assert not (out / "FAILED").exists()
    assert (out / "ranking.csv").read_text().splitlines()[0] == "metric,K,value"
    assert (out / "trace.csv").read_text().splitlines()[0] == "epoch,loss,val_metric"
    assert (out / "drift.csv").read_text().splitlines()[0] == "stage,dp_successive,dp_accumulated"
    rows = [l.split(",")[:2] for l in (out / "ranking.csv").read_text().splitlines()[1:]]
    assert rows == [["hit_ratio", "5"], ["ndcg", "5"], ["recall", "5"],
                    ["hit_ratio", "10"], ["ndcg", "10"], ["recall", "10"]]


def test_pda_alpha_zero_uses_last_stage_popularity(tmp_path):
    cfg = load_config(write_cfg(tmp_path, BASE + "mode=PDA\npda.alpha=0\nscore.gamma=0.5\n"))
    out = run(cfg, tmp_path / "pda")
    prep = prepare(cfg)
    model = load_models(out / "checkpoints")["matching"]
    counts = prep.valid.item_counts()
    m_T = np.where(counts > 0, counts / counts.sum(), 1.0 / (counts.sum() + len(counts)))
    users = np.unique(prep.test.users)
    seen = InteractionLog.concat([prep.train, prep.valid]).user_item_sets()
    excl = [seen[u] for u in users]
    lists = rank_matrix(pda_matrix(model, users, m_T, 0.5), excl, 10)
    truth = ground_truth_sets(prep.test, users, "clicked", excl)
    lines = (out / "ranking.csv").read_text().splitlines()
    recall10 = float([l for l in lines if l.startswith("recall,10,")][0].split(",")[2])
    assert recall10 == pytest.approx(accuracy_metrics(lists, truth, 10)[0], abs=1e-12)
    got = [list(map(int, l.split("\t")[1].split(","))) for l in (out / "lists.tsv").read_text().splitlines()[1:]]
    assert got == lists.tolist()


def test_run_mbd_writes_fairness(tmp_path):
    for mode in ("MBD", "ESMM-eq", "ablation-doI", "ablation-doQ"):
        out = run(load_config(write_cfg(tmp_path, BASE + MBD_EXTRA + f"mode={mode}\n")), tmp_path / mode)
        header = (out / "fairness.csv").read_text().splitlines()[0]
        assert header == "partition,bin,subgroup,exposure,ratio,d_r,d_l"
        assert (out / "groups.tsv").read_text().startswith("item\tbin\tsubgroup\n")
        assert {p.name for p in (out / "checkpoints").iterdir()} == {"ctr.ckpt", "cvr.ckpt"}


def test_run_reproducible_from_manifest(tmp_path):
    first = run(load_config(write_cfg(tmp_path, BASE + MBD_EXTRA + "mode=MBD\n")), tmp_path / "a")
    second = run(load_config(str(first / "manifest.cfg")), tmp_path / "b")
    for name in ("drift.csv", "trace.csv", "ranking.csv", "fairness.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_negative_gamma_rejected_before_training(tmp_path, capsys):
    out = tmp_path / "bad"
    code = main(["grid", "--config", write_cfg(tmp_path, BASE + "grid.gamma=0.5,-1\n"), "--out", str(out)])
    assert code == 1
    assert "grid.gamma" in capsys.readouterr().err
    assert not (out / "grid.csv").exists()
    code = main(["run", "--config", write_cfg(tmp_path, BASE + "score.gamma=-1\n"), "--out", str(out)])
    assert code == 1 and not (out / "trace.csv").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_runtime_failure_exit_code_and_marker(tmp_path, capsys):
    out = tmp_path / "boom"
    text = BASE.replace("train.optimizer=adam", "train.optimizer=sgd").replace("train.lr=0.05", "train.lr=1e300")
    code = main(["run", "--config", write_cfg(tmp_path, text), "--out", str(out)])
    assert code == 2
    assert "[train]" in capsys.readouterr().err
    assert (out / "FAILED").exists() and (out / "manifest.cfg").exists()


def test_single_point_grid_equals_run(tmp_path):
    cfg = load_config(write_cfg(tmp_path, BASE + "mode=PDA\nscore.gamma=0.5\npda.alpha=0.3\n"))
    best, table = grid_search(cfg, tmp_path / "grid")
    assert len(table) == 1 and best == {"score_gamma": 0.5, "pda_alpha": 0.3}
    out = run(cfg, tmp_path / "run")
    val = validation_score(cfg, prepare(cfg), load_models(out / "checkpoints"), 0.3)
    assert table[0][2] == val


def test_two_point_grid_table(tmp_path):
    cfg = load_config(write_cfg(tmp_path, BASE + "mode=PD\ngrid.gamma=0.0,1.0\n"))
    best, table = grid_search(cfg, tmp_path / "g")
    lines = (tmp_path / "g" / "grid.csv").read_text().splitlines()
    assert lines[0] == "score.gamma,pda.alpha,val_metric,best"
    assert len(lines) == 3
    flags = [l.split(",")[-1] for l in lines[1:]]
    assert sorted(flags) == ["0", "1"]
    vals = [float(l.split(",")[2]) for l in lines[1:]]
    assert vals[flags.index("1")] == max(vals)
    assert best["score_gamma"] == table[int(np.argmax([row[2] for row in table]))][0]["score_gamma"]


def test_mbd_grid_over_gamma_r_and_gamma_z(tmp_path):
    cfg = load_config(write_cfg(tmp_path, BASE + MBD_EXTRA + "mode=MBD\ngrid.gamma_r=0,1\ngrid.gamma_z=1\n"))
    best, table = grid_search(cfg, tmp_path / "g")
    assert [row[0] for row in table] == [{"score_gamma_r": 0.0, "score_gamma_z": 1.0},
                                         {"score_gamma_r": 1.0, "score_gamma_z": 1.0}]


def test_cli_subcommands(tmp_path):
    cfg = write_cfg(tmp_path, BASE + MBD_EXTRA + "mode=MBD\n")
    syn = tmp_path / "syn"
    assert main(["synth", "--config", cfg, "--out", str(syn)]) == 0
    log_path = str(syn / "interactions.tsv")
    assert (syn / "true_match.tsv").exists() and (syn / "true_quality.tsv").exists()
    assert main(["ingest", "--input", log_path, "--out", str(tmp_path / "ing")]) == 0
    assert (tmp_path / "ing" / "id_map.tsv").exists()
    assert main(["stats", "--input", log_path, "--stages", "4", "--out", str(tmp_path / "st")]) == 0
    assert (tmp_path / "st" / "quality.tsv").read_text().startswith("item\tclicks\tpost_clicks")
    assert main(["drift", "--input", log_path, "--stages", "4", "--log-base", "2", "--out", str(tmp_path / "dr")]) == 0
    assert len((tmp_path / "dr" / "drift.csv").read_text().splitlines()) == 4
    assert main(["forecast", "--input", log_path, "--stages", "4", "--alpha", "0.5", "--out", str(tmp_path / "fc")]) == 0
    assert (tmp_path / "fc" / "forecast.tsv").read_text().startswith("item\tm_tilde\n")

    # train + evaluate + fairness reproduce the artifacts of run
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "tr")]) == 0
    ck = str(tmp_path / "tr" / "checkpoints")
    assert main(["evaluate", "--config", cfg, "--checkpoints", ck, "--out", str(tmp_path / "ev")]) == 0
    assert main(["fairness", "--config", cfg, "--checkpoints", ck, "--out", str(tmp_path / "ev")]) == 0
    for name in ("ranking.csv", "fairness.csv"):
        assert (tmp_path / "ev" / name).read_bytes() == (tmp_path / "run" / name).read_bytes()


def test_cli_seed_override_changes_run(tmp_path):
    cfg = write_cfg(tmp_path, BASE + "mode=PD\n")
    assert main(["run", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "s1")]) == 0
    assert main(["run", "--config", cfg, "--seed", "2", "--out", str(tmp_path / "s2")]) == 0
    assert "seed=1" in (tmp_path / "s1" / "manifest.cfg").read_text().splitlines()
    assert (tmp_path / "s1" / "trace.csv").read_bytes() != (tmp_path / "s2" / "trace.csv").read_bytes()


def test_cli_missing_input(tmp_path, capsys):
    assert main(["drift", "--input", str(tmp_path / "none.tsv")]) == 1
    assert main(["evaluate", "--config", write_cfg(tmp_path, BASE), "--checkpoints", str(tmp_path / "nothing")]) == 1


def test_global_flags_before_subcommand(tmp_path):
    cfg = write_cfg(tmp_path, BASE + "mode=PD\n")
    out = tmp_path / "pre"
    assert main(["--seed", "7", "--out", str(out), "run", "--config", cfg]) == 0
    assert "seed=7" in (out / "manifest.cfg").read_text().splitlines()
