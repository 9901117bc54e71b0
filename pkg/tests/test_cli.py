import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest
import yaml

from nlbench.cli import main
from nlbench.dataman import load_manifest
from nlbench.experiment import ConfigError, ExperimentConfig, apply_overrides
from nlbench.metrics import MetricReport, aggregate, evaluate_predictions, track
from nlbench.results import ResultsStore, RunRecord, aggregate_records, load_records, make_run_id


def _report(values, seed=0):
    rep = MetricReport()
    rng = np.random.default_rng(seed)
    for e, _ in enumerate(values):
        y = rng.integers(0, 3, 40)
        p = np.where(rng.random(40) < 0.6, y, rng.integers(0, 3, 40))
        track(rep, evaluate_predictions(e, p, y, 3))
    return rep


def _record(seed, cfg=None):
    return RunRecord.create(cfg or {"lnl": {"method": "ce"}, "noise": {"epsilon": 0.2}}, seed, _report([0] * 6, seed), 1.0)


# ---------------------------------------------------------------- results store

def test_run_id_is_content_hash():
    a = make_run_id({"x": 1, "y": [1, 2]}, 3)
    assert a == make_run_id({"y": [1, 2], "x": 1}, 3)
    assert a != make_run_id({"x": 1, "y": [1, 2]}, 4)
    assert a != make_run_id({"x": 2, "y": [1, 2]}, 3)


def test_store_round_trip(tmp_path):
    store = ResultsStore(tmp_path)
    rec = _record(1)
    path = store.write(rec)
    doc = json.loads(path.read_text())
    for key in ("run_id", "config", "per_epoch", "best", "last", "confusion_final", "wall_clock", "version"):
        assert key in doc
    back = store.read(rec.run_id)
    assert back.report.series == rec.report.series
    assert back.best == rec.best and back.last == rec.last
    assert len(store.index.read_text().splitlines()) == 1


def test_store_is_immutable(tmp_path):
    store = ResultsStore(tmp_path)
    rec = _record(1)
    store.write(rec)
    store.write(rec)  # identical content is fine
    clash = RunRecord(rec.run_id, rec.config, rec.seed, _report([0] * 6, seed=99), 1.0)
    with pytest.raises(FileExistsError):
        store.write(clash)
    assert len(store.index.read_text().splitlines()) == 1


def _write_one(args):
    root, seed = args
    ResultsStore(root).write(_record(seed))
    return seed


def test_concurrent_writers_keep_every_index_line(tmp_path):
    with ProcessPoolExecutor(4) as pool:
        list(pool.map(_write_one, [(str(tmp_path), s) for s in range(16)]))
    lines = [json.loads(l) for l in (tmp_path / "index.jsonl").read_text().splitlines()]
    assert sorted(l["seed"] for l in lines) == list(range(16))
    assert len(ResultsStore(tmp_path).records()) == 16


def test_aggregate_matches_members():
    recs = [_record(s) for s in (1, 2, 3)]
    agg = aggregate_records(recs)
    bests = [r.best for r in recs]
    assert abs(agg["best"]["mean"] - np.mean(bests)) <= 1e-12
    assert abs(agg["best"]["std"] - np.std(bests, ddof=1)) <= 1e-12


def test_results_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("NLBENCH_RESULTS", str(tmp_path / "env"))
    assert ResultsStore().root == tmp_path / "env"


# ---------------------------------------------------------------- config

def test_overrides_parse_yaml_values():
    tree = apply_overrides({"lnl": {"epochs": 3}}, ["lnl.epochs=5", "seeds=[4, 5]", "noise.kind=symmetric"])
    assert tree == {"lnl": {"epochs": 5}, "seeds": [4, 5], "noise": {"kind": "symmetric"}}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no_equals"])


@pytest.mark.parametrize("tree", [
    {},
    {"dataset": {"manifest": "m.csv"}, "bogus": 1},
    {"dataset": {"manifest": "m.csv"}, "lnl": {"lr": 0.1}},
    {"dataset": {"manifest": "m.csv"}, "noise": {"kind": "symmetric", "epsilon": 1.5}},
    {"dataset": {"manifest": "m.csv"}, "pretrain": {"mode": "checkpoint"}},
    {"dataset": {"manifest": "m.csv"}, "pretrain": {"mode": "ssl", "task": "simclr", "overrides": {"nope": 1}}},
])
def test_invalid_configs_rejected(tree):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(tree)


# ---------------------------------------------------------------- CLI end to end

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    from nlbench.synthetic import generate_textures

    root = tmp_path_factory.mktemp("ws")
    generate_textures(root / "tex", n_train=60, n_test=15, seed=11)
    return root


def _write_cfg(root: Path, name: str, **extra) -> Path:
    tree = {
        "dataset": {"manifest": str(root / "tex" / "manifest.csv")},
        "noise": {"kind": "symmetric", "epsilon": 0.2, "seed": 4},
        "pretrain": {"mode": "none"},
        "lnl": {"method": "ce", "epochs": 2, "warmup_epochs": 1, "architecture": "resnet10-w16", "input_size": 32,
                "batch_size": 16},
        "seeds": [1, 2, 3],
        "output": str(root / "out"),
    }
    for k, v in extra.items():
        tree[k] = v if not isinstance(v, dict) or not isinstance(tree.get(k), dict) else {**tree[k], **v}
    path = root / f"{name}.yaml"
    path.write_text(yaml.safe_dump(tree))
    return path


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_validate_config_exit_codes(workspace, capsys):
    good = _write_cfg(workspace, "good")
    assert main(["validate-config", "-c", str(good)]) == 0
    assert main(["validate-config", "-c", str(good), "--set", "lnl.method=mixup"]) == 2
    assert main(["validate-config", "-c", str(workspace / "missing.yaml")]) == 2


def test_inject_zero_noise_duplicates_labels(workspace, capsys):
    cfg = _write_cfg(workspace, "inj0", noise={"kind": "symmetric", "epsilon": 0.0})
    manifest = workspace / "tex" / "manifest.csv"
    before = _sha(manifest)
    assert main(["inject", "-c", str(cfg), "--out", str(workspace / "inj0")]) == 0
    (out,) = sorted((workspace / "inj0").glob("*seed*.csv"))[:1]
    noisy = load_manifest(out)
    assert all(r.observed == r.label for r in noisy.train)
    assert _sha(manifest) == before


def test_inject_batch_modes(workspace, capsys):
    sym = _write_cfg(workspace, "injs", noise={"kind": "symmetric", "sweep": [0.5, 0.6, 0.7, 0.8]})
    assert main(["inject", "-c", str(sym), "--out", str(workspace / "injs")]) == 0
    assert len([p for p in (workspace / "injs").glob("*.csv") if not p.stem.endswith("matrix")]) == 4
    dep = _write_cfg(workspace, "injd", noise={"kind": "class_dependent", "sweep": [0.3, 0.4, 0.5, 0.6, 0.7],
                                               "groups": [["stripes", "checker"]]})
    assert main(["inject", "-c", str(dep), "--out", str(workspace / "injd")]) == 0
    outs = sorted(p for p in (workspace / "injd").glob("*.csv") if not p.stem.endswith("matrix"))
    assert len(outs) == 5
    for p in outs:
        m = load_manifest(p)
        dots = m.class_names.index("dots")
        assert all(r.observed == r.label for r in m.train if r.label == dots)


def test_missing_manifest_is_data_error(workspace, capsys):
    cfg = _write_cfg(workspace, "nomani", dataset={"manifest": str(workspace / "nope.csv")})
    assert main(["inject", "-c", str(cfg)]) == 3


@pytest.fixture(scope="module")
def trained(workspace):
    results = workspace / "results"
    cfg = _write_cfg(workspace, "train", noise={"kind": "symmetric", "sweep": [0.0, 0.2]})
    assert main(["train", "-c", str(cfg), "--results", str(results)]) == 0
    return results


def test_train_writes_records_and_aggregates(trained):
    records = load_records(trained)
    assert len(records) == 6
    assert sorted(r.seed for r in records) == [1, 1, 2, 2, 3, 3]
    aggs = [json.loads(p.read_text()) for p in (trained / "aggregates").glob("*.json")]
    assert len(aggs) == 2
    for agg in aggs:
        members = [r for r in records if r.run_id in agg["run_ids"]]
        assert abs(agg["last"]["mean"] - aggregate(r.last for r in members)["mean"]) <= 1e-12
        assert abs(agg["best"]["std"] - aggregate(r.best for r in members)["std"]) <= 1e-12
    assert all(r.report.meta["freeze_policy"] == "plastic" for r in records)


def test_eval_robustness_and_plots(trained, tmp_path, capsys):
    assert main(["eval", str(trained)]) == 0
    assert "False" not in capsys.readouterr().out
    assert main(["robustness", str(trained), "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 1 and rows[0]["points"][0][0] == 0.0
    for kind in ("f1_vs_noise", "confusion", "robustness_bar"):
        assert main(["plot", str(trained), "--kind", kind, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "f1_vs_noise.png").stat().st_size > 0


def test_plot_empty_glob(tmp_path, capsys):
    assert main(["plot", str(tmp_path / "nothing*.json"), "--kind", "f1_vs_noise", "--out", str(tmp_path)]) == 3
    assert "0 matches" in capsys.readouterr().err


def test_rerun_reproduces_per_epoch_metrics(trained, capsys):
    rec = load_records(trained)[0]
    assert main(["train", "--results", str(trained), "--rerun", rec.run_id]) == 0
    assert "identical" in capsys.readouterr().out


def test_init_modes_differ_only_in_pretrain(workspace, trained):
    from nlbench.backbone import CheckpointMeta, EncoderSpec, build_encoder, save_checkpoint

    spec = EncoderSpec.for_architecture("resnet10-w16", 32)
    enc = build_encoder(spec, 0)
    ck = save_checkpoint(enc, CheckpointMeta("simclr", "tex", 1, 0, spec), workspace / "ck")
    ck_sha = _sha(ck)
    cfg = _write_cfg(workspace, "init", pretrain={"mode": "checkpoint", "checkpoint": str(ck)}, seeds=[1])
    results = workspace / "results_init"
    assert main(["train", "-c", str(cfg), "--results", str(results)]) == 0
    with_init = load_records(results)[0]
    scratch = next(r for r in load_records(trained) if r.seed == 1 and r.config["noise"]["epsilon"] == 0.2)
    diff = {k for k in with_init.config if with_init.config[k] != scratch.config.get(k)}
    assert diff == {"pretrain"}
    assert _sha(ck) == ck_sha
    assert with_init.report.meta["init"] is not None and scratch.report.meta["init"] is None
    assert with_init.report.series != scratch.report.series


def test_frozen_mode_recorded(workspace, capsys):
    cfg = _write_cfg(workspace, "frozen", seeds=[1])
    results = workspace / "results_frozen"
    assert main(["train", "-c", str(cfg), "--results", str(results), "--set", "lnl.freeze=frozen",
                 "--set", "lnl.architecture=resnet18-w8"]) == 0
    rec = load_records(results)[0]
    assert rec.report.meta["freeze_policy"] == "frozen"
    assert rec.config["lnl"]["freeze"] == "frozen"


def test_ssl_pretrain_command(workspace, capsys):
    cfg = _write_cfg(workspace, "ssl", pretrain={"mode": "ssl", "task": "rotation", "seed": 0,
                                                 "overrides": {"epochs": 1, "batch_size": 16}})
    assert main(["pretrain", "-c", str(cfg)]) == 0
    path = Path(capsys.readouterr().out.strip())
    assert path.name == "rotation_textures_0_1.ckpt"
    assert path.is_file()
    assert main(["pretrain", "-c", str(cfg)]) == 0  # cached
    assert Path(capsys.readouterr().out.strip()) == path


def test_difficulty_command(workspace, tmp_path, capsys):
    from nlbench.synthetic import generate_textures

    generate_textures(workspace / "tex_b", n_train=40, n_test=12, seed=12, name="texb")
    cfg = _write_cfg(workspace, "diff", difficulty={
        "axis": "size", "values": [20, 30], "folds": 2, "seed": 0, "css": True, "css_epochs": 1,
        "datasets": {"a": str(workspace / "tex" / "manifest.csv"), "b": str(workspace / "tex_b" / "manifest.csv")}},
        lnl={"epochs": 1})
    assert main(["difficulty", "-c", str(cfg), "--results", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "dataset\tsize\tmean_f1" in out
    assert "css\ta" in out and "css\tb" in out
    assert main(["plot", "--kind", "sweep", "--results", str(tmp_path), "--out", str(tmp_path / "fig")]) == 0
