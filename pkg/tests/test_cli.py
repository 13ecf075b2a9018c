import csv
from dataclasses import fields, replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from daalign.cli.checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from daalign.cli.config import ConfigError, RunConfig, parse_config, parse_pairs, resolve_output, toy_benchmark_config
from daalign.cli.main import main
from daalign.cli.metrics import CsvLog, read_rows
from daalign.cli.runner import AblationResult, load_datasets, run_ablation, run_eval, run_train
from daalign.toydet.evaluate import Prediction


def tiny(tmp_path, name="run", **kw):
    base = dict(source_size=24, target_size=12, test_size=6, batch_size=4, steps=6, num_projections=16,
                dim=16, disc_hidden=8, out_dir=str(tmp_path / name))
    base.update(kw)
    return RunConfig(**base)


# config ----------------------------------------------------------------------

def test_defaults_mirror_the_published_settings():
    c = RunConfig()
    assert (c.tau, c.num_projections, c.lam, c.beta, c.lr_det, c.lr_disc) == (0.5, 256, 1.0, 1.0, 2e-4, 4e-3)
    for f in fields(RunConfig):
        assert f.metadata.get("doc"), f.name


@pytest.mark.parametrize("pairs", [{"tau": "1.5"}, {"lam": "-1"}, {"beta": "-0.1"}, {"num_projections": "0"},
                                   {"placement": "encoder"}, {"batch_size": "5000"}, {"seed": "x"},
                                   {"nope": "1"}, {"freeze_discriminator": "maybe"}])
def test_invalid_configs_rejected(pairs):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(pairs)


def test_parse_rules():
    cfg = parse_config("# comment\nseed = 3   # trailing\n\nplacement=decoder\nfreeze_discriminator = yes\n")
    assert (cfg.seed, cfg.placement, cfg.freeze_discriminator) == (3, "decoder", True)
    with pytest.raises(ConfigError, match="duplicate"):
        parse_pairs(["seed = 1", "seed = 2"])
    with pytest.raises(ConfigError, match="line 1"):
        parse_pairs(["seed 1"])


def test_file_then_flags(tmp_path):
    from daalign.cli.config import load_config

    path = tmp_path / "c.txt"
    path.write_text("seed = 4\nbeta = 0.5\n")
    cfg = load_config(path, {"beta": "0.25"})
    assert (cfg.seed, cfg.beta) == (4, 0.25)


configs = st.builds(
    RunConfig, seed=st.integers(0, 2 ** 31), tau=st.floats(0, 1), lam=st.floats(0, 10), beta=st.floats(0, 10),
    num_projections=st.integers(1, 512), placement=st.sampled_from(["none", "backbone", "decoder", "backbone+decoder"]),
    freeze_discriminator=st.booleans(), lr_det=st.floats(1e-8, 1.0), haze=st.floats(0, 1),
    out_dir=st.text("abc/_-", min_size=1, max_size=12))


@settings(max_examples=100, deadline=None)
@given(configs)
def test_config_round_trip(cfg):
    text = cfg.serialize()
    assert parse_config(text) == cfg
    assert parse_config(text).serialize() == text


def test_hash_ignores_runtime_keys_only():
    a = RunConfig()
    assert a.config_hash() == replace(a, steps=9, out_dir="elsewhere", eval_every=5).config_hash()
    assert a.config_hash() != replace(a, beta=0.5).config_hash()


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("DAALIGN_OUTPUT_ROOT", str(tmp_path))
    assert resolve_output("runs/x") == tmp_path / "runs/x"
    assert resolve_output("/abs/x").as_posix() == "/abs/x"
    monkeypatch.delenv("DAALIGN_OUTPUT_ROOT")
    assert resolve_output("runs/x").as_posix() == "runs/x"


def test_toy_benchmark_overrides():
    cfg = toy_benchmark_config(steps=5)
    assert cfg.steps == 5 and cfg.beta == 3e-4 and cfg.grl_factor == 0.5 and cfg.pretrain_steps > 0


# checkpoint ----------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 4)), "b": np.array([np.pi]), "c": rng.normal(size=(2, 2, 2))}
    cfg = RunConfig(seed=5)
    path = save_checkpoint(tmp_path / "x.daal", cfg, tensors)
    digest, back_cfg, back = read_checkpoint(path)
    assert digest == cfg.config_hash() and back_cfg == cfg
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes() and back[k].shape == tensors[k].shape


@pytest.mark.parametrize("patch,offset", [((0, b"XXXX"), 0), ((4, (7).to_bytes(4, "little")), 4),
                                          ((9, b"\x00"), 8)])
def test_corrupt_checkpoint_reports_offset(tmp_path, patch, offset):
    path = save_checkpoint(tmp_path / "x.daal", RunConfig(), {"a": np.ones(3)})
    raw = bytearray(path.read_bytes())
    at, data = patch
    raw[at:at + len(data)] = data
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError) as e:
        read_checkpoint(path)
    assert e.value.offset == offset and f"offset {offset}" in str(e.value)


def test_truncated_checkpoint(tmp_path):
    path = save_checkpoint(tmp_path / "x.daal", RunConfig(), {"a": np.ones(3)})
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


# metrics log -------------------------------------------------------------

def test_csv_log_resume_truncates(tmp_path):
    path = tmp_path / "m.csv"
    with CsvLog(path, ["step", "x"]) as log:
        for k in range(5):
            log.append({"step": k, "x": 0.1 * k})
    with CsvLog(path, ["step", "x"], resume_at=3) as log:
        log.append({"step": 3, "x": 9.0})
    rows = read_rows(path)
    assert [r["step"] for r in rows] == ["0", "1", "2", "3"] and rows[-1]["x"] == "9.0"
    assert rows[1]["x"] == repr(0.1)
    with pytest.raises(ValueError):
        CsvLog(path, ["step", "y"], resume_at=1)


# training runs -----------------------------------------------------------

def test_placement_none_logs_detection_only(tmp_path):
    res = run_train(tiny(tmp_path, placement="none", steps=3))
    with open(res.out_dir / "metrics.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["step", "phase", "det", "det_cls", "det_l1", "det_iou", "total"]
    assert len(read_rows(res.out_dir / "metrics.csv")) == 3


def test_full_placement_columns(tmp_path):
    res = run_train(tiny(tmp_path, steps=2))
    header = list(read_rows(res.out_dir / "metrics.csv")[0])
    assert header[-5:] == ["global_align", "masked_align", "oaa", "ota", "total"]
    assert (res.out_dir / "timings.csv").exists() and (res.out_dir / "report.csv").exists()


def test_same_config_twice_gives_identical_files(tmp_path):
    cfg = tiny(tmp_path, checkpoint_every=3)
    blobs = []
    for _ in range(2):
        res = run_train(cfg)
        blobs.append({n: (res.out_dir / n).read_bytes()
                      for n in ("metrics.csv", "eval.csv", "report.csv", "final.daal", "step000003.daal")})
    assert blobs[0] == blobs[1]


def test_resume_continues_the_exact_trajectory(tmp_path):
    kw = dict(pretrain_steps=3, steps=5, checkpoint_every=2, eval_every=2)
    full = run_train(tiny(tmp_path, "full", **kw))
    part_cfg = tiny(tmp_path, "part", **kw)
    run_train(part_cfg, stop_at=5)
    assert not (part_cfg.output_path() / "final.daal").exists()
    resumed = run_train(part_cfg, resume=part_cfg.output_path() / "step000004.daal")
    for name in ("metrics.csv", "eval.csv", "report.csv"):
        assert (full.out_dir / name).read_bytes() == (resumed.out_dir / name).read_bytes(), name
    a, b = read_checkpoint(full.checkpoint)[2], read_checkpoint(resumed.checkpoint)[2]
    assert {k: v.tobytes() for k, v in a.items()} == {k: v.tobytes() for k, v in b.items()}


def test_resume_under_a_different_config_is_refused(tmp_path):
    cfg = tiny(tmp_path, steps=2, checkpoint_every=2)
    run_train(cfg)
    with pytest.raises(CheckpointError, match="hash mismatch"):
        run_train(replace(cfg, lam=0.5), resume=cfg.output_path() / "step000002.daal")
    # a longer run under the same settings may resume
    run_train(replace(cfg, steps=3), resume=cfg.output_path() / "step000002.daal")


def test_invalid_config_rejected_before_any_work(tmp_path):
    cfg = tiny(tmp_path)
    object.__setattr__(cfg, "tau", 2.0)
    with pytest.raises(ConfigError):
        run_train(cfg)
    assert not cfg.output_path().exists()


# evaluation ------------------------------------------------------------------

def test_eval_outputs_and_determinism(tmp_path):
    res = run_train(tiny(tmp_path, steps=1))
    run_eval(res.checkpoint, out_dir=tmp_path / "e1")
    run_eval(res.checkpoint, out_dir=tmp_path / "e2")
    assert (tmp_path / "e1/eval_report.csv").read_bytes() == (tmp_path / "e2/eval_report.csv").read_bytes()
    text = (tmp_path / "e1/eval_report.txt").read_text()
    assert "mAP70/50" in text and "mAP90/50" in text


def test_oracle_and_untrained_predictors(tmp_path):
    res = run_train(tiny(tmp_path, steps=1, test_size=20))
    scenes = load_datasets(res.config).test
    oracle = lambda images: [Prediction(s.boxes, np.ones(len(s.labels)), s.labels) for s in scenes]  # noqa: E731
    rep = run_eval(res.checkpoint, scenes, predictor=oracle)
    assert all(rep.map_at(t) == 1.0 for t in rep.thresholds)
    untrained = run_eval(res.checkpoint, scenes)
    assert untrained.map_at(0.5) < 0.1


def test_ablation_needs_three_seeds(tmp_path):
    with pytest.raises(ValueError):
        run_ablation(tiny(tmp_path), [0, 1])
    with pytest.raises(ValueError):
        run_ablation(tiny(tmp_path), [0, 1, 2], ["source-only", "bogus"])


def test_small_ablation_table(tmp_path):
    base = tiny(tmp_path, "abl", pretrain_steps=2, steps=2)
    res = run_ablation(base, [0, 1, 2], ["source-only", "backbone", "decoder", "backbone+decoder"])
    assert isinstance(res, AblationResult)
    assert set(res.orderings()) == {"source-only < backbone", "source-only < decoder",
                                    "backbone < backbone+decoder", "decoder < backbone+decoder"}
    root = base.output_path()
    assert (root / "ablation.csv").read_text().count("\n") == 1 + 4 * 3
    assert "+-" in (root / "ablation.txt").read_text()
    # the source-only row is plain source-only training
    solo = run_train(replace(base, seed=1, placement="none", out_dir=str(tmp_path / "solo")))
    assert solo.report.map_at(0.5) == res.reports[("source-only", 1)].map_at(0.5)


# command line --------------------------------------------------------------

def _args(tmp_path, name):
    return ["--set", "source_size=24", "--set", "target_size=12", "--set", "test_size=6", "--set", "batch_size=4",
            "--set", "num_projections=8", "--set", "dim=16", "--steps", "2", "--out", str(tmp_path / name)]


def test_cli_train_eval_and_errors(tmp_path, capsys):
    assert main(["train", *_args(tmp_path, "t"), "--set", "checkpoint_every=1"]) == 0
    assert (tmp_path / "t/final.daal").exists()
    assert main(["eval", str(tmp_path / "t/final.daal"), "--out", str(tmp_path / "ev")]) == 0
    assert "mAP" in capsys.readouterr().out
    assert main(["train", *_args(tmp_path, "t"), "--set", "lam=3", "--resume", str(tmp_path / "t/step000001.daal")]) == 2
    assert "hash mismatch" in capsys.readouterr().err
    assert main(["train", "--set", "tau=7"]) == 2
    bad = tmp_path / "bad.daal"
    bad.write_bytes(b"NOPE" + bytes(60))
    assert main(["eval", str(bad)]) == 2
    assert "offset 0" in capsys.readouterr().err


def test_cli_gen_data_feeds_training(tmp_path):
    assert main(["gen-data", *_args(tmp_path, "data")]) == 0
    assert main(["train", *_args(tmp_path, "r"), "--set", f"data_dir={tmp_path / 'data'}"]) == 0
    generated = read_rows(tmp_path / "r/metrics.csv")
    assert main(["train", *_args(tmp_path, "g")]) == 0
    assert generated == read_rows(tmp_path / "g/metrics.csv")


def test_cli_seed_flag_wins_over_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("seed = 1\n")
    assert main(["train", "--config", str(cfg), *_args(tmp_path, "s"), "--seed", "6"]) == 0
    assert "seed = 6" in (tmp_path / "s/config.txt").read_text()
