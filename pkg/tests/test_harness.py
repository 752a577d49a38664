import json
import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from das._utils import STREAM_INSTANCE, track_streams
from das.cli import main
from das.harness import (
    PRESETS,
    ConfigError,
    Series,
    atomic_write,
    compare_policies,
    parse_config,
    preset_config,
    run_experiment,
)

SMALL = {
    "gaussian": dict(regime="gaussian", seed=3, K=8, L=2, rounds=3, policy=["entropy", "mse"],
                     trials=3),
    "sparse": dict(regime="sparse", seed=3, K=30, M=9, S=2, L=5, rounds=4, policy=["DAS", "RRS"],
                   error_prob=[0.0, 0.2], trials=3),
    "distributed": dict(regime="distributed", seed=3, K=60, L=4, m=5, rounds=12,
                        policy=["RA1", "RA2"], trials=3),
}


# ---------------------------------------------------------------- configuration

@pytest.mark.parametrize("regime", sorted(SMALL))
def test_config_round_trip(regime):
    cfg = parse_config(SMALL[regime])
    assert parse_config(cfg.to_json()) == cfg
    assert parse_config(json.loads(cfg.to_json())).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_validate(name):
    cfg = preset_config(name)
    assert cfg.trials >= 1 and cfg.seed is not None


def test_aliases_and_defaults():
    cfg = parse_config({"regime": "distributed", "seed": 1, "K": 10, "T": 7})
    assert cfg.rounds == 7 and cfg.policy == ["RA1"] and cfg.m == 10
    cfg = parse_config({"regime": "sparse", "seed": 1, "K": 10, "M": 4, "S": 2, "rounds": 2,
                        "L": 2, "error_probs": 0.1, "policies": "RRS"})
    assert cfg.error_prob == [0.1] and cfg.policy == ["RRS"]


@pytest.mark.parametrize("patch,field", [
    ({"trials": 0}, "trials"),
    ({"seed": None}, "seed"),
    ({"M": None}, "M"),
    ({"S": 20}, "S"),
    ({"policy": ["DAS", "OMP"]}, "policy"),
    ({"error_prob": [1.5]}, "error_prob"),
    ({"rounds": 7}, "rounds"),
    ({"colour": "red"}, "colour"),
    ({"regime": "quantum"}, "regime"),
])
def test_invalid_configs(patch, field):
    data = dict(SMALL["sparse"])
    data.update(patch)
    data = {k: v for k, v in data.items() if v is not None}
    with pytest.raises(ConfigError) as err:
        parse_config(data)
    assert err.value.field == field


def test_bad_json_document():
    with pytest.raises(ConfigError):
        parse_config("{not json")


@given(trials=st.integers(-5, 0))
def test_nonpositive_trials_rejected(trials):
    with pytest.raises(ConfigError):
        parse_config({**SMALL["gaussian"], "trials": trials})


# ---------------------------------------------------------------- running

@pytest.mark.parametrize("regime", sorted(SMALL))
def test_aggregate_shapes(regime):
    cfg = parse_config(SMALL[regime])
    rep = run_experiment(cfg)
    n_variants = len(cfg.policy) * (len(cfg.error_prob) if regime == "sparse" else 1)
    assert len(rep.series) == n_variants
    for s in rep.series.values():
        assert s.values.shape == (cfg.trials, cfg.rounds)
        assert s.median.shape == s.q25.shape == s.q75.shape == (cfg.rounds,)
        assert np.all(s.q25 <= s.median) and np.all(s.median <= s.q75)


@pytest.mark.parametrize("regime", sorted(SMALL))
def test_byte_identical_replay(regime, tmp_path):
    paths = []
    for i in range(2):
        out = tmp_path / f"run{i}.csv"
        run_experiment({**SMALL[regime], "out": str(out), "emit_plot_data": True})
        paths.append(out)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    plot = [p.with_name(p.stem + "_plot.csv").read_bytes() for p in paths]
    assert plot[0] == plot[1]


def test_workers_do_not_change_results(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run_experiment({**SMALL["sparse"], "out": str(a)})
    run_experiment({**SMALL["sparse"], "out": str(b), "workers": 2})
    assert a.read_bytes() == b.read_bytes()


def test_gaussian_outputs_path_csv(tmp_path):
    out = tmp_path / "fig1.csv"
    run_experiment(preset_config("fig1", out=str(out)))
    main_lines = out.read_text().splitlines()
    assert main_lines[0] == "trial,selector,round,selected_indices,criterion_value,mse"
    assert len(main_lines) == 21
    path = (tmp_path / "fig1_path.csv").read_text().splitlines()
    assert path[0] == "t,k,x,y" and len(path) == 21
    assert sorted(int(line.split(",")[1]) for line in path[1:]) == list(range(20))


@pytest.mark.parametrize("regime", sorted(SMALL))
def test_streams_are_disjoint_across_trials(regime):
    with track_streams() as log:
        run_experiment(SMALL[regime])
    by_trial = {}
    for seed, key in log:
        assert seed == 3
        by_trial.setdefault(key[0], set()).add(key)
    assert sorted(by_trial) == [0, 1, 2]
    # every trial draws its instance exactly once, shared by all policies
    counts = Counter(key for _, key in log if key[1:] == (STREAM_INSTANCE,))
    assert all(c == 1 for c in counts.values()) and len(counts) == 3
    keys = list(by_trial.values())
    assert not (keys[0] & keys[1]) and not (keys[1] & keys[2])


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.csv"
    target.write_text("old\n")

    def boom(fh):
        fh.write("partial")
        raise RuntimeError("disk on fire")

    with pytest.raises(RuntimeError):
        atomic_write(str(target), boom)
    assert target.read_text() == "old\n"
    assert os.listdir(tmp_path) == ["out.csv"]
    atomic_write(str(target), lambda fh: fh.write("new\n"))
    assert target.read_text() == "new\n"


def test_unwritable_output_fails_before_running(tmp_path):
    with pytest.raises(OSError):
        run_experiment({**SMALL["gaussian"], "out": str(tmp_path / "missing" / "x.csv")})


# ---------------------------------------------------------------- comparison

def _series(values, label="A"):
    return Series(label, label, 0.0, np.asarray(values, dtype=float))


def test_self_comparison():
    rep = run_experiment({**SMALL["distributed"], "policy": ["RA2"]})
    c = compare_policies(rep, rep)
    np.testing.assert_array_equal(c.median_diff, 0.0)
    assert c.frac_a_le_b == 1.0


@given(quarters=st.integers(-20, 20), seed=st.integers(0, 1000))
def test_constructed_offsets(quarters, seed):
    offset = quarters / 4  # exactly representable, so base + offset never rounds back to base
    base = np.random.default_rng(seed).normal(size=(9, 4))
    c = compare_policies(_series(base + offset), _series(base, "B"))
    np.testing.assert_allclose(c.median_diff, offset, atol=1e-9)
    assert c.frac_a_le_b == (1.0 if offset <= 0 else 0.0)


def test_comparison_shape_mismatch():
    with pytest.raises(ValueError):
        compare_policies(_series(np.zeros((3, 4))), _series(np.zeros((3, 5))))


# ---------------------------------------------------------------- command line

def test_cli_success(tmp_path, capsys):
    out = tmp_path / "d.csv"
    assert main(["distributed", "--preset", "fig5", "--trials", "2", "--out", str(out),
                 "--emit-plot-data"]) == 0
    assert out.exists() and (tmp_path / "d_plot.csv").exists()
    assert "RA2" in capsys.readouterr().out


def test_cli_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL["gaussian"]))
    assert main(["gaussian", "--config", str(cfg), "--seed", "9"]) == 0


@pytest.mark.parametrize("argv", [
    ["sparse", "--preset", "fig3", "--trials", "0"],
    ["gaussian", "--preset", "fig3"],
    ["sparse"],
])
def test_cli_validation_errors(argv, capsys):
    assert main(argv) == 2
    assert "invalid configuration" in capsys.readouterr().err


def test_cli_bad_json(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{")
    assert main(["gaussian", "--config", str(cfg)]) == 2


def test_cli_runtime_errors(tmp_path):
    assert main(["gaussian", "--preset", "fig1", "--out", str(tmp_path / "no" / "x.csv")]) == 1
    assert main(["gaussian", "--config", str(tmp_path / "missing.json")]) == 1
