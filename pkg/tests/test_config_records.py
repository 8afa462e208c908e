"""Config validation, environment overrides, hashing and the result file formats."""

import json
import logging
import math

import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError

from stochns.config import ConfigDocument, env_overrides, load_config
from stochns.records import (
    ResultLine,
    append_records,
    export_plot_data,
    import_plot_data,
    merge_records,
    read_records,
)


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


class TestConfig:
    def test_defaults(self):
        cfg = load_config(environ={})
        assert cfg.truncation.n_max == 4
        assert cfg.noise.beta == 3.0
        assert cfg.experiment.epsilon_list == [0.1]

    def test_reads_yaml_and_json(self, tmp_path):
        data = {"truncation": {"n_max": 3}, "solver": {"dt": 0.01}}
        a = load_config(write_yaml(tmp_path / "a.yaml", data), environ={})
        (tmp_path / "b.json").write_text(json.dumps(data))
        b = load_config(tmp_path / "b.json", environ={})
        assert a == b and a.truncation.n_max == 3

    @pytest.mark.parametrize(
        "data, field",
        [
            ({"solver": {"dtt": 0.1}}, "dtt"),
            ({"solver": {"dt": -0.1}}, "dt"),
            ({"experiment": {"epsilon_list": [0.1, 0.2]}}, "epsilon_list"),
            ({"experiment": {"epsilon_list": []}}, "epsilon_list"),
            ({"truncation": {"n_max": 4, "grid_size": 12}}, "truncation"),
            ({"experiment": {"targets": [{"modes": [{"k": [0, 0], "re": 1.0}]}]}}, "k"),
            ({"seed": -1}, "seed"),
        ],
    )
    def test_rejects_invalid(self, tmp_path, data, field):
        with pytest.raises(ValidationError) as info:
            load_config(write_yaml(tmp_path / "c.yaml", data), environ={})
        locs = [".".join(map(str, e["loc"])) for e in info.value.errors()]
        assert any(field in loc for loc in locs)

    def test_rejects_non_mapping(self, tmp_path):
        (tmp_path / "c.yaml").write_text("- 1\n- 2\n")
        with pytest.raises(ValueError, match="mapping"):
            load_config(tmp_path / "c.yaml", environ={})

    def test_environment_override(self, tmp_path):
        path = write_yaml(tmp_path / "c.yaml", {"solver": {"dt": 0.01}})
        env = {
            "STOCHNS_SOLVER__DT": "0.002",
            "STOCHNS_EXPERIMENT__EPSILON_LIST": "[0.5, 0.25]",
            "STOCHNS_SEED": "99",
            "OTHER": "x",
        }
        cfg = load_config(path, environ=env)
        assert cfg.solver.dt == 0.002
        assert cfg.experiment.epsilon_list == [0.5, 0.25]
        # reserved flag variables never reach the document
        assert cfg.seed == 0
        assert env_overrides({"STOCHNS_OUT": "x.jsonl"}) == {}

    def test_environment_override_is_validated(self):
        with pytest.raises(ValidationError):
            load_config(environ={"STOCHNS_SOLVER__DT": "-1"})

    def test_hash_ignores_key_order(self, tmp_path):
        a = {"solver": {"dt": 0.01, "t_final": 2.0}, "truncation": {"n_max": 3}, "seed": 5}
        b = {"seed": 5, "truncation": {"n_max": 3}, "solver": {"t_final": 2.0, "dt": 0.01}}
        ha = load_config(write_yaml(tmp_path / "a.yaml", a), environ={}).config_hash()
        (tmp_path / "b.json").write_text(json.dumps(b))
        hb = load_config(tmp_path / "b.json", environ={}).config_hash()
        assert ha == hb
        assert ha != load_config(environ={}).config_hash()

    def test_with_overrides(self):
        cfg = ConfigDocument().with_overrides(seed=7)
        assert cfg.seed == 7
        with pytest.raises(ValidationError):
            ConfigDocument().with_overrides(bogus=1)


def line(obs="tail_probability", est=0.1, se=0.01, **params):
    return ResultLine(config_hash="abc", observable=obs, estimate=est, std_error=se, n_samples=100,
                      wall_ms=1.0, params=params)


class TestRecords:
    def test_append_and_read(self, tmp_path):
        p = tmp_path / "r.jsonl"
        recs = [line(R=0.5, epsilon=0.1), line(R=0.7, epsilon=0.1)]
        assert append_records(p, recs) == 2
        assert append_records(p, recs[:1]) == 1
        assert read_records(p) == recs + recs[:1]
        assert all(json.loads(s)["schema_version"] == 1 for s in p.read_text().splitlines())

    def test_truncated_final_line_is_skipped_with_warning(self, tmp_path, caplog):
        p = tmp_path / "r.jsonl"
        append_records(p, [line(R=0.5, epsilon=0.1)])
        full = line(R=0.7, epsilon=0.1).to_line()
        with open(p, "a") as fh:
            fh.write(full[: len(full) // 2])
        with caplog.at_level(logging.WARNING):
            out = read_records(p)
        assert len(out) == 1
        assert "truncated final line" in caplog.text

    def test_malformed_middle_line(self, tmp_path, caplog):
        p = tmp_path / "r.jsonl"
        p.write_text(line().to_line() + "{not json}\n" + line(est=0.2).to_line())
        with caplog.at_level(logging.WARNING):
            out = read_records(p)
        assert [r.estimate for r in out] == [0.1, 0.2]
        assert "malformed line 2" in caplog.text

    def test_merge(self, tmp_path):
        a, b, out = tmp_path / "a.jsonl", tmp_path / "b.jsonl", tmp_path / "m.jsonl"
        append_records(a, [line(est=0.1)])
        append_records(b, [line(est=0.2), line(est=0.3)])
        assert merge_records([a, b], out) == 3
        assert [r.estimate for r in read_records(out)] == [0.1, 0.2, 0.3]


class TestExport:
    @given(st.lists(st.tuples(st.floats(1e-6, 10), st.floats(0.01, 5), st.floats(0, 1), st.floats(0, 1)),
                    min_size=1, max_size=8))
    def test_round_trip_is_exact(self, tmp_path_factory, rows):
        d = tmp_path_factory.mktemp("exp")
        src, out = d / "r.jsonl", d / "t.csv"
        append_records(src, [line(est=p, se=e, epsilon=eps, R=r) for eps, r, p, e in rows])
        append_records(src, [line(obs="other", est=1.0)])
        assert export_plot_data(src, "tail_probability", out) == len(rows)
        back = import_plot_data(out)
        assert list(back[0]) == ["epsilon", "R", "p_hat", "err"]
        for got, (eps, r, p, e) in zip(back, rows):
            assert (got["epsilon"], got["R"], got["p_hat"], got["err"]) == (eps, r, p, e)

    def test_generic_observable_columns(self, tmp_path):
        src, out = tmp_path / "r.jsonl", tmp_path / "t.csv"
        append_records(src, [line(obs="invariant.V2", est=0.3, epsilon=0.1, zeta=1.0, alpha=2.0)])
        export_plot_data(src, "invariant.V2", out)
        header = out.read_text().splitlines()[0]
        assert header == "epsilon,alpha,zeta,estimate,err"

    def test_missing_params_are_blank(self, tmp_path):
        src, out = tmp_path / "r.jsonl", tmp_path / "t.csv"
        append_records(src, [line(epsilon=0.1, R=0.5, extra=3.0), line(epsilon=0.05, R=0.5)])
        export_plot_data(src, "tail_probability", out)
        assert math.isnan(import_plot_data(out)[1]["extra"])

    def test_empty_input_gives_header_only(self, tmp_path):
        src, out = tmp_path / "r.jsonl", tmp_path / "t.csv"
        src.write_text("")
        assert export_plot_data(src, "ball_probability", out) == 0
        assert out.read_text() == "epsilon,delta,p_hat,err\n"

    def test_missing_observable_lists_available(self, tmp_path):
        src = tmp_path / "r.jsonl"
        append_records(src, [line(obs="energy_balance.lhs"), line(obs="invariant.V2")])
        with pytest.raises(KeyError, match="energy_balance.lhs, invariant.V2"):
            export_plot_data(src, "tail_probability", tmp_path / "t.csv")
