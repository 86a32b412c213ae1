"""CLI contract: config schema, exit codes, deterministic outputs, resume."""

import json
import math
import os

import numpy as np
import pytest

from phasetherm import cli
from phasetherm.probe import DecoherenceSeries

pytestmark = pytest.mark.filterwarnings(
    "ignore::phasetherm.marginal.UnderSampledMarginal")


def run_main(argv):
    return cli.main(argv)


def read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def write_config(tmp_path, name="cfg.json", **cfg):
    path = tmp_path / name
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

def test_unknown_config_keys_are_rejected():
    with pytest.raises(cli.ConfigError, match="unknown config keys"):
        cli._merge_config({"modle": "mc"})
    with pytest.raises(cli.ConfigError, match="unknown sampler keys"):
        cli._merge_config({"sampler": {"sweep": 10}})
    with pytest.raises(cli.ConfigError, match="sampler must be an object"):
        cli._merge_config({"sampler": 7})


def test_merge_preserves_defaults_without_aliasing():
    merged = cli._merge_config({"sampler": {"sweeps": 10}})
    assert merged["sampler"]["sweeps"] == 10
    assert merged["sampler"]["algorithm"] == "auto"
    assert cli.CONFIG_DEFAULTS["sampler"]["sweeps"] == 1_000_000


@pytest.mark.parametrize("value,expected", [
    ("0.5:1.5:3", [0.5, 1.0, 1.5]),
    ("1,2,3.5", [1.0, 2.0, 3.5]),
    ({"start": 0.0, "stop": 1.0, "num": 2}, [0.0, 1.0]),
    ([1, 2], [1.0, 2.0]),
    (None, None),
])
def test_grid_parsing_accepted_forms(value, expected):
    assert cli._parse_grid_value(value, "x") == expected


@pytest.mark.parametrize("value", [
    "0.5:1.5", "a,b", {"start": 0, "stop": 1}, {"start": 0, "stop": 1, "num": 0},
    ["a"], 3.0,
])
def test_grid_parsing_rejected_forms(value):
    with pytest.raises(cli.ConfigError):
        cli._parse_grid_value(value, "x")


def build(command="qfi-scan", overrides=None, resume=None, **file_cfg):
    return cli.build_run_config(command, file_cfg, overrides or {}, resume)


@pytest.mark.parametrize("kwargs,match", [
    (dict(model="dmrg"), "model must be one of"),
    (dict(format="yaml"), "format"),
    (dict(beta_unit="kelvin"), "beta_unit"),
    (dict(L=1), "L must be >= 2"),
    (dict(J=0.0), "J and g must be positive"),
    (dict(n_points=1), "n_points"),
    (dict(beta_grid=[]), "beta_grid must be nonempty"),
    (dict(beta_grid=[-0.5]), "nonnegative"),
    (dict(t_grid=[1.0]), "at least 2 points"),
    (dict(t_grid=[0.0, 2.0, 1.0]), "increasing"),
    (dict(radii=[-1.0]), "radii must be nonnegative"),
    (dict(cluster_center=[99, 0]), "outside the lattice"),
    (dict(cluster_center="mid"), "must be"),
    (dict(n_spins=0), "n_spins must be positive"),
    (dict(model="cw-finite", n_spins=20_000), "n_spins <= 10000"),
    (dict(sector="up"), "sector must be"),
    (dict(model="mc", sector="negative"), "only supported by cw-finite"),
    (dict(model="exact", L=6), "enumerates at most"),
    (dict(model="mc", h=0.1), "requires h = 0"),
    (dict(model="hte", L=6, radii=[3.0]), "does not fit"),
])
def test_run_config_validation(kwargs, match):
    with pytest.raises(cli.ConfigError, match=match):
        build(**kwargs)


@pytest.mark.parametrize("command,kwargs,match", [
    ("scaling", dict(model="exact", L=4, radii=[0.0, 1.0, 1.5]),
     "at least 4 cluster radii"),
    ("scaling", dict(model="cw", radii=[0.0, 1.0, 1.5, 2.0]),
     "use a lattice model"),
    ("local-fi-scan", dict(model="mft"), "supports models"),
    ("local-fi-scan", dict(model="mc", L=12, radii=[2.5]), "up to"),
    ("fid", dict(model="exact", L=4, radii=[0.0, 1.0]), "exactly one radius"),
])
def test_command_specific_validation(command, kwargs, match):
    with pytest.raises(cli.ConfigError, match=match):
        build(command, **kwargs)


def test_scaling_defaults_to_flip_symmetric_sampler():
    radii = [0.0, 1.0, 1.5, 2.0]
    rc = build("scaling", model="mc", radii=radii)
    assert rc.sampler.symmetrize is True
    rc = build("scaling", model="mc", radii=radii,
               sampler={"symmetrize": False})
    assert rc.sampler.symmetrize is False
    rc = build("scaling", model="mc", radii=radii,
               overrides={"symmetrize": False})
    assert rc.sampler.symmetrize is False
    assert build("qfi-scan", model="mc").sampler.symmetrize is False


def test_workers_resolution(monkeypatch):
    monkeypatch.delenv("THREADS", raising=False)
    assert build().workers == 1
    monkeypatch.setenv("THREADS", "3")
    assert build().workers == 3
    monkeypatch.setenv("THREADS", "99")
    assert build().workers == 16
    monkeypatch.setenv("THREADS", "many")
    with pytest.raises(cli.ConfigError, match="THREADS"):
        build()
    monkeypatch.setenv("THREADS", "0")
    assert build().workers == 1
    assert build(workers=4).workers == 4  # config beats the environment


def test_point_seeds_are_stable_and_distinct():
    rc = build(model="mc")
    seeds = [cli._point_seed(rc, i) for i in range(4)]
    assert len(set(seeds)) == 4
    assert seeds == [cli._point_seed(rc, i) for i in range(4)]


def test_config_hash_tracks_physics_not_presentation():
    rc_a = build(model="exact", L=4, out="a.csv")
    rc_b = build(model="exact", L=4, out="b.csv", format="json")
    rc_c = build(model="exact", L=4, J=0.3)
    assert rc_a.config_hash() == rc_b.config_hash()
    assert rc_a.config_hash() != rc_c.config_hash()


# ---------------------------------------------------------------------------
# Exit codes through main()
# ---------------------------------------------------------------------------

def test_config_errors_exit_2(tmp_path, capsys):
    code = run_main(["qfi-scan", "--config", str(tmp_path / "missing.json")])
    assert code == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("[1,2]", encoding="utf-8")
    assert run_main(["qfi-scan", "--config", str(bad)]) == cli.EXIT_CONFIG
    bad.write_text("{not json", encoding="utf-8")
    assert run_main(["qfi-scan", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_domain_errors_exit_3(tmp_path, capsys):
    # the mean-field saddle degenerates at the critical coupling
    cfg = write_config(tmp_path, model="cw", beta_grid=[1.0],
                       out=str(tmp_path / "x.csv"))
    code = run_main(["qfi-scan", "--config", cfg])
    assert code == cli.EXIT_DOMAIN
    assert "numerical-domain error" in capsys.readouterr().err


def test_under_sampled_statistics_exit_4_when_strict(tmp_path, capsys):
    cfg = write_config(
        tmp_path, model="mc", L=6, beta_grid=[0.17], radii=[2.0],
        sampler={"sweeps": 3000, "seed": 7, "algorithm": "metropolis"},
        out=str(tmp_path / "fi.csv"))
    code = run_main(["local-fi-scan", "--config", cfg, "--strict"])
    assert code == cli.EXIT_UNDER_SAMPLED
    assert "under-sampled" in capsys.readouterr().err
    code = run_main(["local-fi-scan", "--config", cfg])
    assert code == cli.EXIT_OK
    meta = json.loads(read(str(tmp_path / "fi.csv.meta.json")))
    assert meta["warnings"]


# ---------------------------------------------------------------------------
# Output files: schema, determinism, metadata sidecar
# ---------------------------------------------------------------------------

def test_exact_scan_outputs_are_deterministic(tmp_path):
    out_a, out_b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    argv = ["qfi-scan", "--model", "exact", "--L", "4",
            "--beta-grid", "0.25,0.5", "--radii", "1.0"]
    assert run_main(argv + ["--out", out_a]) == 0
    assert run_main(argv + ["--out", out_b]) == 0
    assert read(out_a) == read(out_b)
    lines = read(out_a).strip().split("\n")
    assert lines[0] == "beta_over_beta_c,n,t_opt,beta2_f_opt,stderr"
    assert len(lines) == 3
    for line in lines[1:]:
        bb, n, t_opt, scaled, se = line.split(",")
        assert int(n) == 5
        assert float(t_opt) > 0 and math.isfinite(float(scaled))
        assert float(se) == 0.0  # exact rows carry no sampling error
    meta = json.loads(read(out_a + ".meta.json"))
    assert meta["command"] == "qfi-scan"
    assert meta["schema_version"] == 1
    assert meta["config_hash"] == json.loads(read(out_b + ".meta.json"))["config_hash"]
    assert set(meta["versions"]) >= {"phasetherm", "python", "numpy"}
    assert meta["seeds"]["points"] == {}  # non-sampling model
    assert len(meta["points"]) == 2


def test_cli_flags_override_config_file(tmp_path):
    out = str(tmp_path / "o.csv")
    cfg = write_config(tmp_path, model="exact", L=4, beta_grid=[0.25],
                       radii=[0.0])
    assert run_main(["qfi-scan", "--config", cfg, "--beta-grid", "0.5",
                     "--radii", "1.0", "--out", out]) == 0
    rows = read(out).strip().split("\n")[1:]
    assert len(rows) == 1
    bb, n = rows[0].split(",")[:2]
    assert float(bb) == 0.5 and int(n) == 5


def test_json_format_dataset(tmp_path):
    out = str(tmp_path / "trace.json")
    cfg = write_config(tmp_path, model="cw", beta_grid=[0.0], out=out,
                       format="json")
    assert run_main(["fid", "--config", cfg]) == 0
    body = json.loads(read(out))
    assert body["columns"] == ["beta_over_beta_c", "t", "fid", "abs_r"]
    assert body["rows"] and all(len(row) == 4 for row in body["rows"])
    assert body["extras"]["decay_times"]


def test_fid_reports_gaussian_decay_time(tmp_path):
    # free spins: |r| = exp(-t^2 g^2 N / 2), so the 1/e time of |r|^2
    # is 1/(g sqrt(N)) = 0.5 at g = 0.1, N = 400
    out = str(tmp_path / "f.csv")
    cfg = write_config(tmp_path, model="cw", beta_grid=[0.0], out=out)
    assert run_main(["fid", "--config", cfg]) == 0
    meta = json.loads(read(out + ".meta.json"))
    (entry,) = meta["decay_times"]
    assert entry["decay_time"] == pytest.approx(0.5, rel=0.01)


def test_fid_flags_trace_with_no_decay(tmp_path):
    out = str(tmp_path / "nd.csv")
    cfg = write_config(tmp_path, model="exact", L=4, beta_grid=[0.3],
                       radii=[1.0], t_grid=[0.0, 0.005, 0.01], out=out)
    assert run_main(["fid", "--config", cfg]) == 0
    meta = json.loads(read(out + ".meta.json"))
    (entry,) = meta["decay_times"]
    assert entry["decay_time"] == "inf"  # JSON-safe spelling
    assert entry["flag"] == "no_decay"


def test_negative_sector_accepted_for_finite_mean_field(tmp_path):
    out = str(tmp_path / "neg.csv")
    cfg = write_config(tmp_path, model="cw-finite", n_spins=64,
                       beta_grid=[0.5, 1.5], out=out)
    assert run_main(["qfi-scan", "--config", cfg, "--sector", "negative"]) == 0
    assert len(read(out).strip().split("\n")) == 3


def test_scaling_drops_zero_signal_points_and_refuses_small_fits(tmp_path):
    # the single-spin probe signal vanishes identically in the
    # flip-symmetric ensemble, leaving 3 of 4 points: no fit
    out = str(tmp_path / "s.csv")
    cfg = write_config(tmp_path, model="exact", L=4, beta_grid=[0.25],
                       radii=[0.0, 1.0, 1.5, 2.0], out=out)
    assert run_main(["scaling", "--config", cfg]) == 0
    meta = json.loads(read(out + ".meta.json"))
    (entry,) = meta["slopes"]
    (dropped,) = entry["dropped"]
    assert dropped["n"] == 1
    assert dropped["reason"] == "F_opt consistent with zero"
    assert abs(dropped["f_opt"]) < 1e-18  # pure rounding residue
    assert entry["slope"] == "nan"
    assert "fewer than 4" in entry["note"]
    header = read(out).strip().split("\n")[0]
    assert header == "beta_over_beta_c,n,f_opt,f_opt_se"


def test_fit_slopes_recovers_power_law():
    rows = [(1.0, n, 2.0 * n ** 0.8, 0.01) for n in (5, 9, 13, 21)]
    rows.append((1.0, 1, 0.0, 0.0))
    (entry,) = cli._fit_slopes(rows)
    assert entry["slope"] == pytest.approx(0.8, abs=1e-12)
    assert entry["slope_se"] == pytest.approx(0.0, abs=1e-9)
    assert [d["n"] for d in entry["dropped"]] == [1]
    # a point below twice its own error is also excluded
    rows = [(2.0, n, 2.0 * n ** 0.8, 0.01) for n in (5, 9, 13)]
    rows.append((2.0, 21, 0.05, 0.2))
    (entry,) = cli._fit_slopes(rows)
    assert math.isnan(entry["slope"])


# ---------------------------------------------------------------------------
# Sampling scans: determinism, interruption, resume cache
# ---------------------------------------------------------------------------

MC_SAMPLER = {"sweeps": 20_000, "seed": 9, "algorithm": "metropolis"}


def mc_config(tmp_path, out, **kw):
    kw.setdefault("model", "mc")
    kw.setdefault("L", 4)
    kw.setdefault("beta_grid", [0.25, 0.5])
    kw.setdefault("radii", [1.0])
    kw.setdefault("sampler", MC_SAMPLER)
    return write_config(tmp_path, out=out, **kw)


def test_sampled_scan_is_deterministic(tmp_path):
    out_a, out_b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    assert run_main(["qfi-scan", "--config",
                     mc_config(tmp_path, out_a, name="a.json")]) == 0
    assert run_main(["qfi-scan", "--config",
                     mc_config(tmp_path, out_b, name="b.json")]) == 0
    assert read(out_a).split("\n")[1:] == read(out_b).split("\n")[1:]
    meta = json.loads(read(out_a + ".meta.json"))
    assert len(meta["seeds"]["points"]) == 2  # one derived seed per point
    assert meta["seeds"]["base"] == 9


def test_interrupted_scan_resumes_to_identical_output(tmp_path, monkeypatch):
    out_ref = str(tmp_path / "ref.csv")
    assert run_main(["qfi-scan", "--config",
                     mc_config(tmp_path, out_ref, name="ref.json")]) == 0

    out = str(tmp_path / "res.csv")
    cfg = mc_config(tmp_path, out, name="res.json")
    resume_dir = str(tmp_path / "cache")
    monkeypatch.setenv("PHASETHERM_ABORT_AFTER_POINTS", "1")
    code = run_main(["qfi-scan", "--config", cfg, "--resume", resume_dir])
    assert code == cli.EXIT_INTERRUPTED
    assert not os.path.exists(out)
    monkeypatch.delenv("PHASETHERM_ABORT_AFTER_POINTS")
    assert run_main(["qfi-scan", "--config", cfg, "--resume", resume_dir]) == 0
    assert read(out).split("\n")[1:] == read(out_ref).split("\n")[1:]
    meta = json.loads(read(out + ".meta.json"))
    assert meta["resumed"] is True
    # cached points do not rerun: only the second point reports a runtime
    assert len(meta["runtimes_s"]["points"]) == 1


def test_resume_cache_is_config_keyed(tmp_path):
    # a changed seed must not reuse cached rows
    resume_dir = str(tmp_path / "cache")
    out1 = str(tmp_path / "s1.csv")
    cfg1 = mc_config(tmp_path, out1, name="s1.json", beta_grid=[0.25])
    assert run_main(["qfi-scan", "--config", cfg1, "--resume", resume_dir]) == 0
    out2 = str(tmp_path / "s2.csv")
    cfg2 = mc_config(tmp_path, out2, name="s2.json", beta_grid=[0.25],
                     sampler=dict(MC_SAMPLER, seed=10))
    assert run_main(["qfi-scan", "--config", cfg2, "--resume", resume_dir]) == 0
    assert read(out1).split("\n")[1] != read(out2).split("\n")[1]


# ---------------------------------------------------------------------------
# Helpers: cells, JSON encoding, decay times
# ---------------------------------------------------------------------------

def test_csv_cells_round_trip_floats(tmp_path):
    values = [0.1 + 0.2, 1.0 / 3.0, 1e-17, 123456.789]
    path = str(tmp_path / "c.csv")
    cli.write_csv(path, ("x",), [(v,) for v in values])
    lines = read(path).strip().split("\n")[1:]
    assert [float(s) for s in lines] == values
    assert cli._cell(np.int64(13)) == "13"
    assert cli._cell(5) == "5"


def test_jsonable_spells_out_special_floats():
    out = cli._jsonable({"a": math.nan, "b": math.inf, "c": np.float64(2.5),
                         "d": np.arange(3), "e": (np.int32(1), 2)})
    assert out == {"a": "nan", "b": "inf", "c": 2.5, "d": [0, 1, 2], "e": [1, 2]}
    json.dumps(out)


def gaussian_series(tau=0.7, t_max=3.0, n=400, with_eval=True):
    t = np.linspace(0.0, t_max, n)
    r = np.exp(-t**2 / (2 * tau**2)).astype(np.complex128)
    zeros = np.zeros_like(t)

    def evaluate(tt):
        return complex(math.exp(-tt**2 / (2 * tau**2))), 0j

    return DecoherenceSeries(
        t_grid=t, r=r, dr_dbeta=np.zeros_like(r), se_r=zeros, se_dr=zeros,
        beta=1.0, evaluate=evaluate if with_eval else None)


def test_decay_time_bisection_and_interpolation():
    tau, flag = cli._decay_time(gaussian_series())
    assert flag == ""
    assert tau == pytest.approx(0.7, abs=1e-9)
    tau, flag = cli._decay_time(gaussian_series(with_eval=False))
    assert tau == pytest.approx(0.7, abs=2e-3)
    short = gaussian_series(t_max=0.3)
    assert cli._decay_time(short) == (math.inf, "no_decay")
