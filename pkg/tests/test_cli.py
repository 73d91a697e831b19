import csv
import json

import pytest

from spreadperc import cli
from spreadperc.errors import UsageError
from spreadperc.oracle import InequalityReport


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def small(tmp_path, name="a.csv", **kw):
    base = dict(d=3, L=1, betas=[0.2, 0.4], estimators=["chi", "phi0"], n=3000, seed=5,
                out=str(tmp_path / name))
    base.update(kw)
    return cli.make_config(None, base)


def test_beta_zero_row(tmp_path):
    cfg = small(tmp_path, betas=[0.0], estimators=["chi", "triangle", "sharp_length"], windows=[2, 4])
    rows, man = cli.run_scan(cfg, log=lambda *_: None)
    got = {r["estimator"]: r["value"] for r in rows}
    assert got["chi"] == 1.0
    assert got["triangle_2"] == got["triangle_4"] == 1.0
    assert got["sharp_length"] == 1.0
    assert man["status"] == "complete"
    header = open(cfg.out).readline().strip().split(",")
    assert tuple(header) == cli.COLUMNS


def test_rerun_identical_bytes(tmp_path):
    a = small(tmp_path, "a.csv")
    b = small(tmp_path, "b.csv")
    cli.run_scan(a, log=lambda *_: None)
    cli.run_scan(b, log=lambda *_: None)
    assert open(a.out, "rb").read() == open(b.out, "rb").read()


def test_worker_count_does_not_change_bytes(tmp_path):
    a = small(tmp_path, "a.csv", workers=1)
    b = small(tmp_path, "b.csv", workers=2)
    cli.run_scan(a, log=lambda *_: None)
    cli.run_scan(b, log=lambda *_: None)
    assert open(a.out, "rb").read() == open(b.out, "rb").read()


def test_resume_after_interrupt(tmp_path):
    full = small(tmp_path, "full.csv", betas=[0.1, 0.2, 0.3])
    cli.run_scan(full, log=lambda *_: None)
    part = small(tmp_path, "part.csv", betas=[0.1, 0.2, 0.3])

    def stop(msg):
        raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        cli.run_scan(part, log=stop)
    man = json.load(open(part.manifest_path()))
    assert man["status"] == "interrupted" and man["completed"] == [0]
    assert len(read_csv(part.out)) == 2
    part.resume = True
    seen = []
    cli.run_scan(part, log=seen.append)
    assert not any("[1/3]" in s for s in seen)
    assert open(part.out, "rb").read() == open(full.out, "rb").read()


def test_resume_rejects_changed_config(tmp_path):
    cfg = small(tmp_path)
    cli.run_scan(cfg, log=lambda *_: None)
    other = small(tmp_path, n=4000, resume=True)
    with pytest.raises(UsageError):
        cli.run_scan(other, log=lambda *_: None)


def test_config_layers(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("d: 4\nn: 10\nseed: 3\n")
    cfg = cli.make_config(cli.load_config_file(str(f)), {"n": 20, "L": None})
    assert (cfg.d, cfg.n, cfg.seed, cfg.L) == (4, 20, 3, 1)
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"kappa": 0.5}))
    assert cli.make_config(cli.load_config_file(str(j))).kappa == 0.5
    assert json.loads(json.dumps(cfg.to_dict())) == cfg.to_dict()


def test_digest_ignores_workers_and_paths():
    a = cli.make_config(None, {"workers": 1, "out": "x.csv"})
    b = cli.make_config(None, {"workers": 4, "out": "y.csv"})
    assert a.digest() == b.digest()
    assert a.digest() != cli.make_config(None, {"seed": 9}).digest()


def test_unknown_key_exit_code(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["--config", str(f), "verify", "--n-instances", "0", "--no-convolution",
                     "--out", str(tmp_path / "v.csv")]) == cli.EXIT_USAGE
    assert cli.main(["scan", "--no-such-flag"]) == cli.EXIT_USAGE
    assert cli.main(["scan", "--out", str(tmp_path / "s.csv")]) == cli.EXIT_USAGE
    assert cli.main(["scan", "--betas", "0.1", "--deltas", "0.1", "--out", str(tmp_path / "s.csv")]) == cli.EXIT_USAGE


def test_resource_exit_code(tmp_path):
    rc = cli.main(["scan", "--d", "2", "--L", "1", "--betas", "6.0", "--n", "200", "--cap", "20",
                   "--out", str(tmp_path / "s.csv")])
    assert rc == cli.EXIT_RESOURCE


def test_empty_verify_suite(tmp_path):
    out = tmp_path / "v.csv"
    rc = cli.main(["verify", "--n-instances", "0", "--no-convolution", "--out", str(out)])
    assert rc == cli.EXIT_OK
    assert read_csv(out) == []
    bundle = cli.run_verify(cli.make_config(None, {"n_instances": 0, "convolution": [], "out": str(out)}),
                            log=lambda *_: None)
    assert bundle.ok and bundle.reports == [] and bundle.instances == 0


def test_verify_small_sweep(tmp_path):
    out = tmp_path / "v.csv"
    assert cli.main(["verify", "--n-instances", "24", "--out", str(out)]) == cli.EXIT_OK
    rows = read_csv(out)
    assert rows and all(r["passed"] == "true" for r in rows)
    assert sum(r["name"] == "convolution" for r in rows) == 3


def test_verify_failure_exit_code(tmp_path, monkeypatch):
    bad = cli.VerifyBundle([InequalityReport("bk", None, 1.0, 0.5)], 1)
    monkeypatch.setattr(cli, "run_verify", lambda cfg: bad)
    assert cli.main(["verify", "--out", str(tmp_path / "v.csv")]) == cli.EXIT_FAIL


def test_coupling_table_shape(tmp_path):
    out = tmp_path / "rw.csv"
    rc = cli.main(["rw", "--rw-studies", "coupling", "--rw-d", "1", "--rw-Ls", "2", "4", "--rw-Ts", "1", "2", "4",
                   "--rw-n", "200", "--out", str(out)])
    assert rc == cli.EXIT_OK
    rows = read_csv(out)
    assert len(rows) == 6
    assert {(r["d"], r["L"], r["key"]) for r in rows} == {("1", L, f"T={T}") for L in ("2", "4") for T in (1, 2, 4)}


def test_fits_with_beta_c_shift(tmp_path):
    cfg = small(tmp_path, betas=[], beta_c=0.6, beta_c_step=0.01, deltas=[0.4, 0.2, 0.1], estimators=["chi"])
    rows, man = cli.run_scan(cfg, log=lambda *_: None)
    fits = man["fits"]
    assert set(fits) == {"chi", "chi@beta_c-step", "chi@beta_c+step"}
    assert all(f["slope"] < 0 for f in fits.values())


def test_fmt():
    assert cli.fmt(0.1) == "0.1" and cli.fmt(True) == "true" and cli.fmt(None) == ""
    assert cli.fmt((1, 2)) == "1 2"
