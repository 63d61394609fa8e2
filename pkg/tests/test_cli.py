import numpy as np
import pytest

from pwcf import cli, dataio, hamming
from pwcf.optimizer import load_model

SMALL = ["--classes", "4", "--dim", "12", "--n-source", "80", "--n-target", "80",
         "--nuisance-dim", "4", "--nuisance-std", "1", "--translation", "4"]


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys is not None else None
    return code, out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Synthesized data plus one trained model shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "data"), "--seed", "3"] + SMALL) == 0
    cfg = root / "run.kv"
    cfg.write_text("r = 8\nk = 5\nmax_iters = 6\n", encoding="utf-8")
    assert cli.main(["train", "--data", str(root / "data" / "manifest.kv"),
                     "--config", str(cfg), "--out", str(root / "model")]) == 0
    return root


def test_synth_files(workdir):
    names = sorted(p.name for p in (workdir / "data").iterdir())
    assert names == ["manifest.kv", "source.pwf", "source_labels.txt", "target.pwf",
                     "target_labels.txt"]


def test_synth_byte_identical(tmp_path):
    for sub in ("a", "b"):
        assert cli.main(["synth", "--out", str(tmp_path / sub), "--seed", "9"] + SMALL) == 0
    for name in ("source.pwf", "target.pwf", "source_labels.txt", "manifest.kv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest_counts_match_labels(workdir):
    kv = dataio.read_kv(workdir / "data" / "manifest.kv")
    for side in ("source", "target"):
        labels = np.loadtxt(workdir / "data" / f"{side}_labels.txt", dtype=int)
        counts = [int(v) for v in kv[f"{side}_class_counts"].split(",")]
        assert counts == np.bincount(labels, minlength=4).tolist()


def test_train_outputs_and_trace(workdir):
    out = workdir / "model"
    trace = cli.read_trace(out / "trace.txt")
    assert 1 <= trace.shape[0] <= 7
    np.testing.assert_array_equal(trace[:, 0], np.arange(trace.shape[0]))
    cfg = dataio.RunConfig.from_mapping(dataio.read_kv(out / "config.kv"))
    tri, q, cls, reg, man, total = trace[:, 1:].T
    recombined = tri + cfg.theta * q + cfg.lambda1 * cls + cfg.lambda2 * reg + cfg.lambda3 * man
    np.testing.assert_allclose(total, recombined, rtol=1e-12)
    model = load_model(out / "model.pwm")
    assert model.bits == 8
    codes = hamming.load_codes(out / "source_codes.pwb")
    assert codes.r == 8 and codes.n == 80


def test_train_ablate_manifold_zero(workdir, tmp_path):
    assert cli.main(["train", "--data", str(workdir / "data" / "manifest.kv"),
                     "--config", str(workdir / "run.kv"), "--out", str(tmp_path),
                     "--ablate", "disable_manifold"]) == 0
    trace = cli.read_trace(tmp_path / "trace.txt")
    assert np.all(trace[:, cli.TRACE_COLUMNS.index("manifold")] == 0)


def test_train_emits_full_config(workdir, tmp_path, capsys):
    code, out = run(["train", "--data", workdir / "data" / "manifest.kv", "--bits", "4",
                     "--config", workdir / "run.kv", "--out", tmp_path], capsys)
    assert code == 0
    text = out.out
    assert text.startswith("# train\n")
    for key in ("theta = 100", "lambda1 = 1", "lambda3 = 10000", "r = 4", "seed = 0"):
        assert key in text.replace(".0\n", "\n")


def test_train_deterministic(workdir, tmp_path):
    for sub in ("a", "b"):
        assert cli.main(["train", "--data", str(workdir / "data" / "manifest.kv"),
                         "--config", str(workdir / "run.kv"), "--seed", "4",
                         "--out", str(tmp_path / sub)]) == 0
    for name in ("model.pwm", "trace.txt", "source_codes.pwb", "target_codes.pwb"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_baseline_train(workdir, tmp_path):
    assert cli.main(["train", "--data", str(workdir / "data" / "manifest.kv"), "--bits", "8",
                     "--method", "lsh", "--out", str(tmp_path)]) == 0
    assert load_model(tmp_path / "model.pwm").kind == "lsh"
    assert not (tmp_path / "trace.txt").exists()


def test_encode_and_retrieve(workdir, tmp_path):
    model_dir = workdir / "model"
    assert cli.main(["encode", "--model", str(model_dir / "model.pwm"),
                     "--data", str(workdir / "data" / "target.pwf"),
                     "--out", str(tmp_path / "t.pwb")]) == 0
    fresh = hamming.load_codes(tmp_path / "t.pwb")
    model = load_model(model_dir / "model.pwm")
    pair = dataio.load_manifest(workdir / "data" / "manifest.kv")
    np.testing.assert_array_equal(fresh.words, model.encode(pair.target).words)
    assert cli.main(["retrieve", "--query-codes", str(tmp_path / "t.pwb"),
                     "--db-codes", str(model_dir / "source_codes.pwb"), "--top", "3",
                     "--out", str(tmp_path / "rank.txt")]) == 0
    lines = (tmp_path / "rank.txt").read_text().splitlines()
    assert len(lines) == 80
    q, rest = lines[0].split("\t")
    assert q == "0" and len(rest.split()) == 3
    dists = [int(item.split(":")[1]) for item in rest.split()]
    assert dists == sorted(dists)


def read_report(path):
    return dataio.read_kv(path)


def test_eval_one_trial(workdir, tmp_path):
    assert cli.main(["eval", "--model", str(workdir / "model" / "model.pwm"),
                     "--data", str(workdir / "data" / "manifest.kv"), "--trials", "1",
                     "--queries", "50", "--k-grid", "1,5,10", "--out", str(tmp_path)]) == 0
    table = (tmp_path / "report.txt").read_text()
    trial_rows = table.split("trial")[1].split("\n\n")[0].strip().splitlines()[1:]
    assert len(trial_rows) == 1
    kv = read_report(tmp_path / "report.kv")
    assert kv["num_trials"] == "1" and kv["num_queries"] == "50"
    assert kv["num_database"] == "80"
    curve = np.loadtxt(tmp_path / "precision.txt")
    np.testing.assert_array_equal(curve[:, 0], [1, 5, 10])
    assert np.loadtxt(tmp_path / "recall.txt").shape == (3, 2)


def test_eval_protocols_and_mean(workdir, tmp_path):
    before = (workdir / "model" / "model.pwm").read_bytes()
    for protocol in ("cross", "single"):
        assert cli.main(["eval", "--model", str(workdir / "model" / "model.pwm"),
                         "--data", str(workdir / "data" / "manifest.kv"), "--trials", "3",
                         "--queries", "30", "--protocol", protocol,
                         "--out", str(tmp_path / protocol)]) == 0
    assert (workdir / "model" / "model.pwm").read_bytes() == before
    single = read_report(tmp_path / "single" / "report.kv")
    assert single["num_database"] == "50"
    cross = read_report(tmp_path / "cross" / "report.kv")
    trials = [float(cross[f"trial_{i}_map"]) for i in range(3)]
    assert float(cross["mean"]) == pytest.approx(np.mean(trials), abs=1e-9)
    # the text table carries the same per-trial rows
    table = (tmp_path / "cross" / "report.txt").read_text().splitlines()
    rows = [float(line.split()[1]) for line in table if line[:1].isdigit() and
            len(line.split()) == 2 and "." in line.split()[1]][:3]
    np.testing.assert_allclose(rows, trials, atol=1e-6)


def test_ablate_runs(workdir, tmp_path, capsys):
    code, out = run(["ablate", "--data", workdir / "data" / "manifest.kv",
                     "--config", workdir / "run.kv", "--ablate", "M,PWCF-H",
                     "--trials", "1", "--queries", "30", "--baselines",
                     "--out", tmp_path], capsys)
    assert code == 0
    kv = read_report(tmp_path / "ablation.kv")
    assert set(kv) == {f"{n}_{s}" for n in ("pwcf", "pwcf_m", "pwcf_h", "lsh", "pca_sign")
                       for s in ("map", "std")}
    assert "variants = PWCF-M,PWCF-H" in out.out


def test_error_prefix_and_exit_codes(workdir, tmp_path, capsys):
    code, out = run(["train", "--data", tmp_path / "missing.kv", "--out", tmp_path], capsys)
    assert code == 1
    assert out.err.startswith("pwcf: error: ") and "missing.kv" in out.err

    other = tmp_path / "wide"
    assert cli.main(["synth", "--out", str(other), "--dim", "16", "--classes", "4",
                     "--n-source", "40", "--n-target", "40", "--nuisance-dim", "0"]) == 0
    capsys.readouterr()
    code, out = run(["eval", "--model", workdir / "model" / "model.pwm", "--data",
                     other / "manifest.kv", "--trials", "1", "--queries", "5",
                     "--out", tmp_path / "r"], capsys)
    assert code == 1
    assert out.err.startswith("pwcf: error: ")
    assert "d=12" in out.err and "d=16" in out.err

    code, out = run(["eval", "--model", workdir / "model" / "model.pwm", "--data",
                     workdir / "data" / "manifest.kv", "--bits", "16",
                     "--out", tmp_path / "r"], capsys)
    assert code == 1 and "--bits 16" in out.err

    code, out = run(["train", "--data", workdir / "data" / "manifest.kv",
                     "--ablate", "bogus", "--out", tmp_path], capsys)
    assert code == 1 and "unknown ablation" in out.err


def test_unknown_flags_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--nope"])
    assert exc.value.code != 0
    assert "pwcf: error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["eval", "--protocol", "both"])


def test_seed_precedence(monkeypatch, tmp_path):
    monkeypatch.setenv("PWCF_SEED", "17")
    assert cli.resolve_seed(None) == 17
    assert cli.resolve_seed(None, 5) == 5
    assert cli.resolve_seed(2, 5) == 2
    monkeypatch.setenv("PWCF_SEED", "x")
    with pytest.raises(cli.CliError, match="PWCF_SEED"):
        cli.resolve_seed(None)
    monkeypatch.delenv("PWCF_SEED")
    assert cli.resolve_seed(None) == 0


def test_seed_env_changes_synth(monkeypatch, tmp_path):
    monkeypatch.setenv("PWCF_SEED", "11")
    assert cli.main(["synth", "--out", str(tmp_path / "env")] + SMALL) == 0
    assert cli.main(["synth", "--out", str(tmp_path / "flag"), "--seed", "11"] + SMALL) == 0
    assert cli.main(["synth", "--out", str(tmp_path / "other"), "--seed", "12"] + SMALL) == 0
    env = (tmp_path / "env" / "source.pwf").read_bytes()
    assert env == (tmp_path / "flag" / "source.pwf").read_bytes()
    assert env != (tmp_path / "other" / "source.pwf").read_bytes()


def test_parse_helpers():
    assert cli.parse_int_list("1, 5,10") == (1, 5, 10)
    assert cli.parse_ablations("PWCF-T,q,disable_hfon,T") == [
        "disable_triplet", "disable_quantization", "disable_hfon"]
