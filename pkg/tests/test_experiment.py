import csv
import json

import pytest

from advtrack import attacks as A
from advtrack import cli
from advtrack import experiment as X

from conftest import ScriptedTracker, scripted_sequence

SMALL_RUN = """
[experiment]
tracker = siamcorr
attack = rtaa
protocol = ope
seed = 3

[dataset]
count = 2
length = 8
height = 96
width = 96

[attack]
iters = 2
"""


def _perfect_factory():
    return ScriptedTracker(scripted_sequence(120).gt_boxes)


# -- config -------------------------------------------------------------------


def test_parse_config_round_trip():
    cfg = X.parse_config(SMALL_RUN)
    assert cfg.tracker == "siamcorr" and cfg.attack == "rtaa" and cfg.seed == 3
    assert cfg.dataset.count == 2 and cfg.attack_config.iters == 2
    assert cfg.attack_config.seed == 3


@pytest.mark.parametrize("text, needle", [
    ("[experiment]\ntracker = resnet\n", "unknown tracker"),
    ("[experiment]\nattack = fgsm\n", "unknown attack"),
    ("[experiment]\nspeed = 3\n", "unknown key"),
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[attack]\nepsilon = -1\n", "epsilon"),
    ("[experiment]\njobs = two\n", "cannot parse"),
])
def test_parse_config_rejects(text, needle):
    with pytest.raises(X.ConfigError, match=needle):
        X.parse_config(text)


def test_attack_none_means_clean():
    assert X.parse_config("[experiment]\nattack = none\n").attack is None


def test_mask_target_needs_mask_tracker():
    cfg = X.ExperimentConfig(tracker="siamcorr", target="mask")
    with pytest.raises(X.ConfigError, match="masks"):
        X.check_applicable(cfg, X.make_tracker(cfg))


def test_inapplicable_attack_is_rejected_before_running():
    cfg = X.ExperimentConfig(tracker="tinyformer", attack="spark")
    with pytest.raises(A.ApplicabilityError, match="Table 1"):
        X.run_experiment(cfg)


def test_sweep_expansion():
    cfg = X.ExperimentConfig(attack="spark")
    levels = X.expand_sweep(cfg, "epsilon")
    assert [c.attack_config.epsilon for c in levels] == [2.55, 5.1, 10.2, 20.4, 40.8]
    z = X.expand_sweep(cfg.replace(attack="iou"), "zeta", [8000, 12000])
    assert [c.attack_config.zeta for c in z] == [8000.0, 12000.0]
    assert all(c.attack_config.epsilon == 10.2 for c in z)
    with pytest.raises(X.ConfigError):
        X.expand_sweep(cfg.replace(attack=None), "epsilon")
    with pytest.raises(X.ConfigError):
        X.expand_sweep(cfg, "alpha")


# -- runs with a scripted tracker --------------------------------------------


def test_clean_perfect_tracker_anchor_protocol():
    seqs = [scripted_sequence(120, name="a"), scripted_sequence(120, name="b")]
    cfg = X.ExperimentConfig(protocol="anchor")
    rep = X.run_experiment(cfg, _perfect_factory, seqs)
    agg = rep.aggregate["clean"]
    assert (agg["eao"], agg["accuracy"], agg["robustness"]) == (1.0, 1.0, 1.0)
    assert rep.aggregate["attack"] is None and rep.config["horizon"] == 120


def test_clean_perfect_tracker_ope():
    rep = X.run_experiment(X.ExperimentConfig(), _perfect_factory, [scripted_sequence(30)])
    assert rep.aggregate["clean"]["auc"] == pytest.approx(20 / 21)
    assert len(rep.curves["clean"]["success"]) == 21


def test_timeout_marks_sequences_skipped():
    cfg = X.ExperimentConfig(timeout_sec=1e-9)
    rep = X.run_experiment(cfg, _perfect_factory, [scripted_sequence(30)])
    assert rep.sequences[0]["status"] == "skipped"
    assert "timeout" in rep.sequences[0]["reason"]
    assert rep.aggregate["clean"] is None


# -- summary table ------------------------------------------------------------


def _synthetic_report(clean, attacked, tracker="STB", attack="iou", protocol="anchor"):
    cfg = X.ExperimentConfig(attack=attack, protocol=protocol).as_dict()
    cfg["tracker"] = tracker
    return X.EvaluationReport(cfg, [], {"clean": clean, "attack": attacked}, {}, {"frames": 0},
                              {}, {"timestamp": "t"})


def test_summary_row_matches_published_layout():
    rep = _synthetic_report({"eao": 0.299, "accuracy": None, "robustness": None},
                            {"eao": 0.231, "accuracy": None, "robustness": None})
    assert X.summary_rows(rep) == [("STB", "IoU", "EAO", "0.299", "0.231", "22.74")]


def test_summary_drop_blank_when_undefined():
    rep = _synthetic_report({"eao": 0.0, "accuracy": 0.5, "robustness": 1.0},
                            {"eao": 0.0, "accuracy": 0.25, "robustness": None})
    rows = {r[2]: r for r in X.summary_rows(rep)}
    assert rows["EAO"][5] == "" and rows["Accuracy"][5] == "50.00" and rows["Robustness"][4:] == ("", "")


def test_empty_report_writes_headers_only(tmp_path):
    rep = _synthetic_report(None, None)
    X.emit_report(rep, tmp_path)
    assert (tmp_path / "summary.csv").read_text() == ",".join(X.SUMMARY_HEADER) + "\n"
    assert (tmp_path / "diagnostics.csv").read_text() == ",".join(X.DIAGNOSTICS_HEADER) + "\n"


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = X.parse_config(SMALL_RUN)
    rep = X.run_experiment(cfg)
    X.emit_report(rep, out)
    return rep, out


def test_emitted_files(small_run):
    rep, out = small_run
    rows = list(csv.reader(open(out / "summary.csv")))
    assert rows[0] == list(X.SUMMARY_HEADER) and len(rows) == 1 + 6
    for _, _, _, c, a, drop in rows[1:]:
        # every printed drop is reproducible from the printed clean/attack pair
        assert drop == "%.2f" % (100 * (float(c) - float(a)) / float(c))
    success = list(csv.reader(open(out / "curves" / "siamcorr_rtaa_clean_success.csv")))
    assert success[0] == ["threshold", "value"] and len(success) == 22
    diag = list(csv.reader(open(out / "diagnostics.csv")))
    assert len(diag) == 1 + 2 * 7
    saved = json.loads((out / "report.json").read_text())
    assert saved["provenance"]["config_hash"] and len(saved["sequences"]) == 2
    assert all(len(s["checksum"]) == 64 for s in saved["sequences"])


def test_rerun_is_deterministic(small_run):
    rep, _ = small_run
    again = X.run_experiment(X.parse_config(SMALL_RUN))
    assert X.strip_timestamp(again.as_dict()) == X.strip_timestamp(rep.as_dict())


def test_parallel_matches_serial(small_run):
    rep, _ = small_run
    par = X.run_experiment(X.parse_config(SMALL_RUN).replace(jobs=2))
    a, b = X.strip_timestamp(rep.as_dict()), X.strip_timestamp(par.as_dict())
    a["config"].pop("jobs"), b["config"].pop("jobs")
    a["provenance"].pop("config_hash"), b["provenance"].pop("config_hash")
    assert a == b


def test_reaggregate_reproduces_report(small_run):
    rep, _ = small_run
    again = X.reaggregate(json.loads(X.report_json(rep)))
    assert X.report_json(again) == X.report_json(rep)


# -- CLI ----------------------------------------------------------------------


def test_cli_usage_errors_exit_one(capsys):
    assert cli.main([]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["synth"]) == 1
    assert cli.main(["run", "/nonexistent.ini"]) == 1


def test_cli_rejects_inapplicable_pair(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[experiment]\ntracker = tinyformer\nattack = spark\n")
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "Table 1" in capsys.readouterr().err


def test_cli_synth_is_reproducible(tmp_path, capsys):
    args = ["--count", "2", "--length", "3", "--height", "32", "--width", "32", "--seed", "7"]
    assert cli.main(["synth", str(tmp_path / "a"), *args]) == 0
    assert cli.main(["synth", str(tmp_path / "b"), *args]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_cli_run_and_report(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["synth", str(data), "--count", "1", "--length", "5", "--height", "80", "--width", "80"]) == 0
    capsys.readouterr()
    cfg = tmp_path / "c.ini"
    cfg.write_text(f"[experiment]\ntracker = siamcorr\nattack = spark\n[dataset]\npath = {data}\n[attack]\niters = 1\n")
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "r"), "--seed", "4"]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed[0].startswith("siamcorr,SPARK,AUC,")
    assert cli.main(["report", str(tmp_path / "r" / "report.json"), "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r2" / "summary.csv").read_text() == (tmp_path / "r" / "summary.csv").read_text()


def test_cli_gradcheck_single_op(capsys):
    assert cli.main(["gradcheck", "--op", "softmax_rows", "--seeds", "2"]) == 0
    assert "1/1 ops pass" in capsys.readouterr().out
    assert cli.main(["gradcheck", "--op", "nope"]) == 1


def test_cli_sweep(tmp_path, capsys):
    cfg = tmp_path / "s.ini"
    cfg.write_text("[experiment]\nattack = iou\n[dataset]\ncount = 1\nlength = 4\n")
    assert cli.main(["sweep", str(cfg), "--param", "zeta", "--values", "8000,12000",
                     "--out", str(tmp_path / "sw")]) == 0
    rows = list(csv.reader(open(tmp_path / "sw" / "sweep.csv")))
    assert {r[1] for r in rows[1:]} == {"8000", "12000"}
    assert (tmp_path / "sw" / "zeta_8000" / "report.json").exists()


def test_comparison_shares_the_clean_pass():
    cfg = X.parse_config(SMALL_RUN)
    reps = X.run_comparison(cfg, ["rtaa", "iou"])
    assert [r.attack for r in reps] == ["rtaa", "iou"]
    assert reps[0].aggregate["clean"] == reps[1].aggregate["clean"]
    single = X.run_experiment(cfg)
    assert X.strip_timestamp(reps[0].as_dict())["aggregate"] == X.strip_timestamp(single.as_dict())["aggregate"]
    with pytest.raises(A.ApplicabilityError):
        X.run_comparison(cfg.replace(tracker="tinyformer"), ["iou", "rtaa"])
