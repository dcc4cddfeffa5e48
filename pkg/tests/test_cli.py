import csv
import io
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from lesionseg import cli
from lesionseg.cli import CONFIG_FIELDS, RunConfig, load_config, main, parse_assignments
from lesionseg.errors import ConfigError, TrainingFault

TINY = [
    "--set", "section_size=96",
    "--set", "lesion_radius_min=6",
    "--set", "lesion_radius_max=12",
    "--set", "window=32",
    "--set", "base_width=4",
    "--set", "depth=2",
    "--set", "dilation_rates=1,2",
    "--set", "epochs_per_stage=1",
]


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["gen-data", "--out", str(out), "--sections", "4", "--seed", "2"] + TINY) == 0
    assert main(["prepare", "--out", str(out), "--seed", "2", "--neg-keep-prob", "0.2"] + TINY) == 0
    return out


# configuration


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nalpha = 0.25\n\nseed=4  # trailing\ndilation_rates=1,3\naugment=false\n")
    cfg = load_config(str(path), {"seed": 9})
    assert (cfg.alpha, cfg.seed, cfg.dilation_rates, cfg.augment) == (0.25, 9, (1, 3), False)
    assert cfg.train_config().loss_config.alpha == 0.25


def test_config_roundtrip_through_text():
    cfg = RunConfig(alpha=0.3, skip_mode="add", augment=False)
    assert RunConfig(**parse_assignments(cfg.to_text().splitlines(), "x")) == cfg


def test_unknown_and_bad_keys():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_assignments(["colour=red"], "x")
    with pytest.raises(ConfigError):
        parse_assignments(["epochs_per_stage=many"], "x")
    with pytest.raises(ConfigError):
        load_config(None, {"alpha": 2.0})


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for name, f in CONFIG_FIELDS.items():
        assert f"{name}={cli._format_value(f.default)}" in text


def test_subcommand_help_lists_keys(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    assert "stage2_lr=1e-05" in capsys.readouterr().out


# exit codes


def test_usage_errors_exit_1(tmp_path):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["sweep", "--param", "gamma", "--values", "1"]) == 1
    assert main(["sweep", "--out", str(tmp_path), "--param", "alpha", "--values", "a,b"]) == 1


def test_data_errors_exit_2(tmp_path):
    assert main(["train", "--set", "nope=1"]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["prepare", "--out", str(tmp_path)]) == 2
    assert main(["evaluate", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "x.hslb")]) == 2
    (tmp_path / "bad.csv").write_text("stage,epoch\nstage1,notanumber\n")
    assert main(["report", "--out", str(tmp_path), str(tmp_path / "bad.csv")]) == 2


def test_training_fault_exit_3(prepared, monkeypatch, tmp_path):
    def boom(*args, **kw):
        raise TrainingFault("stage1 epoch 1 batch 0: loss is nan")

    monkeypatch.setattr(cli, "stagewise_train", boom)
    manifest = str(prepared / "tiles.jsonl")
    assert main(["train", "--out", str(tmp_path), "--manifest", manifest] + TINY) == 3


# gen-data and prepare


def test_gen_data_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["gen-data", "--out", str(out), "--sections", "3", "--seed", "7"] + TINY) == 0
    assert tree_bytes(a) == tree_bytes(b)
    rows = (a / "sections.jsonl").read_text().splitlines()
    assert len(rows) == 3
    assert len({json.loads(r)["subject_id"] for r in rows}) == 3


def test_gen_data_zero_sections(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--sections", "0"]) == 0
    assert (tmp_path / "sections.jsonl").read_text() == ""


def test_prepare_keep_all(prepared, tmp_path):
    out = tmp_path / "all"
    manifest = str(prepared / "sections.jsonl")
    assert main(["prepare", "--out", str(out), "--manifest", manifest, "--neg-keep-prob", "1"] + TINY) == 0
    rows = [json.loads(r) for r in (out / "tiles.jsonl").read_text().splitlines()]
    # 96-px sections, window 32, stride 16: 5 x 5 windows each
    assert len(rows) == 4 * 25


def test_prepare_report_and_splits(prepared):
    rows = [json.loads(r) for r in (prepared / "tiles.jsonl").read_text().splitlines()]
    test_subjects = {r["subject_id"] for r in rows if r["split"] == "test"}
    fit_subjects = {r["subject_id"] for r in rows if r["split"] != "test"}
    assert test_subjects and fit_subjects and not test_subjects & fit_subjects
    assert {r["split"] for r in rows} == {"train", "valid", "test"}
    lines = (prepared / "ratio_report.txt").read_text().splitlines()
    before = float(lines[2].split()[-1])
    after = float(lines[3].split()[-1])
    assert after > before


def test_prepare_is_reproducible(prepared, tmp_path):
    out = tmp_path / "again"
    manifest = str(prepared / "sections.jsonl")
    assert main(["prepare", "--out", str(out), "--manifest", manifest, "--seed", "2", "--neg-keep-prob", "0.2"] + TINY) == 0
    assert (out / "tiles.jsonl").read_bytes() == (prepared / "tiles.jsonl").read_bytes()
    assert (out / "ratio_report.txt").read_bytes() == (prepared / "ratio_report.txt").read_bytes()


# train, evaluate, sweep, report


@pytest.fixture(scope="module")
def trained(prepared):
    assert main(["train", "--out", str(prepared), "--seed", "2", "--precision", "f32"] + TINY) == 0
    return prepared


def test_train_outputs(trained):
    t = trained / "train"
    for name in ("stage1.hslb", "stage1.json", "stage2.hslb", "stage2.json", "log.csv", "config.txt"):
        assert (t / name).exists()
    meta = json.loads((t / "stage2.json").read_text())
    assert meta["stage"] == "stage2" and meta["epoch"] == 1
    assert len((t / "log.csv").read_text().splitlines()) == 3


def test_train_is_reproducible(trained, tmp_path):
    manifest = str(trained / "tiles.jsonl")
    assert main(["train", "--out", str(tmp_path), "--manifest", manifest, "--seed", "2"] + TINY) == 0
    assert tree_bytes(tmp_path / "train") == tree_bytes(trained / "train")


def test_evaluate_twice_identical(trained, tmp_path, capsys):
    ckpt = str(trained / "train" / "stage2.hslb")
    manifest = str(trained / "tiles.jsonl")
    outputs = []
    for sub in ("a", "b"):
        assert main(["evaluate", "--out", str(tmp_path / sub), "--manifest", manifest, "--checkpoint", ckpt]) == 0
        outputs.append((tmp_path / sub / "eval_test.csv").read_bytes())
    assert outputs[0] == outputs[1]
    rows = list(csv.DictReader(io.StringIO(outputs[0].decode())))
    assert len(rows) == 1 and 0.0 <= float(rows[0]["pixel_iou"]) <= 1.0
    data = json.loads((tmp_path / "a" / "eval_test.json").read_text())
    assert data["pixel_iou"] == float(rows[0]["pixel_iou"])


def test_sweep_rows(trained, tmp_path):
    manifest = str(trained / "tiles.jsonl")
    argv = ["sweep", "--out", str(tmp_path), "--manifest", manifest, "--param", "alpha", "--values", "0,0.5,1.0"]
    assert main(argv + TINY) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "sweep_alpha.csv").read_text())))
    assert [float(r["value"]) for r in rows] == [0.0, 0.5, 1.0]
    assert set(rows[0]) == set(cli.SWEEP_COLUMNS)
    table = (tmp_path / "sweep_alpha.txt").read_text().splitlines()
    assert len(table) == 5 and "Lesion IoU" in table[0]


def test_report_svg(trained, tmp_path):
    log = trained / "train" / "log.csv"
    two = tmp_path / "two" / "log.csv"
    two.parent.mkdir()
    lines = log.read_text().splitlines()
    extra = lines[1].replace("stage1,1,", "stage1,2,")
    two.write_text("\n".join([lines[0], lines[1], extra]) + "\n")
    assert main(["report", "--out", str(tmp_path), str(two)]) == 0
    root = ET.parse(tmp_path / "report.svg").getroot()
    ns = {"s": "http://www.w3.org/2000/svg"}
    series = root.findall(".//s:g[@class='series']", ns)
    assert {s.get("data-name") for s in series} == {"stage1 loss", "stage1 pixel IoU", "stage1 lesion IoU"}
    for s in series:
        assert len(s.findall("s:circle", ns)) == 2
    assert "best epoch" in (tmp_path / "report.txt").read_text()


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "lesionseg", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen-data" in proc.stdout
