import subprocess
import sys

import pytest

from dilres.cli import main


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "d"), "--size", "32", "--per-class", "3",
                 "--train-fraction", "0.67"]) == 0
    return root


def _train(root, name, *extra):
    out = root / name
    code = main(["train", "--arch", "18", "--base-width", "2", "--data", str(root / "d" / "train.csv"),
                 "--out", str(out), "--epochs", "1", "--batch-size", "8", "--seed", "3", *extra])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def models(corpus):
    return _train(corpus, "normal.drn"), _train(corpus, "dilated.drn", "--dilated")


def test_synth_writes_split(corpus):
    d = corpus / "d"
    assert len(list(d.glob("*.ppm"))) == 24
    assert (d / "train.csv").read_text().startswith("path,label\n")
    assert (d / "test.csv").exists()


def test_train_is_deterministic(corpus, models):
    again = _train(corpus, "normal2.drn")
    assert again.read_bytes() == models[0].read_bytes()
    assert (corpus / "normal2.history.csv").read_bytes() == (corpus / "normal.history.csv").read_bytes()
    header = (corpus / "normal.history.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_accuracy,val_macro_f1"


def test_eval_prints_report(corpus, models, capsys):
    assert main(["eval", "--model", str(models[0]), "--data", str(corpus / "d" / "test.csv"),
                 "--out", str(corpus / "ev")]) == 0
    out = capsys.readouterr().out
    assert "cataract" in out and "accuracy" in out
    assert (corpus / "ev" / "report.csv").read_text().startswith("class,precision,recall,f1,support")


def test_compare_self_has_zero_delta(corpus, models, capsys):
    assert main(["compare", "--normal", str(models[0]), "--dilated", str(models[0]),
                 "--data", str(corpus / "d" / "test.csv"), "--out", str(corpus / "cmp")]) == 0
    lines = (corpus / "cmp" / "compare.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["accuracy", "macro_f1", "weighted_f1", "params"]
    for line in lines[1:]:
        assert float(line.split(",")[-1]) == 0.0
    assert "params" in capsys.readouterr().out


def test_compare_normal_and_dilated_share_params(corpus, models):
    assert main(["compare", "--normal", str(models[0]), "--dilated", str(models[1]),
                 "--data", str(corpus / "d" / "test.csv"), "--out", str(corpus / "cmp2")]) == 0
    params = (corpus / "cmp2" / "compare.csv").read_text().splitlines()[-1].split(",")
    assert params[0] == "params" and params[1] == params[2]


@pytest.mark.parametrize("method", ["gradcam", "rise", "lime", "activation"])
def test_explain_is_deterministic(corpus, models, method):
    image = corpus / "d" / "img_2_0000.ppm"
    extra = {"rise": ["--masks", "40", "--cells", "3"], "lime": ["--samples", "40"]}.get(method, [])
    outs = []
    for tag in ("a", "b"):
        out = corpus / f"x_{method}_{tag}"
        assert main(["explain", "--model", str(models[1]), "--image", str(image), "--class", "2",
                     "--method", method, "--out", str(out), "--seed", "5", *extra]) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    assert f"img_2_0000.{method}.2.pgm" in names and f"img_2_0000.{method}.2.ppm" in names
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    if method == "lime":
        csv = (outs[0] / "img_2_0000.lime.2.weights.csv").read_text().splitlines()
        assert csv[0] == "segment,row,col,weight" and len(csv) == 17


def test_explain_accepts_class_name(corpus, models):
    assert main(["explain", "--model", str(models[0]), "--image", str(corpus / "d" / "img_0_0000.ppm"),
                 "--class", "cataract", "--method", "gradcam", "--out", str(corpus / "xn")]) == 0
    assert (corpus / "xn" / "img_0_0000.gradcam.1.pgm").exists()


def test_rf_report(capsys):
    assert main(["rf-report", "--arch", "18", "--dilated"]) == 0
    out = capsys.readouterr().out
    assert "normal 7x7" in out and "dilated 14x14" in out
    stage4 = [l for l in out.splitlines() if l.startswith("stage4.0.conv1")]
    assert stage4 and stage4[0].split()[4] == "7"


def test_config_supplies_defaults(corpus, capsys, tmp_path):
    cfg = tmp_path / "r.cfg"
    cfg.write_text("# geometry only\narch = 34\ninput=64\n")
    assert main(["rf-report", "--config", str(cfg)]) == 0
    assert "normal 2x2" in capsys.readouterr().out
    cfg.write_text("bogus=1\n")
    assert main(["rf-report", "--config", str(cfg)]) == 2


def test_error_exit_codes(corpus, models, tmp_path, capsys):
    assert main(["rf-report", "--arch", "99"]) == 2
    bad = tmp_path / "bad.drn"
    bad.write_bytes(b"DRN1" + b"\x00" * 8)
    test_csv = str(corpus / "d" / "test.csv")
    assert main(["eval", "--model", str(bad), "--data", test_csv]) == 3
    empty = tmp_path / "empty.csv"
    empty.write_text("path,label\n")
    assert main(["eval", "--model", str(models[0]), "--data", str(empty)]) == 2
    assert main(["eval", "--model", str(tmp_path / "missing.drn"), "--data", test_csv]) == 2
    image = str(corpus / "d" / "img_0_0000.ppm")
    assert main(["explain", "--model", str(models[0]), "--image", image, "--class", "0",
                 "--method", "shap", "--out", str(tmp_path)]) == 2
    assert main(["explain", "--model", str(models[0]), "--image", image, "--class", "9",
                 "--method", "gradcam", "--out", str(tmp_path)]) == 2
    broken = tmp_path / "broken.csv"
    broken.write_text("path,label\nx.ppm,zz\n")
    assert main(["eval", "--model", str(models[0]), "--data", str(broken)]) == 3
    assert main([]) == 2
    capsys.readouterr()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dilres", "rf-report", "--arch", "50", "--input", "64"],
                         capture_output=True, text=True, timeout=120)
    assert res.returncode == 0 and "final feature map" in res.stdout
