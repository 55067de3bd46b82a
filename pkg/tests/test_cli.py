import json

import numpy as np
import pytest

from stainnorm import conventional as conv
from stainnorm.cli import main
from stainnorm.image import from_float, load_image, save_image, to_float
from stainnorm.lut import apply_lut, bake_lut
from stainnorm.metrics import psnr, ssim_rgb, ssim_source
from stainnorm.pixelnet import PixelNetConfig, forward, init, load_checkpoint, save_checkpoint


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(out), "--n-train", "4", "--n-val", "2", "--size", "64", "--teacher", "gamma:1.4,0.9,1.1", "--seed", "7"]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, dataset):
    path = tmp_path_factory.mktemp("ckpt") / "c.json"
    assert main(["train", "--manifest", str(dataset / "manifest.jsonl"), "--out", str(path), "--epochs", "3", "--batch-size", "2"]) == 0
    return path


def test_synth_counts(tmp_path):
    out = tmp_path / "d"
    assert main(["synth", "--out", str(out), "--n-train", "20", "--n-val", "5", "--size", "64", "--teacher", "gamma:1.4,0.9,1.1", "--seed", "7"]) == 0
    assert len((out / "manifest.jsonl").read_text().splitlines()) == 25
    assert len(list((out / "source").iterdir())) == 25
    assert len(list((out / "target").iterdir())) == 25


def test_synth_missing_out(capsys):
    assert main(["synth", "--n-train", "2"]) == 2
    assert "usage" in capsys.readouterr().err


def test_synth_deterministic(tmp_path):
    args = ["--n-train", "2", "--n-val", "1", "--size", "64", "--teacher", "linear:0.9,0,0,0,0.9,0,0,0,0.9,5,5,5", "--seed", "3"]
    assert main(["synth", "--out", str(tmp_path / "a")] + args) == 0
    assert main(["synth", "--out", str(tmp_path / "b")] + args) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_synth_bad_teacher(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--teacher", "sepia"]) == 1


def test_synth_with_stain_model_teacher(tmp_path, dataset):
    assert main(["fit", "--method", "macenko", "--image", str(dataset / "source" / "0000.png"), "--out", str(tmp_path / "m.json")]) == 0
    out = tmp_path / "d"
    assert main(["synth", "--out", str(out), "--n-train", "1", "--n-val", "0", "--size", "64", "--teacher-model", str(tmp_path / "m.json")]) == 0
    model = conv.load_model(tmp_path / "m.json")
    src = load_image(out / "source" / "0000.png")
    assert np.array_equal(load_image(out / "target" / "0000.png"), conv.normalize_with("macenko", src, model))


def test_fit_macenko_schema_and_repeat(tmp_path, dataset):
    image = str(dataset / "target" / "0000.png")
    for name in ("a.json", "b.json"):
        assert main(["fit", "--method", "macenko", "--image", image, "--out", str(tmp_path / name)]) == 0
    doc = json.loads((tmp_path / "a.json").read_text())
    assert doc["method"] == "macenko"
    assert np.asarray(doc["stain_matrix"]).shape == (3, 2)
    assert len(doc["max_concentrations"]) == 2
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_fit_white_image(tmp_path, capsys):
    save_image(np.full((32, 32, 3), 255, np.uint8), tmp_path / "w.png")
    assert main(["fit", "--method", "macenko", "--image", str(tmp_path / "w.png"), "--out", str(tmp_path / "m.json")]) == 1
    assert "insufficient tissue pixels" in capsys.readouterr().err


def test_fit_missing_image(tmp_path):
    assert main(["fit", "--method", "reinhard", "--image", str(tmp_path / "none.png"), "--out", str(tmp_path / "m.json")]) == 1


def test_unknown_method(tmp_path, dataset):
    assert main(["normalize", "--method", "cyclegan", "--in", str(dataset / "source"), "--out", str(tmp_path)]) == 2


def test_normalize_pixelnet_and_lut(tmp_path, dataset, checkpoint):
    src_dir = dataset / "source"
    assert main(["normalize", "--method", "pixelnet", "--checkpoint", str(checkpoint), "--in", str(src_dir), "--out", str(tmp_path / "n1")]) == 0
    names = sorted(p.name for p in src_dir.iterdir())
    assert sorted(p.name for p in (tmp_path / "n1").iterdir()) == names
    net = load_checkpoint(checkpoint)
    first = load_image(src_dir / names[0])
    assert np.array_equal(load_image(tmp_path / "n1" / names[0]), from_float(forward(net, to_float(first))))

    lut_path = tmp_path / "f.lut3d"
    assert main(["bake-lut", "--checkpoint", str(checkpoint), "--size", "256", "--out", str(lut_path)]) == 0
    assert lut_path.stat().st_size == 16 + 4 + 256**3 * 3
    assert main(["normalize", "--method", "lut", "--lut", str(lut_path), "--in", str(src_dir), "--out", str(tmp_path / "n2"), "--threads", "2"]) == 0
    assert tree_bytes(tmp_path / "n1") == tree_bytes(tmp_path / "n2")


def test_normalize_baselines(tmp_path, dataset):
    ref = dataset / "target" / "0000.png"
    for method in conv.METHODS:
        out = tmp_path / method
        assert main(["normalize", "--method", method, "--reference", str(ref), "--in", str(dataset / "source"), "--out", str(out)]) == 0
        assert len(list(out.iterdir())) == 6
    assert main(["fit", "--method", "reinhard", "--image", str(ref), "--out", str(tmp_path / "r.json")]) == 0
    assert main(["normalize", "--method", "reinhard", "--model", str(tmp_path / "r.json"), "--in", str(dataset / "source"), "--out", str(tmp_path / "r2")]) == 0
    assert tree_bytes(tmp_path / "r2") == tree_bytes(tmp_path / "reinhard")


def test_normalize_needs_model(tmp_path, dataset):
    assert main(["normalize", "--method", "macenko", "--in", str(dataset / "source"), "--out", str(tmp_path)]) == 2
    assert main(["normalize", "--method", "pixelnet", "--in", str(dataset / "source"), "--out", str(tmp_path)]) == 2


def test_bake_lut_bad_size(tmp_path, checkpoint):
    assert main(["bake-lut", "--checkpoint", str(checkpoint), "--size", "257", "--out", str(tmp_path / "f")]) == 2


def test_bake_lut_spatial_checkpoint(tmp_path):
    save_checkpoint(init(PixelNetConfig.from_counts(2, 1), 0), tmp_path / "c.json")
    assert main(["bake-lut", "--checkpoint", str(tmp_path / "c.json"), "--size", "33", "--out", str(tmp_path / "f")]) == 1


def test_bake_lut_matches_direct(tmp_path, checkpoint, rng):
    net = load_checkpoint(checkpoint)
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    assert np.array_equal(apply_lut(bake_lut(net, 256), img), from_float(forward(net, to_float(img))))


def test_train_writes_report(tmp_path, dataset, capsys):
    ckpt, report = tmp_path / "c.json", tmp_path / "r.csv"
    args = ["train", "--manifest", str(dataset / "manifest.jsonl"), "--out", str(ckpt), "--report", str(report), "--epochs", "2", "--variant", "1x1:2,3x3:1", "--crop", "32"]
    assert main(args) == 0
    assert "best epoch" in capsys.readouterr().out
    assert report.read_text().splitlines()[0] == "epoch,loss,lr,psnr"
    assert [l.kernel for l in load_checkpoint(ckpt).config.layers] == [1, 1, 3]


def test_train_defaults_mirror_training_recipe():
    from stainnorm.cli import build_parser

    args = build_parser().parse_args(["train", "--manifest", "m", "--out", "c"])
    assert (args.lr, args.batch_size, args.epochs, args.momentum) == (0.01, 10, 300, 0.9)


def test_config_file_and_flag_precedence(tmp_path, dataset):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# training run\nmanifest = {dataset / 'manifest.jsonl'}\nepochs = 3\nbatch-size = 2\n")
    report = tmp_path / "r.csv"
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "c.json"), "--report", str(report), "--epochs", "2"]) == 0
    assert len(report.read_text().splitlines()) == 1 + 2
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "c.json"), "--report", str(report)]) == 0
    assert len(report.read_text().splitlines()) == 1 + 3


def test_config_file_unknown_key(tmp_path, dataset):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("colour = red\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2


def test_eval_report(tmp_path, dataset):
    out = tmp_path / "e.csv"
    args = ["eval", "--normalized", str(dataset / "target"), "--target", str(dataset / "target"), "--source", str(dataset / "source"), "--method", "teacher", "--out", str(out)]
    assert main(args) == 0
    header, row = out.read_text().splitlines()
    assert header == "method,ssim_target,psnr_target,ssim_source,fps"
    fields = row.split(",")
    assert fields[:3] == ["teacher", "1.0", "inf"]
    n = load_image(dataset / "target" / "0000.png")
    s = load_image(dataset / "source" / "0000.png")
    assert main(["eval", "--normalized", str(dataset / "source"), "--target", str(dataset / "target"), "--source", str(dataset / "source"), "--out", str(tmp_path / "e.json")]) == 0
    doc = json.loads((tmp_path / "e.json").read_text())[0]
    srcs = [load_image(p) for p in sorted((dataset / "source").iterdir())]
    tgts = [load_image(p) for p in sorted((dataset / "target").iterdir())]
    assert doc["ssim_target"] == pytest.approx(np.mean([ssim_rgb(a, b) for a, b in zip(srcs, tgts)]), abs=1e-15)
    assert doc["psnr_target"] == pytest.approx(np.mean([psnr(a, b) for a, b in zip(srcs, tgts)]), abs=1e-12)
    assert ssim_source(n, s) <= 1.0


def test_eval_missing_pair(tmp_path, dataset):
    (tmp_path / "t").mkdir()
    assert main(["eval", "--normalized", str(dataset / "target"), "--target", str(tmp_path / "t"), "--source", str(dataset / "source")]) == 1


def test_bench(tmp_path, checkpoint, capsys):
    csv_path = tmp_path / "b.csv"
    args = ["bench", "--checkpoint", str(checkpoint), "--n-images", "2", "--size", "64", "--warmup", "1", "--reps", "1", "--csv", str(csv_path), "--threads", "2"]
    assert main(args) == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "method,threads,precision,fit_ms,fps,p50_ms,p95_ms"
    assert len(lines) == 1 + 2 * 5
    assert {l.split(",")[1] for l in lines[1:]} == {"1", "2"}
    assert "Methods" in capsys.readouterr().out


def test_bench_bad_method():
    assert main(["bench", "--methods", "pixelnet,stylegan"]) == 2


def test_refsens(tmp_path, dataset, capsys):
    ref = str(dataset / "target" / "0000.png")
    other = str(dataset / "source" / "0001.png")
    out = tmp_path / "r.json"
    assert main(["refsens", "--source", str(dataset / "source" / "0000.png"), "--references", ref, ref, other, "--out", str(out)]) == 0
    table = np.array([[float(v) for v in row] for row in json.loads(out.read_text())["psnr"]])
    assert table[0, 1] == np.inf
    assert np.array_equal(table, table.T)
    assert np.isfinite(table[0, 2])
