import subprocess
import sys

import numpy as np
import pytest

from wscnn import pipeline as pl
from wscnn.cli import main
from wscnn.io import read_image, read_keyvalue, read_pgm, read_rasters, write_image, write_rasters
from wscnn.scattering import load_stack

SMALL_NET = ["--set", "network.base_channels=2", "--set", "network.resblocks_per_block=1",
             "--set", "train.iterations=2", "--set", "train.batch_size=2"]


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    assert main(["phantom", "gen", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def corrupt_dir(phantom_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("corrupt")
    assert main(["corrupt", str(phantom_dir / "clean.wsc"), "--mask", str(phantom_dir / "mask.wsc"),
                 "--out", str(out)]) == 0
    return out


def test_phantom_gen(phantom_dir):
    for name in ("clean.wsc", "mask.wsc", "truth_tensor.wsc", "truth_helix.wsc", pl.MANIFEST_NAME,
                 pl.RESOLVED_CONFIG_NAME):
        assert (phantom_dir / name).is_file()
    maps, meta = read_rasters(phantom_dir / "clean.wsc")
    assert len(maps) == 13 and maps[0].shape == (96, 160)
    assert "directions" in meta


def test_corrupt_writes_every_td(corrupt_dir):
    assert len(list(corrupt_dir.glob("td_*.wsc"))) == 10
    assert len(list(corrupt_dir.glob("deform_td_*.wsc"))) == 10
    assert (corrupt_dir / "bands.csv").read_text().startswith("td,image,row,width,factor")


def test_phantom_corrupt_alias_matches(phantom_dir, corrupt_dir, tmp_path):
    assert main(["phantom", "corrupt", str(phantom_dir / "clean.wsc"), "--mask", str(phantom_dir / "mask.wsc"),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "td_03.wsc").read_bytes() == (corrupt_dir / "td_03.wsc").read_bytes()


def test_seed_changes_corruption(phantom_dir, corrupt_dir, tmp_path):
    assert main(["corrupt", str(phantom_dir / "clean.wsc"), "--mask", str(phantom_dir / "mask.wsc"),
                 "--seed", "5", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "td_03.wsc").read_bytes() != (corrupt_dir / "td_03.wsc").read_bytes()


def test_scatter_single_image(phantom_dir, tmp_path):
    maps, _ = read_rasters(phantom_dir / "clean.wsc")
    write_image(tmp_path / "b0.wsc", maps[0])
    assert main(["scatter", str(tmp_path / "b0.wsc"), "--out", str(tmp_path / "b0_stack.wsc")]) == 0
    stack = load_stack(tmp_path / "b0_stack.wsc")
    assert stack.maps.shape == (21, 24, 40)


def test_register_scatter_fuse_reconstruct(phantom_dir, corrupt_dir, tmp_path):
    mask = str(phantom_dir / "mask.wsc")
    tds = sorted(str(p) for p in corrupt_dir.glob("td_*.wsc") if not p.name.startswith("deform"))
    assert main(["register", *tds, "--mask", mask, "--reference-td", "0", "--out", str(tmp_path / "reg")]) == 0
    assert (tmp_path / "reg" / "shifts.csv").is_file()
    stacks = []
    for td in range(10):
        d = tmp_path / f"st{td}"
        assert main(["scatter", str(tmp_path / "reg" / f"td_{td:02d}.wsc"), "--out", str(d) + "/"]) == 0
        stacks.append(str(d / "img_00.wsc"))
    assert main(["fuse", *stacks, "--out", str(tmp_path / "fused.wsc")]) == 0
    assert main(["fuse", *stacks, "--reference-td", "4", "--out", str(tmp_path / "fused4.wsc")]) == 0
    a, b = load_stack(tmp_path / "fused.wsc"), load_stack(tmp_path / "fused4.wsc")
    np.testing.assert_array_equal(a.maps, b.maps)
    assert b.extra["reference_td"] == "4"
    assert main(["fuse", *stacks, "--reference-td", "10", "--out", str(tmp_path / "x.wsc")]) == 3

    # train on a stack/target dataset, then reconstruct from the fused stack
    ds = tmp_path / "ds"
    (ds / "stacks").mkdir(parents=True)
    (ds / "targets").mkdir()
    reg, _ = read_rasters(tmp_path / "reg" / "td_01.wsc")
    for i in range(3):
        (ds / "stacks" / f"s{i}.wsc").write_bytes((tmp_path / "st1" / f"img_{i:02d}.wsc").read_bytes())
        write_image(ds / "targets" / f"s{i}.wsc", reg[i])
    ck = tmp_path / "ck"
    assert main(["train", "--dataset", str(ds), "--checkpoint-dir", str(ck), *SMALL_NET]) == 0
    assert (ck / "loss.csv").read_text().splitlines()[0] == "iteration,loss"
    assert main(["reconstruct", str(tmp_path / "fused.wsc"), "--checkpoint", str(ck / "model.wsckpt"),
                 "--baseline", str(tmp_path / "up.wsc"), "--out", str(tmp_path / "recon.wsc")]) == 0
    img, _ = read_image(tmp_path / "recon.wsc")
    assert img.shape == (96, 160)
    assert read_image(tmp_path / "up.wsc")[0].shape == (96, 160)
    assert main(["train", "--dataset", str(ds), "--checkpoint-dir", str(tmp_path / "ck2"),
                 "--resume", str(ck / "model.wsckpt"), *SMALL_NET]) == 0


def test_dti_recovers_prescribed_helix(phantom_dir, tmp_path):
    assert main(["dti", str(phantom_dir / "clean.wsc"), "--mask", str(phantom_dir / "mask.wsc"),
                 "--helix-truth", str(phantom_dir / "truth_helix.wsc"), "--out", str(tmp_path)]) == 0
    summary = read_keyvalue(tmp_path / "summary.txt")
    assert float(summary["ha_mae_deg"]) < 2.0
    assert int(summary["fit_failures"]) == 0
    for name in ("fa.wsc", "md.wsc", "ha.wsc", "ta.wsc", "tensor.wsc", "voxels.csv"):
        assert (tmp_path / name).is_file()


def test_metrics_bullseye_tmip(phantom_dir, corrupt_dir, tmp_path):
    mask = str(phantom_dir / "mask.wsc")
    clean = str(phantom_dir / "clean.wsc")
    assert main(["metrics", "--test", str(corrupt_dir / "td_02.wsc"), "--reference", clean, "--mask", mask,
                 "--out", str(tmp_path / "m.csv")]) == 0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "pair,psnr_db,ssim,snr_db" and len(lines) == 14
    assert main(["metrics", "--test", clean, "--reference", clean, "--mask", mask,
                 "--out", str(tmp_path / "same.csv")]) == 0
    assert (tmp_path / "same.csv").read_text().splitlines()[1].split(",")[1] == "inf"

    assert main(["dti", clean, "--mask", mask, "--out", str(tmp_path / "d")]) == 0
    assert main(["bullseye", str(tmp_path / "d" / "ha.wsc"), "--mask", mask, "--out", str(tmp_path / "b.csv")]) == 0
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 19
    assert main(["bullseye", str(tmp_path / "d" / "ha.wsc"), "--out", str(tmp_path / "b.csv")]) == 2

    tds = [str(corrupt_dir / f"td_{k:02d}.wsc") for k in range(3)]
    assert main(["tmip", *tds, "--out", str(tmp_path / "t.wsc")]) == 0
    t, _ = read_rasters(tmp_path / "t.wsc")
    sets = [read_rasters(p)[0] for p in tds]
    np.testing.assert_array_equal(t[5], np.maximum(np.maximum(sets[0][5], sets[1][5]), sets[2][5]))


def test_bank_dump(tmp_path):
    assert main(["bank", "dump", "--height", "32", "--width", "48", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("psi_*.pgm"))) == 20
    assert read_pgm(tmp_path / "phi.pgm").shape == (32, 48)
    assert float(read_keyvalue(tmp_path / "bank.txt")["lp_deviation"]) < 0.25


def test_pipeline_command(tmp_path, capsys):
    args = ["pipeline", "--out", str(tmp_path), "--threads", "1",
            "--set", "phantom.height=48", "--set", "phantom.width=80", "--set", "phantom.inner_radius=8",
            "--set", "phantom.outer_radius=19", "--set", "corruption.n_tds=2", "--set", "corruption.grid_spacing=16",
            "--set", "pipeline.registration_window=2", *SMALL_NET]
    assert main(args) == 0
    assert "wscnn psnr" in capsys.readouterr().out
    assert (tmp_path / pl.MANIFEST_NAME).is_file()


def test_config_file_and_print(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("train.iterations=7\n")
    assert main(["config", "--config", str(tmp_path / "c.txt"), "--seed", "3"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert "train.iterations=7" in out and "phantom.seed=3" in out


@pytest.mark.parametrize("argv,code", [
    (["config", "--set", "train.nope=1"], 2),
    (["config", "--set", "train.iterations"], 2),
    (["config", "--config", "/nonexistent/c.txt"], 3),
    (["scatter", "/nonexistent/x.wsc", "--out", "/tmp/never.wsc"], 3),
    (["reconstruct", "/nonexistent/x.wsc", "--checkpoint", "/nonexistent/m", "--out", "/tmp/never.wsc"], 3),
])
def test_exit_codes(argv, code):
    assert main(argv) == code


def test_numerical_failure_exit_code(tmp_path):
    ds = tmp_path / "ds"
    (ds / "stacks").mkdir(parents=True)
    (ds / "targets").mkdir()
    write_rasters(ds / "stacks" / "a.wsc", list(np.ones((21, 3, 5))),
                  {"kind": "feature_stack", "J": 2, "L": 10, "source_height": 12, "source_width": 20})
    write_image(ds / "targets" / "a.wsc", np.full((12, 20), np.nan))
    assert main(["train", "--dataset", str(ds), "--checkpoint-dir", str(tmp_path / "ck"), *SMALL_NET]) == 4


def test_usage_error_exits_2():
    proc = subprocess.run([sys.executable, "-m", "wscnn", "fuse"], capture_output=True)
    assert proc.returncode == 2
    proc = subprocess.run([sys.executable, "-m", "wscnn", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "pipeline" in proc.stdout
