import csv
import json

import numpy as np
import pytest

from ascnet.cli import main
from ascnet.data import list_images, read_mask

TINY = [
    "--set", "network.input_size=32,32",
    "--set", "network.encoder_widths=4,8,16,32",
    "--set", "network.transition_width=64",
    "--set", "train.batch_size=8",
]


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "0", "--out", str(root / "synth"), "--n-ref", "12", "--n-query", "8", "--size", "32",
                 "--set", "synth.radius_min=3", "--set", "synth.radius_max=6"]) == 0
    assert main(["train", "--seed", "0", "--out", str(root / "run"), "--reference-dir", str(root / "synth" / "reference"),
                 "--query-dir", str(root / "synth" / "query"), "--stage1-cycles", "1", "--stage2-cycles", "1", *TINY]) == 0
    return root


def test_synth_layout(workspace):
    s = workspace / "synth"
    assert len(list_images(s / "reference")) == 12 and len(list_images(s / "query")) == 8
    assert len(list_images(s / "masks")) == 8 and (s / "config.resolved.toml").exists()


def test_synth_bit_identical(workspace, tmp_path):
    args = ["--n-ref", "12", "--n-query", "8", "--size", "32", "--set", "synth.radius_min=3", "--set", "synth.radius_max=6"]
    assert main(["synth", "--seed", "0", "--out", str(tmp_path / "a"), *args]) == 0
    a = _files(tmp_path / "a")
    b = {k: v for k, v in _files(workspace / "synth").items()}
    assert {k: v for k, v in a.items() if k != "config.resolved.toml"} == {k: v for k, v in b.items() if k != "config.resolved.toml"}


def test_train_outputs(workspace):
    run = workspace / "run"
    for f in ("cycle_01.ckpt", "cycle_02.ckpt", "final.ckpt", "losses.csv", "config.resolved.toml"):
        assert (run / f).exists()
    with open(run / "losses.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["step", "stage", "cycle", "loss_name", "value"]


def _segment(workspace, out, *extra):
    return main(["segment", "--seed", "0", "--out", str(out), "--checkpoint", str(workspace / "run" / "final.ckpt"),
                 "--query-dir", str(workspace / "synth" / "query"), *extra])


def test_segment_deterministic_and_eval(workspace, tmp_path):
    assert _segment(workspace, tmp_path / "s1") == 0
    assert _segment(workspace, tmp_path / "s2") == 0
    m1, m2 = _files(tmp_path / "s1" / "masks"), _files(tmp_path / "s2" / "masks")
    assert m1 == m2 and len(m1) == 9
    meta = json.loads((tmp_path / "s1" / "masks" / "segmentation.json").read_text())
    assert 0 <= meta["threshold_level"] <= 255 and meta["polarity"] == "bright"
    mask = read_mask(tmp_path / "s1" / "masks" / "qry00000_0000.png")
    assert set(np.unique(mask)) <= {0, 1}
    assert main(["eval", "--seed", "0", "--out", str(tmp_path / "e"), "--pred-dir", str(tmp_path / "s1" / "masks"),
                 "--gt-dir", str(workspace / "synth" / "masks")]) == 0
    rows = (tmp_path / "e" / "eval.csv").read_text().splitlines()
    assert rows[0] == "slice_id,dice" and rows[-1].startswith("mean,") and len(rows) == 10


def test_segment_fixed_threshold_and_region(workspace, tmp_path):
    assert _segment(workspace, tmp_path / "s", "--threshold", "254", "--polarity", "dark",
                    "--region-dir", str(workspace / "synth" / "regions"), "--post-process") == 0
    meta = json.loads((tmp_path / "s" / "masks" / "segmentation.json").read_text())
    assert meta == {**meta, "threshold_level": 254, "polarity": "dark", "post_processed": True}


def test_plots(workspace, tmp_path):
    _segment(workspace, tmp_path / "s")
    assert main(["plot", "histogram", str(workspace / "synth" / "query"), "--seed", "0", "--out", str(tmp_path / "p"),
                 "--name", "h.png"]) == 0
    assert main(["plot", "panel", "--seed", "0", "--out", str(tmp_path / "p"), "--seg-dir", str(tmp_path / "s"),
                 "--query-dir", str(workspace / "synth" / "query"), "--gt-dir", str(workspace / "synth" / "masks"),
                 "--name", "panel.png"]) == 0
    assert main(["plot", "disjoincy", "--seed", "0", "--out", str(tmp_path / "p"), "--seg-dir", str(tmp_path / "s"),
                 "--name", "d.png"]) == 0
    assert all((tmp_path / "p" / n).stat().st_size > 0 for n in ("h.png", "panel.png", "d.png"))


def test_resume(workspace, tmp_path):
    assert main(["train", "--seed", "0", "--out", str(tmp_path / "r"), "--reference-dir", str(workspace / "synth" / "reference"),
                 "--query-dir", str(workspace / "synth" / "query"), "--resume", str(workspace / "run" / "cycle_01.ckpt"), *TINY]) == 0
    assert (tmp_path / "r" / "cycle_02.ckpt").read_bytes() == (workspace / "run" / "cycle_02.ckpt").read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["synth", "--out", "x"],
        ["synth", "--seed", "0"],
        ["synth", "--seed", "0", "--out", "{tmp}/o", "--set", "train.unknown=1"],
        ["synth", "--seed", "0", "--out", "{tmp}/o", "--polarity", "grey"],
        ["train", "--seed", "0", "--out", "{tmp}/o", "--reference-dir", "{tmp}/missing", "--query-dir", "{tmp}/missing"],
        ["segment", "--seed", "0", "--out", "{tmp}/o", "--checkpoint", "{tmp}/none.ckpt"],
        ["segment", "--seed", "0", "--out", "{tmp}/o", "--checkpoint", "{tmp}/none.ckpt", "--threshold", "999"],
        ["synth", "--seed", "0", "--out", "{tmp}/o", "--config", "{tmp}/nope.toml"],
    ],
)
def test_validation_errors_exit_1(argv, tmp_path, capsys):
    argv = [a.replace("{tmp}", str(tmp_path)) for a in argv]
    with pytest.raises(SystemExit) as exc:
        raise SystemExit(main(argv))
    assert exc.value.code == 1
    assert "error" in capsys.readouterr().err


def test_runtime_error_exit_2(workspace, tmp_path):
    corrupt = tmp_path / "bad.ckpt"
    corrupt.write_bytes(b"not a checkpoint")
    assert main(["segment", "--seed", "0", "--out", str(tmp_path / "o"), "--checkpoint", str(corrupt),
                 "--query-dir", str(workspace / "synth" / "query")]) == 2


def test_default_synth_counts_and_dark_polarity(tmp_path):
    assert main(["synth", "--seed", "1", "--out", str(tmp_path / "d"), "--polarity", "dark"]) == 0
    d = tmp_path / "d"
    assert len(list_images(d / "reference")) == 500 and len(list_images(d / "query")) == 300
    from scipy import ndimage
    from ascnet.data import read_image

    for path in list_images(d / "query")[:25]:
        img, m = read_image(path), read_mask(d / "masks" / path.name).astype(bool)
        ring = ndimage.binary_dilation(m, iterations=3) & ~m
        assert img[m].mean() < img[ring].mean()


def test_eval_perfect_and_empty(workspace, tmp_path):
    gt = workspace / "synth" / "masks"
    assert main(["eval", "--seed", "0", "--out", str(tmp_path / "p"), "--pred-dir", str(gt), "--gt-dir", str(gt)]) == 0
    assert (tmp_path / "p" / "eval.csv").read_text().splitlines()[-1] == "mean,1.0"
    from ascnet.data import write_mask

    for path in list_images(gt):
        write_mask(tmp_path / "empty" / path.name, np.zeros_like(read_mask(path)))
    assert main(["eval", "--seed", "0", "--out", str(tmp_path / "e"), "--pred-dir", str(tmp_path / "empty"),
                 "--gt-dir", str(gt), "--grouping", "subject"]) == 0
    assert (tmp_path / "e" / "eval.csv").read_text().splitlines()[-1] == "mean,0.0"


def test_bad_plot_kind_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["plot", "sideways", "--seed", "0", "--out", str(tmp_path)])
    assert exc.value.code == 1
