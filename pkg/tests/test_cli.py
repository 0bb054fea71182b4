import json

import numpy as np
import pytest

from volexplain.atlas import write_region_names
from volexplain.attribution import AttributionMap
from volexplain.cli import main
from volexplain.model import default_spec, init_network, parse_spec, zero_network
from volexplain.render import decode_pgm
from volexplain.volumes import read_map, write_map, write_volume
from volexplain.weights import read_weights, save_weights

TINY_SPEC = """\
input 1 8 8 8
classes CN MCI AD
conv 2 kernel=3 pad=1
relu
pool 2
flatten
dense 3
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def tiny(tmp_path):
    spec = parse_spec(TINY_SPEC)
    (tmp_path / "spec.txt").write_text(TINY_SPEC, encoding="utf-8")
    save_weights(init_network(spec, 3), tmp_path / "w.vxw")
    vol = np.random.default_rng(0).normal(size=(8, 8, 8))
    write_volume(vol, tmp_path / "v.vvol")
    labels = np.ones((8, 8, 8), dtype=np.int16)
    labels[4:] = 2
    write_volume(labels, tmp_path / "atlas.vvol", dtype="int16")
    write_region_names({1: "Left", 2: "Right"}, tmp_path / "names.tsv")
    return tmp_path


def test_classify_zero_network(tmp_path, capsys):
    save_weights(zero_network(default_spec()), tmp_path / "zero.vxw")
    write_volume(np.ones((16, 16, 16)), tmp_path / "v.nii")
    code, out, err = run(capsys, "classify", "--weights", tmp_path / "zero.vxw", tmp_path / "v.nii")
    assert code == 0
    assert out.splitlines() == ["CN", "CN\t0.3333", "MCI\t0.3333", "AD\t0.3333"]
    assert err.startswith("config: {")


def test_aggregate_uniform_two_regions(tiny, capsys):
    write_map(AttributionMap(np.ones((8, 8, 8)), "occlusion", 2), tiny / "m.vvol")
    code, out, _ = run(capsys, "aggregate", tiny / "m.vvol", "--atlas", tiny / "atlas.vvol", "--names", tiny / "names.tsv")
    assert code == 0
    assert out.count("50.00%") == 2
    assert "Occlusion Sensitivity" in out


@pytest.mark.parametrize("method", ["sensitivity", "guided", "occlusion", "region-occlusion", "lrp"])
def test_attribute_is_deterministic_and_records_provenance(tiny, capsys, method):
    outs = []
    for name in ("a.vvol", "b.vvol"):
        argv = ["attribute", "--weights", tiny / "w.vxw", tiny / "v.vvol", "--method", method, "--target", "AD", "--out", tiny / name]
        if method == "region-occlusion":
            argv += ["--atlas", tiny / "atlas.vvol"]
        assert run(capsys, *argv)[0] == 0
        outs.append(tiny / name)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    m = read_map(outs[0])
    assert m.method == method and m.target_class == 2
    prov = json.loads((tiny / "a.vvol.json").read_text())["provenance"]
    assert prov["method"] == method and prov["target_name"] == "AD"
    assert {"patch", "stride", "baseline", "rule", "epsilon"} <= set(prov)


def test_average_and_render(tiny, capsys):
    rng = np.random.default_rng(1)
    paths = []
    for i in range(3):
        p = tiny / f"m{i}.vvol"
        write_map(AttributionMap(rng.normal(size=(8, 8, 8)), "lrp", 2, {"rule": "epsilon"}), p)
        paths.append(p)
    assert run(capsys, "average", *paths, "--out", tiny / "avg.vvol")[0] == 0
    avg = read_map(tiny / "avg.vvol")
    expected = sum(read_map(p).values for p in paths) / 3
    np.testing.assert_allclose(avg.values, expected, rtol=1e-15, atol=1e-15)
    assert avg.metadata == {"rule": "epsilon", "count": 3}

    assert run(capsys, "render", tiny / "avg.vvol", "--axis", "2", "--index", "1", "--signed", "--out", tiny / "s.pgm")[0] == 0
    px = decode_pgm((tiny / "s.pgm").read_bytes())
    assert px.shape == (8, 8)
    assert b'"signed": true' in (tiny / "s.pgm").read_bytes()


def test_train_writes_weights_and_metrics(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", "--out", tmp_path / "ds", "--extent", "8", "--samples-per-class", "6", "--planted-region", "2")
    assert code == 0
    (tmp_path / "spec.txt").write_text(TINY_SPEC, encoding="utf-8")
    argv = ["train", "--manifest", tmp_path / "ds" / "manifest.csv", "--spec", tmp_path / "spec.txt", "--epochs", "2", "--batch-size", "4", "--lr", "0.01"]
    assert run(capsys, *argv, "--out", tmp_path / "a.vxw")[0] == 0
    assert run(capsys, *argv, "--out", tmp_path / "b.vxw")[0] == 0
    assert (tmp_path / "a.vxw").read_bytes() == (tmp_path / "b.vxw").read_bytes()
    metrics = json.loads((tmp_path / "a.vxw.metrics.json").read_text())
    assert len(metrics["history"]) == 2
    assert metrics["config"]["train"]["learning_rate"] == 0.01
    assert "test" in metrics
    assert read_weights(tmp_path / "a.vxw").spec == parse_spec(TINY_SPEC)


def test_errors_are_single_line(tiny, capsys):
    code, out, err = run(capsys, "classify", "--weights", tiny / "names.tsv", tiny / "v.vvol")
    assert code == 1 and out == ""
    assert err.splitlines()[-1].startswith("error[MagicError]: ")
    assert "Traceback" not in err

    code, _, err = run(capsys, "classify", "--weights", tiny / "missing.vxw", tiny / "v.vvol")
    assert code == 1 and err.splitlines()[-1].startswith("error[FileNotFoundError]: ")

    code, _, err = run(capsys, "attribute", "--weights", tiny / "w.vxw", tiny / "v.vvol", "--method", "region-occlusion", "--out", tiny / "x.vvol")
    assert code == 2 and "requires --atlas" in err

    code, _, err = run(capsys, "classify", "--weights", tiny / "w.vxw", tiny / "v.vvol", "--bogus")
    assert code == 2 and err.strip().startswith("error[UsageError]: ") and "--bogus" in err
    assert len(err.strip().splitlines()) == 1

    code, _, err = run(capsys, "attribute", "--weights", tiny / "w.vxw", tiny / "v.vvol", "--method", "saliency", "--out", tiny / "x.vvol")
    assert code == 2 and "saliency" in err


def test_shape_mismatch_reported(tiny, capsys):
    write_volume(np.zeros((4, 4, 4)), tiny / "small.vvol")
    code, _, err = run(capsys, "classify", "--weights", tiny / "w.vxw", tiny / "small.vvol")
    assert code == 1 and "error[ShapeError]" in err
