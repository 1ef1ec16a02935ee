import csv
import json
import shutil

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sgdir import codec
from sgdir.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, PAIR_FILES, main, read_pair
from sgdir.config import RunConfig, from_dict, load
from sgdir.errors import CodecError, ConfigError
from sgdir.grid import DisplacementField, GridGeometry, LabelMap, ScalarImage
from sgdir.model import init_params
from sgdir.train import checkpoint_save

TINY = {
    "synth": {"dims": [16, 16], "amplitude": 1.5, "smooth_sigma": 4, "n_pairs": 2, "seed": 3},
    "model": {"channels": [2, 3]},
    "embed": {"dim": 8},
    "loss": {"ncc_window": 5, "lambda": 10.0},
    "train": {"iters": 4, "lr": 0.01, "seed": 1},
}


def write_config(path, **override):
    raw = json.loads(json.dumps(TINY))
    for section, values in override.items():
        raw.setdefault(section, {}).update(values)
    path.write_text(json.dumps(raw))
    return path


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    cfg = write_config(root / "cfg.json")
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def run_dir(synth_dir):
    out = synth_dir / "run"
    code = main(["register", "--pair", str(synth_dir / "data" / "pair_000"),
                 "--config", str(synth_dir / "cfg.json"), "--out", str(out)])
    assert code == EXIT_OK
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ------------------------------------------------------------------ codec

@pytest.mark.parametrize("shape", [(1, 5, 7), (2, 4, 6), (3, 3, 4, 5)])
def test_codec_float_round_trip(shape):
    rng = np.random.default_rng(0)
    a = rng.normal(size=shape).astype(np.float32)
    spacing = tuple(rng.uniform(0.5, 2, len(shape) - 1).astype(np.float32).tolist())
    raw = codec.encode(a, spacing)
    b, sp = codec.decode(raw)
    assert b.dtype == np.float32 and b.tobytes() == a.tobytes() and sp == spacing
    assert codec.encode(b, sp) == raw


def test_codec_header_layout():
    a = np.arange(24, dtype=np.uint16).reshape(2, 3, 4)
    raw = codec.encode(a, (1.0, 2.0))
    assert raw[:4] == b"SGV1" and raw[4:8] == bytes([2, 2, 1, 0])
    assert np.frombuffer(raw[8:16], "<u4").tolist() == [3, 4]
    assert np.frombuffer(raw[16:24], "<f4").tolist() == [1.0, 2.0]
    # channel index varies fastest
    assert np.frombuffer(raw[24:], "<u2")[:4].tolist() == [0, 12, 1, 13]


@given(st.integers(0, 10_000))
def test_codec_label_round_trip(seed):
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in rng.integers(1, 6, size=int(rng.integers(2, 4))))
    a = rng.integers(0, 0xFFFF + 1, size=(1,) + dims)
    b, _ = codec.decode(codec.encode(a))
    assert np.array_equal(a, b)


def test_codec_rejects_bad_input():
    raw = codec.encode(np.zeros((1, 4, 4), np.float32))
    for bad in (b"SGV2" + raw[4:], raw[:6] + bytes([7]) + raw[7:], raw[:-1], raw + b"\0", raw[:10]):
        with pytest.raises(CodecError):
            codec.decode(bad)
    for arr in (np.full((1, 4, 4), -1), np.full((1, 4, 4), 70000), np.zeros((1, 4)),
                np.zeros((1, 4, 4), complex)):
        with pytest.raises(CodecError):
            codec.encode(arr)


def test_typed_readers(tmp_path):
    geom = GridGeometry((6, 5), (1.5, 0.5))
    img = ScalarImage(geom, np.linspace(0, 1, 30, dtype=np.float32).reshape(6, 5))
    lab = LabelMap(geom, np.arange(30).reshape(6, 5) % 4)
    u = DisplacementField(geom, np.ones((2, 6, 5), np.float32))
    codec.write_image(tmp_path / "i.sgv", img)
    codec.write_labels(tmp_path / "l.sgv", lab)
    codec.write_field(tmp_path / "u.sgv", u)
    assert codec.read_image(tmp_path / "i.sgv").values.tobytes() == img.values.tobytes()
    assert np.array_equal(codec.read_labels(tmp_path / "l.sgv").labels, lab.labels)
    assert codec.read_field(tmp_path / "u.sgv").geom == geom
    with pytest.raises(CodecError):
        codec.read_image(tmp_path / "u.sgv")
    with pytest.raises(CodecError):
        codec.read_field(tmp_path / "i.sgv")


# ------------------------------------------------------------------ config

def test_config_round_trip_and_alias():
    cfg = from_dict(TINY)
    assert cfg.loss.lam == 10.0 and cfg.model.channels == (2, 3)
    assert from_dict(cfg.to_dict()) == cfg
    assert from_dict({}) == RunConfig()


@pytest.mark.parametrize("raw", [
    {"optimizer": {}},
    {"train": {"learning_rate": 1.0}},
    {"train": {"iters": 0}},
    {"model": {"channels": 8}},
    {"synth": {"phantom_kind": "brain"}},
    {"synth": {"dims": [16, 16, 16]}},
    {"loss": []},
    [],
])
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_config_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load(tmp_path / "c.json")


# ------------------------------------------------------------------ commands

def test_synth_writes_pairs(synth_dir):
    data = synth_dir / "data"
    dirs = sorted(p.name for p in data.iterdir() if p.is_dir())
    assert dirs == ["pair_000", "pair_001"]
    for d in dirs:
        assert sorted(p.name for p in (data / d).iterdir()) == sorted(list(PAIR_FILES.values()) + ["pair.json"])
    manifest = json.loads((data / "manifest.json").read_text())
    assert [e["name"] for e in manifest["pairs"]] == dirs
    assert manifest["pairs"][1]["velocity_seed"] == 1004 and manifest["pairs"][0]["gt"] == "gt_forward.sgv"


def test_synth_is_deterministic(synth_dir, tmp_path):
    assert main(["synth", "--config", str(synth_dir / "cfg.json"), "--out", str(tmp_path)]) == EXIT_OK
    for p in (synth_dir / "data").rglob("*"):
        if p.is_file():
            assert (tmp_path / p.relative_to(synth_dir / "data")).read_bytes() == p.read_bytes()


def test_synth_invalid_kind_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", synth={"phantom_kind": "brain"})
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "phantom_kind" in capsys.readouterr().err


def test_missing_config_exits_3(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_IO


def test_register_outputs(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert names == {"checkpoint.sgck", "u_t+1.sgv", "u_t-1.sgv", "warped_moving_t+1.sgv",
                     "warped_fixed_t-1.sgv", "train_log.csv", "metrics.csv"}
    rows = read_csv(run_dir / "metrics.csv")
    assert rows[0][:2] == ["stage", "dice_mean"] and [r[0] for r in rows[1:]] == ["pre", "post"]
    assert all(r[5] != "" for r in rows[1:])
    assert len(read_csv(run_dir / "train_log.csv")) == 5


def test_register_identity_pair(synth_dir, tmp_path):
    pair = tmp_path / "pair"
    shutil.copytree(synth_dir / "data" / "pair_000", pair)
    for a, b in (("fixed", "moving"), ("labels_fixed", "labels_moving"), ("landmarks_fixed", "landmarks_moving")):
        shutil.copy(pair / PAIR_FILES[a], pair / PAIR_FILES[b])
    (pair / PAIR_FILES["gt_forward"]).unlink()
    code = main(["register", "--pair", str(pair), "--config", str(synth_dir / "cfg.json"),
                 "--out", str(tmp_path / "run")])
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "run" / "metrics.csv")
    assert [float(r[1]) for r in rows[1:]] == [1.0, 1.0]
    # no ground truth: endpoint error column left empty
    assert [r[5] for r in rows[1:]] == ["", ""]


def test_register_is_deterministic(synth_dir, run_dir, tmp_path):
    main(["register", "--pair", str(synth_dir / "data" / "pair_000"),
          "--config", str(synth_dir / "cfg.json"), "--out", str(tmp_path)])
    for p in run_dir.iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_register_nonfinite_exits_4(synth_dir, tmp_path):
    cfg = write_config(tmp_path / "c.json", loss={"lambda": 1e308}, train={"lr": 1e3})
    code = main(["register", "--pair", str(synth_dir / "data" / "pair_000"),
                 "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert code == EXIT_NUMERIC


def test_register_bad_volume_exits_3(synth_dir, tmp_path):
    pair = tmp_path / "pair"
    shutil.copytree(synth_dir / "data" / "pair_000", pair)
    (pair / "moving.sgv").write_bytes(b"JUNK" + (pair / "moving.sgv").read_bytes()[4:])
    code = main(["register", "--pair", str(pair), "--config", str(synth_dir / "cfg.json"),
                 "--out", str(tmp_path / "run")])
    assert code == EXIT_IO


def test_read_pair_optional_files(synth_dir, tmp_path):
    pair = tmp_path / "pair"
    pair.mkdir()
    for role in ("fixed", "moving"):
        shutil.copy(synth_dir / "data" / "pair_000" / PAIR_FILES[role], pair)
    p = read_pair(pair)
    assert p.labels_fixed is None and p.gt_forward is None
    (pair / "fixed.sgv").unlink()
    with pytest.raises(FileNotFoundError):
        read_pair(pair)


def test_warp(synth_dir, run_dir, tmp_path):
    pair = synth_dir / "data" / "pair_000"
    ck = run_dir / "checkpoint.sgck"

    def warp(t):
        out = tmp_path / f"w{t}.sgv"
        assert main(["warp", "--checkpoint", str(ck), "--pair", str(pair), "--t", str(t), "--out", str(out)]) == 0
        return out.read_bytes()
    assert warp(0.0) == (pair / "moving.sgv").read_bytes()
    assert warp(1.0) == (run_dir / "warped_moving_t+1.sgv").read_bytes()
    assert warp(-1.0) == (run_dir / "warped_fixed_t-1.sgv").read_bytes()
    assert warp(0.25) != warp(0.0)
    assert main(["warp", "--checkpoint", str(ck), "--pair", str(pair), "--t", "1.5",
                 "--out", str(tmp_path / "x.sgv")]) == EXIT_CONFIG


def test_verify_zero_init_checkpoint(synth_dir, tmp_path):
    cfg = from_dict(TINY)
    ck = tmp_path / "zero.sgck"
    checkpoint_save(init_params(cfg.model, cfg.embed, 0), None, ck)
    out = tmp_path / "report.csv"
    assert main(["verify", "--checkpoint", str(ck), "--pair", str(synth_dir / "data" / "pair_000"),
                 "--out", str(out)]) == EXIT_OK
    rows = read_csv(out)
    assert rows[0] == ["check", "t", "s", "n", "value", "dice"]
    jac = [r for r in rows if r[0] == "neg_jacobian"]
    assert len(jac) == 17 and all(float(r[4]) == 0.0 for r in jac)
    assert sum(r[0] == "semigroup" for r in rows) == 25
    assert [r[3] for r in rows if r[0] == "tree"] == ["1", "2", "3"]
    assert all(float(r[4]) == 0.0 for r in rows[1:] if r[0] != "neg_jacobian")


def test_verify_bad_checkpoint_exits_3(synth_dir, tmp_path):
    ck = tmp_path / "bad.sgck"
    ck.write_bytes(b"nothing")
    assert main(["verify", "--checkpoint", str(ck), "--pair", str(synth_dir / "data" / "pair_000"),
                 "--out", str(tmp_path / "r.csv")]) == EXIT_IO


def test_sweep_lambda(synth_dir, tmp_path):
    out = tmp_path / "sweep"
    code = main(["sweep", "--axis", "lambda", "--values", "1e1", "1e3", "1e5", "--seeds", "2",
                 "--config", str(synth_dir / "cfg.json"), "--pair", str(synth_dir / "data" / "pair_000"),
                 "--out", str(out)])
    assert code == EXIT_OK
    rows = read_csv(out / "sweep.csv")
    assert rows[0][:2] == ["axis", "value"] and [r[1] for r in rows[1:]] == ["1e1", "1e3", "1e5"]
    assert all(r[2] == "2" and r[8] == "ok" and r[4] != "" for r in rows[1:])


def test_sweep_timesteps_labels(synth_dir, tmp_path):
    cfg = write_config(tmp_path / "c.json", train={"iters": 2})
    values = ["0", "1", "2", "4", "8", "continuous"]
    assert main(["sweep", "--axis", "timesteps", "--values", *values, "--seeds", "1",
                 "--config", str(cfg), "--out", str(tmp_path / "s")]) == EXIT_OK
    assert [r[1] for r in read_csv(tmp_path / "s" / "sweep.csv")[1:]] == values


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sweep_failed_arm_is_recorded(synth_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", train={"lr": 1e3})
    code = main(["sweep", "--axis", "lambda", "--values", "0", "1e308", "--seeds", "1",
                 "--config", str(cfg), "--pair", str(synth_dir / "data" / "pair_000"),
                 "--out", str(tmp_path / "s")])
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "s" / "sweep.csv")
    assert rows[1][8] == "ok" and rows[2][8] == "failed" and rows[2][3] == "1"
    assert "warning" in capsys.readouterr().err


def test_sweep_needs_two_values(tmp_path):
    assert main(["sweep", "--axis", "lambda", "--values", "1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["sweep", "--axis", "lambda", "--values", "1", "x", "--out", str(tmp_path)]) == EXIT_CONFIG
