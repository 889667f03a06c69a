import hashlib
import json
import os

import pytest

from spf import cli, data, model, pem, service
from spf.model import ModelConfig

FIXTURE = os.path.join(os.path.dirname(__file__), "..", "fixtures",
                       "reference_latency.json")


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def tree_digest(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in sorted(files):
            path = os.path.join(base, f)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


# -------------------------------------------------------------------- usage

def test_unknown_flag_exits_one(capsys):
    code, _, err = run_cli(capsys, "synth", "--bogus")
    assert code == 1
    assert "usage" in err


def test_unknown_command_exits_one(capsys):
    code, _, err = run_cli(capsys, "frobnicate")
    assert code == 1


def test_missing_required_exits_one(capsys):
    code, _, err = run_cli(capsys, "synth")
    assert code == 1
    assert "--out" in err


def test_runtime_error_exits_two(tmp_path, capsys):
    code, _, err = run_cli(capsys, "eval", "--data", str(tmp_path / "nope"),
                           "--checkpoint", str(tmp_path / "nope.w32"),
                           "--out", str(tmp_path / "o"))
    assert code == 2
    assert "error" in err


def test_config_file_supplies_defaults(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 3, "patch_size": 16, "seed": 42}))
    out = tmp_path / "c"
    code, stdout, _ = run_cli(capsys, "synth", "--config", str(cfg),
                              "--out", str(out))
    assert code == 0
    assert "12 samples" in stdout  # n=3 per class came from the config file
    # explicit flags beat the config file
    out2 = tmp_path / "c2"
    code, stdout, _ = run_cli(capsys, "synth", "--config", str(cfg),
                              "--out", str(out2), "--n", "2")
    assert code == 0 and "8 samples" in stdout


def test_config_file_missing(tmp_path, capsys):
    code, _, err = run_cli(capsys, "synth", "--config",
                           str(tmp_path / "nope.json"), "--out", str(tmp_path / "o"))
    assert code == 2


# -------------------------------------------------------------------- synth

def test_synth_deterministic_trees(tmp_path, capsys):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    code1, out1, _ = run_cli(capsys, "synth", "--out", a, "--n", "10",
                             "--seed", "7", "--patch-size", "16")
    code2, _, _ = run_cli(capsys, "synth", "--out", b, "--n", "10",
                          "--seed", "7", "--patch-size", "16")
    assert code1 == code2 == 0
    assert "40 samples" in out1
    da, db = tree_digest(a), tree_digest(b)
    del da["run_config.json"], db["run_config.json"]  # contains the out path
    assert da == db


def test_synth_writes_only_inside_out(tmp_path, capsys):
    workdir = tmp_path / "cwd"
    out = tmp_path / "corpus"
    workdir.mkdir()
    old = os.getcwd()
    os.chdir(workdir)
    try:
        code, _, _ = run_cli(capsys, "synth", "--out", str(out), "--n", "2",
                             "--patch-size", "16", "--seed", "0")
    finally:
        os.chdir(old)
    assert code == 0
    assert list(workdir.iterdir()) == []


# ------------------------------------------------------------------ extract

def make_face_dir(tmp_path, n=3):
    faces = tmp_path / "faces"
    faces.mkdir()
    for i in range(n):
        face = data.synthetic_face(seed=100 + i)
        pem.write_ppm(faces / f"face_{i}.ppm", face.image)
        pem.save_keypoints(faces / f"face_{i}.json", face.keypoints)
    return faces


def test_extract_deterministic(tmp_path, capsys):
    faces = make_face_dir(tmp_path)
    a, b = str(tmp_path / "pa"), str(tmp_path / "pb")
    code, out, _ = run_cli(capsys, "extract", "--images", str(faces), "--out", a,
                           "--k", "2", "--seed", "5", "--patch-size", "32")
    assert code == 0 and "3/3" in out
    run_cli(capsys, "extract", "--images", str(faces), "--out", b,
            "--k", "2", "--seed", "5", "--patch-size", "32")
    da, db = tree_digest(a), tree_digest(b)
    del da["run_config.json"], db["run_config.json"]
    assert da == db
    assert any(k.endswith(".w32") for k in da)
    assert any(k.endswith(".patches.json") for k in da)


# ----------------------------------------------------- train / eval / sweep

@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    data.synth_generate(root, n_per_class=12, patch_size=16, seed=3)
    return str(root)


def test_eval_degenerate_model_apcer_100(tmp_path, small_corpus, capsys):
    # a head hardwired to accept everything as bona fide
    m = model.build(ModelConfig(branches=2, backbone=((4, 3, 1), (8, 3, 1)),
                                patch_size=16))
    m.head.weight.value[...] = 0
    m.head.bias.value[...] = [0.0, 9.0]
    ckpt = tmp_path / "always_bona.w32"
    model.save_checkpoint(ckpt, m)

    # attack-only manifest: strip bona fide lines
    attack_root = tmp_path / "attacks"
    attack_root.mkdir()
    (attack_root / "patches").mkdir()
    kept = []
    src_manifest = json.loads("[" + ",".join(
        open(os.path.join(small_corpus, "manifest.jsonl")).read().split("\n")[:-1]) + "]")
    for rec in src_manifest:
        if rec["label"] == 0:
            kept.append(rec)
            src = os.path.join(small_corpus, rec["patchset"])
            dst = attack_root / rec["patchset"]
            dst.write_bytes(open(src, "rb").read())
    with open(attack_root / "manifest.jsonl", "w") as fh:
        for rec in kept:
            fh.write(json.dumps(rec) + "\n")
    (attack_root / "meta.json").write_text(
        open(os.path.join(small_corpus, "meta.json")).read())

    code, out, _ = run_cli(capsys, "eval", "--data", str(attack_root),
                           "--checkpoint", str(ckpt),
                           "--out", str(tmp_path / "evalout"))
    assert code == 0
    assert "APCER 100.00%" in out
    saved = json.loads((tmp_path / "evalout" / "metrics.json").read_text())
    assert saved["apcer"] == 1.0
    assert saved["bpcer"] is None


def test_train_eval_sweep_pipeline(tmp_path, small_corpus, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run_cli(capsys, "train", "--data", small_corpus,
                              "--out", str(out), "--branches", "1",
                              "--epochs", "2", "--batch-size", "16",
                              "--seed", "1")
    assert code == 0
    assert (out / "checkpoint.w32").exists()
    assert (out / "checkpoint.json").exists()
    assert (out / "history.csv").read_text().startswith("epoch,train_loss,val_acer")
    assert (out / "training.png").stat().st_size > 0
    assert "best val ACER" in stdout

    code, stdout, _ = run_cli(capsys, "eval", "--data", small_corpus,
                              "--checkpoint", str(out / "checkpoint.w32"),
                              "--out", str(tmp_path / "ev"))
    assert code == 0 and "ACER" in stdout
    saved = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert saved["n"] == 48

    code, stdout, _ = run_cli(capsys, "sweep", "--data", small_corpus,
                              "--checkpoint", str(out / "checkpoint.w32"),
                              "--points", "19", "--out", str(tmp_path / "sw"))
    assert code == 0 and "best threshold" in stdout
    csv = (tmp_path / "sw" / "sweep.csv").read_text()
    assert csv.startswith("threshold,apcer,bpcer,acer")
    assert len(csv.strip().split("\n")) == 20
    assert (tmp_path / "sw" / "sweep.png").stat().st_size > 0


# -------------------------------------------------------------------- bench

def test_bench_fixture_replay(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "bench", "--fixture", FIXTURE,
                           "--out", str(tmp_path / "b"))
    assert code == 0
    assert "314.00" in out and "87.00" in out and "27.71%" in out
    saved = json.loads((tmp_path / "b" / "comparison.json").read_text())
    assert saved["traditional"]["t_total"] == 314.0
    assert saved["ours"]["t_total"] == 87.0
    assert abs(saved["ratio"] - 0.277) < 5e-4
    assert (tmp_path / "b" / "latency.png").stat().st_size > 0


def test_bench_live_smoke(capsys):
    code, out, _ = run_cli(capsys, "bench", "--trials", "3", "--seed", "1")
    assert code == 0
    assert "patch path faster in" in out


# ----------------------------------------------------------- serve / predict

def test_predict_against_served_checkpoint(tmp_path, capsys):
    m = model.build(ModelConfig(branches=2, patch_size=64, seed=2))
    ckpt = tmp_path / "m.w32"
    model.save_checkpoint(ckpt, m)
    served = model.load_checkpoint(ckpt)
    with service.serve(served) as srv:
        faces = make_face_dir(tmp_path, n=1)
        code, out, _ = run_cli(capsys, "predict",
                               "--image", str(faces / "face_0.ppm"),
                               "--server", f"{srv.address[0]}:{srv.address[1]}",
                               "--seed", "9")
    assert code == 0
    resp = json.loads(out)
    assert 0.0 <= resp["p_bona_fide"] <= 1.0
    assert resp["label_name"] in ("BONA_FIDE", "ATTACK")
    assert resp["model_digest"] == model.model_digest(m)
