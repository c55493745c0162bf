"""End-to-end runs of every subcommand on miniature inputs."""

import json
import os
import signal
import subprocess
import sys
import urllib.error
import urllib.request

import numpy as np
import pytest

from advstim.analysis import ResponseRecord, append_response
from advstim.cli import default_geometry, main
from advstim.nn import ArchSpec, Model
from advstim.nn.data import FINE_NAMES, Dataset, load_dataset, write_dataset
from advstim.nn.model import save_checkpoint
from advstim.retina import RetinaParams, blur_operator
from advstim.stimuli import load_delta, load_pool, read_stimulus_png, write_stimulus_png


def _template_member():
    arch = ArchSpec((4, 4), 1, 16, (("flatten", {}), ("dense", {"out": 16})))
    m = Model.build(arch, seed=0)
    m.layers[1].w = 500.0 * np.eye(16)
    m.layers[1].b = np.zeros(16)
    return m


def _narrow_dataset(n_per_fine=2, seed=0):
    rng = np.random.default_rng(seed)
    n = 16 * n_per_fine
    images = rng.uniform(100.0, 140.0, size=(n, 4, 4, 1))
    labels = np.repeat(np.arange(16), n_per_fine)
    ids = tuple(f"s{i:02d}" for i in range(n))
    return Dataset(images=images, labels=labels, fine_names=FINE_NAMES, ids=ids)


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    """Dataset manifest + checkpoint dir for the 4px template ensemble."""
    root = tmp_path_factory.mktemp("cli")
    manifest = write_dataset(_narrow_dataset(), root / "data")
    models = root / "models"
    models.mkdir()
    for name in ("m0", "m1"):
        save_checkpoint(_template_member(), models / f"{name}.ckpt")
    return root, manifest, models


def test_synth_writes_corpus(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "corpus"),
                 "--n-per-class", "2", "--size", "16", "--seed", "1"]) == 0
    data = load_dataset(tmp_path / "corpus" / "manifest.json")
    assert data.images.shape == (32, 16, 16, 1)
    assert len(set(data.ids)) == 32


def test_train_writes_checkpoint(tmp_path):
    main(["synth", "--out", str(tmp_path / "corpus"), "--n-per-class", "4",
          "--size", "16", "--seed", "0"])
    out_px = blur_operator(default_geometry(16), RetinaParams()).out_px
    arch = ArchSpec((out_px, out_px), 1, 16,
                    (("flatten", {}), ("dense", {"out": 16})))
    arch_path = tmp_path / "arch.json"
    arch_path.write_text(json.dumps(arch.to_json_dict()))
    ckpt = tmp_path / "model.ckpt"
    assert main(["train", "--arch", str(arch_path),
                 "--data", str(tmp_path / "corpus" / "manifest.json"),
                 "--out", str(ckpt), "--epochs", "3", "--lr", "0.02",
                 "--seed", "0"]) == 0
    from advstim.nn.model import load_checkpoint
    model = load_checkpoint(ckpt)
    losses = model.meta["epoch_losses"]
    assert len(losses) == 3 and losses[-1] < losses[0]


def test_train_rejects_wrong_arch_dims(tmp_path):
    main(["synth", "--out", str(tmp_path / "corpus"), "--n-per-class", "1",
          "--size", "16"])
    arch = ArchSpec((5, 5), 1, 16, (("flatten", {}), ("dense", {"out": 16})))
    arch_path = tmp_path / "arch.json"
    arch_path.write_text(json.dumps(arch.to_json_dict()))
    with pytest.raises(SystemExit, match="post-crop"):
        main(["train", "--arch", str(arch_path),
              "--data", str(tmp_path / "corpus" / "manifest.json"),
              "--out", str(tmp_path / "m.ckpt")])


def test_retina_demo_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    src = tmp_path / "in.png"
    write_stimulus_png(src, rng.uniform(0, 255, size=(16, 16)))
    out = tmp_path / "out.png"
    assert main(["retina-demo", "--in", str(src), "--out", str(out)]) == 0
    blurred = read_stimulus_png(out)
    assert blurred.shape == (16, 16, 1)
    op = blur_operator(default_geometry(16), RetinaParams())
    expected = tmp_path / "expected.png"
    write_stimulus_png(expected, op.apply_precrop(read_stimulus_png(src)))
    assert out.read_bytes() == expected.read_bytes()


def test_attack_adv_writes_stimuli(tiny_setup, tmp_path):
    _, manifest, models = tiny_setup
    out = tmp_path / "stim"
    assert main(["attack", "--ensemble", str(models), "--data", str(manifest),
                 "--group", "curved", "--condition", "adv", "--limit", "2",
                 "--out", str(out)]) == 0
    sidecars = sorted(out.glob("*.json"))
    assert len(sidecars) == 2
    side = json.loads(sidecars[0].read_text())
    assert side["condition"] == "adv"
    assert side["epsilon"] == 32.0
    assert side["retained"] is True
    assert side["target"] in ("round", "holed")
    delta = load_delta(out / side["delta_path"])
    assert np.abs(delta).max() == 32.0
    assert (out / f"{side['source_id']}.png").exists()


def test_attack_false_uses_distractors(tiny_setup, tmp_path):
    _, manifest, models = tiny_setup
    out = tmp_path / "false"
    assert main(["attack", "--ensemble", str(models), "--data", str(manifest),
                 "--group", "curved", "--condition", "false", "--limit", "2",
                 "--out", str(out)]) == 0
    sides = [json.loads(p.read_text()) for p in sorted(out.glob("*.json"))]
    assert len(sides) == 2
    assert all(s["condition"] == "false" and s["epsilon"] == 40.0 for s in sides)
    data = load_dataset(manifest)
    label_of = dict(zip(data.ids, (int(v) for v in data.labels)))
    from advstim.nn.data import coarse_of_fine
    assert all(coarse_of_fine(label_of[s["source_id"]]) == "distractor" for s in sides)
    # both targets covered: selection balances within the pair
    assert {s["target"] for s in sides} == {"round", "holed"}


def test_attack_unknown_group_errors(tiny_setup, tmp_path):
    _, manifest, models = tiny_setup
    with pytest.raises(SystemExit, match="unknown group"):
        main(["attack", "--ensemble", str(models), "--data", str(manifest),
              "--group", "nope", "--out", str(tmp_path / "x")])


def test_pool_assemble_eval_chain(tiny_setup, tmp_path, capsys):
    _, manifest, models = tiny_setup
    pool = tmp_path / "pool"
    assert main(["pool", "--ensemble", str(models), "--data", str(manifest),
                 "--out", str(pool), "--seed", "3"]) == 0
    printed = capsys.readouterr().out
    assert "curved/adv: 8" in printed
    records, _ = load_pool(pool)
    assert len(records) == 96

    sessions = tmp_path / "sessions"
    assert main(["assemble", "--pool", str(pool), "--group", "curved",
                 "--n", "4", "--seed", "3", "--out", str(sessions),
                 "--session-id", "sess-cli"]) == 0
    man = json.loads((sessions / "sess-cli.json").read_text())
    assert len(man["trials"]) == 16

    eval_models = tmp_path / "eval_models"
    eval_models.mkdir()
    save_checkpoint(_template_member(), eval_models / "m0.train.ckpt")
    save_checkpoint(_template_member(), eval_models / "held.test.ckpt")
    report_path = tmp_path / "report.json"
    assert main(["eval", "--models", str(eval_models), "--stimuli", str(pool),
                 "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["cells"]
    csv_lines = report_path.with_suffix(".csv").read_text().splitlines()
    assert csv_lines[0].startswith("model_id,role,group,condition")


def test_eval_rejects_unlabeled_checkpoints(tiny_setup, tmp_path):
    _, _, models = tiny_setup  # files named m0.ckpt, without a role
    pool = tmp_path / "pool"
    with pytest.raises(SystemExit, match="train|test"):
        main(["eval", "--models", str(models), "--stimuli", str(pool),
              "--out", str(tmp_path / "r.json")])


def test_analyze_writes_report(tmp_path, capsys):
    log = tmp_path / "log.jsonl"
    for i in range(6):
        append_response(log, ResponseRecord(
            session_id="s", subject_id="u", trial_id=f"t{i}",
            stimulus_id=f"stim-{i:05d}", condition="false", group="curved",
            choice="round" if i < 4 else "holed", rt_ms=300.0 + i,
            counted=True, target="round"))
    out = tmp_path / "report"
    assert main(["analyze", "--log", str(log), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["false_condition"]["n"] == 6
    assert "analyzed 6 records" in capsys.readouterr().out


def test_serve_requires_dirs_or_env():
    env = {k: v for k, v in os.environ.items() if k != "ADVSTIM_DATA_DIR"}
    proc = subprocess.run(
        [sys.executable, "-m", "advstim.cli", "serve"],
        capture_output=True, text=True, env=env)
    assert proc.returncode != 0
    assert "ADVSTIM_DATA_DIR" in proc.stderr


def test_serve_env_var_defaults(tmp_path):
    (tmp_path / "pool" / "stimuli").mkdir(parents=True)
    (tmp_path / "sessions").mkdir()
    env = dict(os.environ, ADVSTIM_DATA_DIR=str(tmp_path))
    proc = subprocess.Popen(
        [sys.executable, "-m", "advstim.cli", "serve", "--port", "0"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env)
    try:
        line = proc.stdout.readline()
        assert "serving on " in line, proc.stderr.read()
        base = line.strip().split("serving on ")[1]
        try:
            urllib.request.urlopen(f"{base}/session/missing")
            raise AssertionError("expected 404")
        except urllib.error.HTTPError as e:
            assert e.code == 404
    finally:
        proc.send_signal(signal.SIGKILL)
        proc.wait()
