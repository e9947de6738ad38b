import builtins
import hashlib
import io
import os

import numpy as np
import pytest

from srcr import dataset
from srcr.cli import main

TINY_TRAIN = ["--epochs-rce", "3", "--epochs-hsl", "4", "--k", "3", "--n-anchors", "8",
              "--unified-dim", "8", "--anchor-dim", "8"]


def sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture
def workdir(tmp_path):
    data = str(tmp_path / "d.ocmf")
    split = str(tmp_path / "s.txt")
    assert main(["synth", "--categories", "8", "--per-category", "6", "--modalities", "3",
                 "--dim", "10", "--seed", "3", "--out", data]) == 0
    assert main(["split", "--data", data, "--unseen-fraction", "0.25", "--seed", "3", "--out", split]) == 0
    return tmp_path, data, split


def test_synth_counts_and_rerun_identical(tmp_path):
    a, b = str(tmp_path / "a.ocmf"), str(tmp_path / "b.ocmf")
    args = ["synth", "--categories", "30", "--per-category", "20", "--modalities", "3",
            "--dim", "64", "--seed", "2022", "--out"]
    assert main(args + [a]) == 0 and main(args + [b]) == 0
    assert dataset.read_ocmf(a).n_objects == 600
    assert sha(a) == sha(b)
    assert "config_sha256" in dataset.read_manifest(a + ".manifest")


@pytest.mark.parametrize("argv", [
    ["synth", "--modalities", "0", "--out", "x.ocmf"],
    ["synth"],
    ["split", "--data", "d", "--unseen-fraction", "1.5", "--out", "s"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code == 2


def test_missing_file_exits_1(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope.ocmf"), "--out", str(tmp_path / "m")]) == 1
    assert "error" in capsys.readouterr().err


def test_config_violation_exits_1(workdir):
    tmp, data, split = workdir
    assert main(["train", "--data", data, "--out", str(tmp / "m"), "--alpha", "3"]) == 1
    assert main(["train", "--data", data, "--out", str(tmp / "m"), "--variant", "category-center"]) == 1


def test_config_file_with_flag_override(workdir):
    tmp, data, split = workdir
    cfg = tmp / "c.txt"
    cfg.write_text("epochs_rce=2\nepochs_hsl=3\nk=3\nn_anchors=4\nunified_dim=4\nanchor_dim=4\n")
    ckpt = str(tmp / "m.ckpt")
    assert main(["train", "--data", data, "--split", split, "--out", ckpt, "--config", str(cfg),
                 "--epochs-rce", "5"]) == 0
    log_lines = open(ckpt + ".loss.csv").read().splitlines()
    assert sum(line.startswith("rce,") for line in log_lines) == 5
    assert sum(line.startswith("hsl,") for line in log_lines) == 3


def run_pipeline(tmp, data, split, tag):
    ckpt, emb, rep = str(tmp / f"{tag}.ckpt"), str(tmp / f"{tag}.ocmf"), str(tmp / f"{tag}_rep")
    assert main(["train", "--data", data, "--split", split, "--out", ckpt] + TINY_TRAIN) == 0
    assert main(["embed", "--checkpoint", ckpt, "--data", data, "--split", split, "--out", emb]) == 0
    assert main(["eval", "--embeddings", emb, "--out-dir", rep]) == 0
    return ckpt, emb, rep


def test_full_pipeline_emits_six_reports(workdir):
    tmp, data, split = workdir
    ckpt, emb, rep = run_pipeline(tmp, data, split, "a")
    csvs = sorted(f for f in os.listdir(rep) if f.endswith(".csv") and f != "summary.csv")
    svgs = sorted(f for f in os.listdir(rep) if f.endswith(".svg") and f != "pr_curves.svg")
    assert len(csvs) == 6 and len(svgs) == 6
    header = open(os.path.join(rep, csvs[0])).readline()
    assert header.startswith("# config_sha256=")
    assert open(ckpt + ".loss.csv").readline() == header
    assert open(emb + ".manifest").read().strip() == header[2:].strip()


def test_pipeline_artifacts_are_byte_identical_across_runs(workdir):
    tmp, data, split = workdir
    first = run_pipeline(tmp, data, split, "a")
    second = run_pipeline(tmp, data, split, "b")
    assert sha(first[0]) == sha(second[0])
    assert sha(first[1]) == sha(second[1])
    for name in sorted(os.listdir(first[2])):
        assert sha(os.path.join(first[2], name)) == sha(os.path.join(second[2], name))


def test_embed_is_deterministic(workdir):
    tmp, data, split = workdir
    ckpt, emb, _ = run_pipeline(tmp, data, split, "a")
    again = str(tmp / "again.ocmf")
    assert main(["embed", "--checkpoint", ckpt, "--data", data, "--split", split, "--out", again]) == 0
    assert sha(emb) == sha(again)


def test_risk_and_ablate(workdir, capsys):
    tmp, data, split = workdir
    _, emb, _ = run_pipeline(tmp, data, split, "a")
    assert main(["risk", "--embeddings", emb, "--query", "0", "--target", "2",
                 "--out", str(tmp / "risk.csv")]) == 0
    assert "empirical risk" in capsys.readouterr().out
    table = str(tmp / "ablation.csv")
    assert main(["ablate", "--data", data, "--split", split, "--out", table,
                 "--variants", "full,direct-center,mlp"] + TINY_TRAIN) == 0
    rows = open(table).read().splitlines()
    assert rows[1] == "method,variant,mAP,NDCG,ANMRR" and len(rows) == 5
    assert main(["ablate", "--data", data, "--split", split, "--out", table,
                 "--variants", "bogus"] + TINY_TRAIN) == 1


# --- self-supervision contract ------------------------------------------------


class SpyFile(io.BytesIO):
    def __init__(self, data, spans):
        super().__init__(data)
        self.spans = spans

    def read(self, size=-1):
        start = self.tell()
        chunk = super().read(size)
        self.spans.append((start, start + len(chunk)))
        return chunk


def test_train_reads_no_label_bytes(workdir, monkeypatch):
    tmp, data, split = workdir
    fs = dataset.read_ocmf(data)
    label_start = 24 + 4 * fs.features.size
    label_end = label_start + 4 * fs.n_objects
    spans = []
    real_open = builtins.open

    def spying_open(path, mode="r", *args, **kwargs):
        if os.fspath(path) == data and "r" in mode and "b" in mode:
            with real_open(path, "rb") as fh:
                return SpyFile(fh.read(), spans)
        return real_open(path, mode, *args, **kwargs)

    monkeypatch.setattr(builtins, "open", spying_open)
    assert main(["train", "--data", data, "--split", split, "--out", str(tmp / "m.ckpt")] + TINY_TRAIN) == 0
    monkeypatch.undo()
    assert spans, "the instrumented reader saw no reads"
    overlapping = [s for s in spans if s[0] < label_end and s[1] > label_start and s[1] > s[0]]
    assert overlapping == []


def test_train_output_ignores_label_content(workdir):
    tmp, data, split = workdir
    fs = dataset.read_ocmf(data)
    label_start = 24 + 4 * fs.features.size
    raw = bytearray(open(data, "rb").read())
    rng = np.random.default_rng(0)
    raw[label_start:label_start + 4 * fs.n_objects] = rng.integers(0, 256, 4 * fs.n_objects,
                                                                   dtype=np.uint8).tobytes()
    scrambled = str(tmp / "scrambled.ocmf")
    open(scrambled, "wb").write(bytes(raw))
    a, b = str(tmp / "a.ckpt"), str(tmp / "b.ckpt")
    assert main(["train", "--data", data, "--split", split, "--out", a] + TINY_TRAIN) == 0
    assert main(["train", "--data", scrambled, "--split", split, "--out", b] + TINY_TRAIN) == 0
    assert sha(a) == sha(b)
