import json

import pytest

from main import main
from model.reflect import ReflectDiffu
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.config import RunConfig
from tests.conftest import grown_vocab, tiny_document
from utils.corpus import read_dialogues
from utils.errors import CorpusError, UntrainedModelError
from utils.labels import Speaker
from utils.metrics import EvalReport

ENV_VARS = ("REFLECT_CONFIG", "REFLECT_LOG_LEVEL", "REFLECT_DTYPE", "REFLECT_SEED", "REFLECT_STRICT")


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ENV_VARS:
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def workspace(tmp_path, tiny_config_file):
    data = tmp_path / "synth.jsonl"
    assert main(["--config", tiny_config_file, "--quiet", "synth", "--n", "12", "--out", str(data)]) == 0
    return {"config": tiny_config_file, "data": str(data), "dir": tmp_path}


@pytest.fixture
def trained(workspace):
    ckpt = workspace["dir"] / "model.rfd"
    args = ["--config", workspace["config"], "--quiet", "train", "--data", workspace["data"], "--out", str(ckpt)]
    assert main(args) == 0
    return {**workspace, "ckpt": str(ckpt)}


def test_synth_writes_a_labelled_corpus(capsys, workspace):
    dialogues = read_dialogues(workspace["data"])
    assert len(dialogues) == 12
    assert all(d.emotion is not None and d.intent is not None for d in dialogues)
    assert "LABEL HISTOGRAM" in capsys.readouterr().out


def test_synth_with_noise(tmp_path, tiny_config_file):
    out = tmp_path / "noisy.jsonl"
    args = ["--config", tiny_config_file, "--quiet", "synth", "--n", "20", "--out", str(out), "--noise", "0.5"]
    assert main(args) == 0
    assert len(read_dialogues(str(out))) == 20


def test_train_writes_checkpoint_and_log(trained):
    assert (trained["dir"] / "model.rfd").exists()
    log = (trained["dir"] / "model.csv").read_text(encoding="utf-8").splitlines()
    assert log[0].startswith("step,lr,L_em,L_twice,L_res,L,val_L")
    assert len(log) == 4


def test_generate(trained):
    out = trained["dir"] / "responses.jsonl"
    args = ["--config", trained["config"], "--quiet", "generate", "--ckpt", trained["ckpt"], "--input", trained["data"], "--out", str(out)]
    assert main(args) == 0
    rows = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
    assert len(rows) == 12
    assert set(rows[0]) == {"id", "response", "emotion", "intent_first", "intent_twice"}


@pytest.mark.parametrize("error, code", [(UntrainedModelError("decoder is untrained"), 4), (CorpusError("bad batch"), 2)])
def test_generate_keeps_pipeline_exit_codes(trained, monkeypatch, error, code):
    def broken(self, *args, **kwargs):
        raise error

    monkeypatch.setattr(ReflectDiffu, "respond", broken)
    out = trained["dir"] / "responses.jsonl"
    args = ["--config", trained["config"], "--quiet", "generate", "--ckpt", trained["ckpt"], "--input", trained["data"], "--out", str(out)]
    assert main(args) == code
    assert not out.exists()


def test_eval_with_a_checkpoint(trained):
    out = trained["dir"] / "report.json"
    args = ["--config", trained["config"], "--quiet", "eval", "--ckpt", trained["ckpt"], "--data", trained["data"], "--out", str(out)]
    assert main(args) == 0
    report = json.loads(out.read_text(encoding="utf-8"))
    assert 0.0 <= report["Acc_emo"] <= 100.0
    assert 0.0 <= report["Acc_Intent"] <= 100.0
    assert report["PPL"] >= 1.0
    assert report["n_samples"] == 12


def test_eval_gold_only(workspace):
    out = workspace["dir"] / "gold.json"
    args = ["--config", workspace["config"], "eval", "--gold-only", "--data", workspace["data"], "--out", str(out)]
    assert main(args) == 0
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["B-1"] == pytest.approx(100.0)
    assert report["Acc_emo"] is None and report["PPL"] is None


def test_eval_needs_a_checkpoint(workspace):
    out = workspace["dir"] / "report.json"
    assert main(["--config", workspace["config"], "eval", "--data", workspace["data"], "--out", str(out)]) == 2
    assert not out.exists()


def test_annotate(trained):
    out = trained["dir"] / "annotated.jsonl"
    args = ["--config", trained["config"], "--quiet", "annotate", "--ckpt", trained["ckpt"], "--data", trained["data"], "--out", str(out)]
    assert main(args) == 0
    annotated = read_dialogues(str(out))
    assert len(annotated) == 12
    for d in annotated:
        for turn in d.turns:
            assert len(turn.tag_ids) == len(turn.tokens)
            if turn.speaker != Speaker.USER:
                assert set(turn.tag_ids) <= {0}


def test_missing_checkpoint_exit_code(workspace):
    args = ["--config", workspace["config"], "generate", "--ckpt", str(workspace["dir"] / "none.rfd"), "--input", workspace["data"], "--out", str(workspace["dir"] / "r.jsonl")]
    assert main(args) == 4


def test_vocabulary_mismatch_exit_code(trained):
    state = load_checkpoint(trained["ckpt"])
    state.vocab = grown_vocab(state.vocab)
    bad = trained["dir"] / "grown.rfd"
    save_checkpoint(state, str(bad))
    out = trained["dir"] / "r.jsonl"
    args = ["--config", trained["config"], "generate", "--ckpt", str(bad), "--input", trained["data"], "--out", str(out)]
    assert main(args) == 4
    assert not out.exists()


def test_show_config(tiny_config_file, capsys):
    assert main(["--config", tiny_config_file, "--show-config"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["model"]["d_model"] == 8


@pytest.mark.parametrize("flags, model", [([], RunConfig), (["--report"], EvalReport)])
def test_schema_command_writes_the_model_schema(tmp_path, tiny_config_file, flags, model):
    out = tmp_path / "schema.json"
    assert main(["--config", tiny_config_file, "schema", "--out", str(out), *flags]) == 0
    assert json.loads(out.read_text(encoding="utf-8")) == model.model_json_schema()


def test_schema_command_prints_to_stdout(tiny_config_file, capsys):
    assert main(["--config", tiny_config_file, "schema"]) == 0
    assert json.loads(capsys.readouterr().out) == RunConfig.model_json_schema()


def test_no_command(tiny_config_file):
    assert main(["--config", tiny_config_file]) == 2


def test_bad_config_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(tiny_document(model={"n_heads": 3})), encoding="utf-8")
    assert main(["--config", str(path), "--show-config"]) == 2


def test_argument_errors(tiny_config_file):
    assert main(["--config", tiny_config_file, "synth", "--out", "x.jsonl"]) == 2
