import json
import os

import pytest
import torch

from cli import main, parse_args


SMALL = {
    "nodes_per_class": 10,
    "intra_p": 0.3,
    "inter_p": 0.02,
    "vocab_size": 100,
    "hidden_size": 16,
    "lm_layers": 1,
    "lm_heads": 2,
    "gnn_heads": 2,
    "num_gnn_layers": 1,
    "max_len": 16,
    "batch_anchors": 4,
    "max_steps": 3,
    "ppr_topk": 8,
    "tasks": 20,
    "probe_epochs": 50,
    "log_every": 0,
}


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for key in list(os.environ):
        if key.startswith("UNIGRAPH_"):
            monkeypatch.delenv(key)
    config = dict(SMALL, data_dir=str(tmp_path / "data"), run_dir=str(tmp_path / "run"))
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config), encoding="utf-8")
    return tmp_path, ["--config", str(path)]


@pytest.fixture
def torch_runtime():
    """Undo the global switches --deterministic sets."""
    threads = torch.get_num_threads()
    yield
    torch.use_deterministic_algorithms(False)
    torch.set_num_threads(threads)


def run(command, flags, *extra):
    return main([command, *flags, *extra])


class TestPipeline:
    def test_synthetic_end_to_end(self, workspace):
        root, flags = workspace
        assert run("gen-synth", flags) == 0
        assert (root / "data" / "nodes.jsonl").exists()
        assert (root / "data" / "nodes.jsonl.manifest.json").exists()

        assert run("pretrain", flags) == 0
        log_lines = (root / "run" / "train_log.jsonl").read_text().splitlines()
        assert len(log_lines) == 3
        assert (root / "run" / "checkpoint.pt.manifest.json").exists()

        assert run("embed", flags) == 0
        rows = (root / "run" / "embeddings.tsv").read_text().splitlines()
        assert rows[0] == "#dim=16"
        assert len(rows) == 31
        manifest = json.loads((root / "run" / "embeddings.tsv.manifest.json").read_text())
        assert manifest["checkpoint_step"] == 3
        assert len(manifest["parameter_checksum"]) == 64

        assert run("fewshot", flags, "--ways", "3", "--shots", "3") == 0
        report = json.loads((root / "run" / "fewshot_report.json").read_text())
        assert set(report) == {"mean", "std", "N", "K", "num_tasks"}
        assert report["num_tasks"] == 20
        assert 0.0 <= report["mean"] <= 1.0

        assert run("probe", flags) == 0
        probe = json.loads((root / "run" / "probe_report.json").read_text())
        assert 0.0 <= probe["test_accuracy"] <= 1.0
        assert "chance_accuracy" in probe

        assert run("emit-instructions", flags, "--template-domain", "citation") == 0
        records = (root / "run" / "instructions_citation.jsonl").read_text().splitlines()
        assert len(records) == 6
        assert json.loads(records[0])["prompt"].endswith("Answer: ")

    def test_resume_continues_the_step_count(self, workspace):
        root, flags = workspace
        assert run("gen-synth", flags) == 0
        assert run("pretrain", flags) == 0
        assert run("pretrain", flags, "--resume", "--max-steps", "5") == 0
        assert len((root / "run" / "train_log.jsonl").read_text().splitlines()) == 5

    def test_resume_rejects_changed_model(self, workspace):
        root, flags = workspace
        assert run("gen-synth", flags) == 0
        assert run("pretrain", flags) == 0
        assert run("pretrain", flags, "--resume", "--mask-rate", "0.5") == 1

    def test_repeat_runs_are_byte_identical(self, workspace, torch_runtime):
        root, flags = workspace
        assert run("gen-synth", flags) == 0
        artifacts = (
            "train_log.jsonl", "checkpoint.pt", "checkpoint.pt.manifest.json", "vocab.json",
            "embeddings.tsv", "fewshot_report.json",
        )
        outputs = []
        for _ in range(2):
            for command in ("pretrain", "embed", "fewshot"):
                assert run(command, flags, "--deterministic") == 0
            outputs.append([(root / "run" / artifact).read_bytes() for artifact in artifacts])
        assert outputs[0] == outputs[1]


class TestCommands:
    def test_gradcheck_passes(self, workspace, tmp_path):
        _, flags = workspace
        out = tmp_path / "gradcheck.json"
        assert run("gradcheck", flags, "--out", str(out)) == 0
        assert json.loads(out.read_text())["passed"] is True

    def test_sample_ppr_prints_json(self, workspace, capsys):
        _, flags = workspace
        assert run("gen-synth", flags) == 0
        capsys.readouterr()
        assert run("sample-ppr", flags, "--anchor", "0", "--topk", "5") == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["anchor"] == 0
        assert payload["topk"] == 5
        assert 0 in payload["nodes"]
        assert len(payload["nodes"]) <= 6
        assert payload["scores"] == sorted(payload["scores"], reverse=True)
        assert payload["max_residual_ratio"] < payload["epsilon"]

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as info:
            parse_args(["train-everything"])
        assert info.value.code == 2

    def test_runtime_error_returns_one(self, workspace, caplog):
        _, flags = workspace
        assert run("embed", flags) == 1
        assert "FileNotFoundError" in caplog.text

    def test_unknown_config_key(self, tmp_path, caplog):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"mask_rt": 0.5}))
        assert main(["gen-synth", "--config", str(path)]) == 1
        assert "mask_rt" in caplog.text

    def test_ablation_switches(self, workspace):
        root, flags = workspace
        assert run("gen-synth", flags) == 0
        assert run("pretrain", flags, "--no-use-gnn", "--no-use-mlm", "--sampler", "neighbor", "--sampler-hops", "1") == 0
        manifest = json.loads((root / "run" / "checkpoint.pt.manifest.json").read_text())
        assert manifest["pretrain_config"]["use_gnn"] is False
        assert manifest["pretrain_config"]["sampler"] == "neighbor"
        assert run("embed", flags, "--no-use-gnn", "--no-use-mlm", "--sampler", "neighbor", "--sampler-hops", "1") == 0
        assert len((root / "run" / "embeddings.tsv").read_text().splitlines()) == 31

    def test_edge_pair_split_export(self, workspace):
        root, flags = workspace
        data = root / "data"
        data.mkdir()
        (data / "nodes.jsonl").write_text(
            "".join(json.dumps({"id": i, "text": f"Node {i}\nAbout node {i}."}) + "\n" for i in range(3))
        )
        (data / "edges.jsonl").write_text(
            json.dumps({"src": 0, "dst": 1, "text": "cites"}) + "\n" + json.dumps({"src": 1, "dst": 2, "text": "extends"}) + "\n"
        )
        (data / "splits.json").write_text(json.dumps({"train": [[0, 1]], "test": [[2, 1]]}))
        emb = root / "emb.tsv"
        emb.write_text("#dim=2\n0\t1 0\n1\t0 1\n2\t1 1\n")
        out = root / "kg.jsonl"
        assert run("emit-instructions", flags, "--template-domain", "knowledge",
                   "--embeddings", str(emb), "--out", str(out)) == 0
        (record,) = [json.loads(line) for line in out.read_text().splitlines()]
        assert record["target"] == "extends"
        assert record["embedding_rows"] == [1, 2]
        assert run("emit-instructions", flags, "--template-domain", "citation", "--embeddings", str(emb)) == 1
