import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from graphbackdoor import checkpoint
from graphbackdoor.cli import main
from graphbackdoor.config import ExperimentConfig, load_config, parse_config_text
from graphbackdoor.datasets import (SdfReport, dumps_jsonl, generate_toy_dataset, loads_jsonl, parse_sdf_subset,
                                    read_jsonl, record_to_graph, write_jsonl)
from graphbackdoor.denoiser import forward, init_model
from graphbackdoor.errors import (CheckpointError, ConfigError, DataError, InvalidGraph, MalformedCountsLine,
                                  SdfError, TruncatedBlock)
from graphbackdoor.graphs import Graph, ValenceTable, is_connected, is_valid_molecule
from graphbackdoor.sampling import SizeDistribution
from graphbackdoor.schedule import LimitDistributions, cosine_schedule, type_frequencies
from graphbackdoor.training import TrainedModel

from conftest import graphs, random_graph

VT = ValenceTable()
FIX = Path(__file__).parent / "fixtures"


class TestJsonl:
    def test_round_trip_500(self):
        rng = np.random.default_rng(0)
        gs = [random_graph(rng, int(rng.integers(1, 12))) for _ in range(500)]
        back = loads_jsonl(dumps_jsonl(gs), 4, 5)
        assert back == gs

    @given(st.lists(graphs(max_n=7), max_size=5))
    def test_round_trip_property(self, gs):
        assert loads_jsonl(dumps_jsonl(gs), 4, 5) == gs

    def test_file_round_trip_with_meta(self, tmp_path):
        gs = generate_toy_dataset(5, 9, VT, 0)
        write_jsonl(tmp_path / "g.jsonl", gs, [{"k": i} for i in range(5)])
        assert read_jsonl(tmp_path / "g.jsonl", 4, 5) == gs
        first = json.loads((tmp_path / "g.jsonl").read_text().splitlines()[0])
        assert first["meta"] == {"k": 0} and set(first) == {"n", "nodes", "edges", "meta"}

    @pytest.mark.parametrize("rec", [
        {"n": 2, "nodes": [0]},
        {"n": 2, "nodes": [0, 9]},
        {"n": 2, "nodes": [0, 0], "edges": [[1, 0, 1]]},
        {"n": 2, "nodes": [0, 0], "edges": [[0, 1, 0]]},
        {"n": 2, "nodes": [0, 0], "edges": [[0, 1]]},
        {"nodes": [0]},
    ])
    def test_bad_records(self, rec):
        with pytest.raises(InvalidGraph):
            record_to_graph(rec, 4, 5)

    def test_error_names_line(self):
        with pytest.raises(DataError, match="src:2"):
            loads_jsonl('{"n": 1, "nodes": [0]}\nnot json\n', 4, 5, source="src")


class TestSdf:
    def test_two_atom_block(self):
        gs = parse_sdf_subset((FIX / "methanol.sdf").read_bytes(), VT)
        assert len(gs) == 1
        g = gs[0]
        assert g.node_types().tolist() == [VT.node_index("C"), VT.node_index("O")]
        assert g.edges() == [(0, 1, VT.edge_index("single"))]

    def test_empty(self):
        assert parse_sdf_subset(b"", VT) == []

    def test_skip_and_strip_hydrogens(self):
        rep = SdfReport()
        gs = parse_sdf_subset((FIX / "mixed.sdf").read_text(), VT, report=rep)
        assert rep.parsed == 2 and len(rep.skipped) == 1
        assert rep.skipped[0][0] == 1 and "Si" in rep.skipped[0][2]
        ethene, hcn = gs
        assert ethene.n == 2 and ethene.edges() == [(0, 1, VT.edge_index("double"))]
        assert hcn.n == 2 and hcn.edges() == [(0, 1, VT.edge_index("triple"))]

    def test_keep_hydrogens_rejects_h(self):
        rep = SdfReport()
        parse_sdf_subset((FIX / "mixed.sdf").read_text(), VT, drop_hydrogens=False, report=rep)
        assert rep.parsed == 0 and len(rep.skipped) == 3

    def test_malformed_counts_line(self):
        text = (FIX / "methanol.sdf").read_text().splitlines()
        text[3] = "  x  1  0  0"
        with pytest.raises(MalformedCountsLine) as info:
            parse_sdf_subset("\n".join(text), VT)
        assert info.value.line == 4

    def test_truncated(self):
        text = (FIX / "methanol.sdf").read_text().splitlines()[:5]
        with pytest.raises(TruncatedBlock) as info:
            parse_sdf_subset("\n".join(text), VT)
        assert info.value.line >= 5

    def test_fuzz_10k(self):
        rng = np.random.default_rng(0)
        seeds = [(FIX / "methanol.sdf").read_bytes(), (FIX / "mixed.sdf").read_bytes()]
        alphabet = np.frombuffer(b" 0123456789.-CNOFHSi$MEND\nV2000", dtype=np.uint8)
        outcomes = {"ok": 0, "error": 0}
        for k in range(10_000):
            base = bytearray(seeds[k % 2])
            mode = k % 4
            if mode == 0:
                data = bytes(rng.integers(0, 256, size=int(rng.integers(0, 400)), dtype=np.uint8))
            elif mode == 1:
                for _ in range(int(rng.integers(1, 8))):
                    base[int(rng.integers(len(base)))] = int(rng.choice(alphabet))
                data = bytes(base)
            elif mode == 2:
                cut = int(rng.integers(len(base)))
                data = bytes(base[:cut])
            else:
                pos = int(rng.integers(len(base)))
                junk = bytes(rng.choice(alphabet, size=int(rng.integers(1, 30))))
                data = bytes(base[:pos]) + junk + bytes(base[pos:])
            try:
                for g in parse_sdf_subset(data, VT):
                    g.validate()
                outcomes["ok"] += 1
            except SdfError as exc:
                assert exc.line >= 1
                outcomes["error"] += 1
        assert outcomes["ok"] > 0 and outcomes["error"] > 0


class TestToyData:
    def test_valid_connected(self):
        gs = generate_toy_dataset(2000, 9, VT, 7)
        assert len(gs) == 2000
        assert all(is_valid_molecule(g, VT) and is_connected(g) for g in gs)
        sizes = {g.n for g in gs}
        assert sizes == set(range(2, 10))
        mX, _ = type_frequencies(gs)
        assert mX.argmax() == VT.node_index("C")

    def test_two_node(self):
        for g in generate_toy_dataset(50, 2, VT, 1):
            assert g.n == 2 and is_valid_molecule(g, VT)

    def test_deterministic(self):
        assert generate_toy_dataset(30, 9, VT, 5) == generate_toy_dataset(30, 9, VT, 5)

    def test_bad_max_n(self):
        with pytest.raises(DataError):
            generate_toy_dataset(5, 10, VT, 0)


def random_trained(rng) -> TrainedModel:
    a, d = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    widths = tuple(int(v) for v in rng.integers(1, 6, size=3))
    m = init_model(a, d, widths, int(rng.integers(1, 3)), rng_seed=int(rng.integers(1 << 30)),
                   max_n=int(rng.integers(2, 10)))
    cfg = ExperimentConfig(T=int(rng.integers(2, 20)), seed=int(rng.integers(100)))
    lim = LimitDistributions(rng.dirichlet(np.ones(a)), rng.dirichlet(np.ones(d)),
                             rng.dirichlet(np.ones(a)), rng.dirichlet(np.ones(d)), 0.5)
    sizes = tuple(sorted(rng.choice(np.arange(1, 10), size=3, replace=False).tolist()))
    probs = rng.dirichlet(np.ones(3))
    probs = tuple((probs / probs.sum()).tolist())
    return TrainedModel(m, cosine_schedule(cfg.T), lim, SizeDistribution(sizes, probs), cfg)


class TestCheckpoint:
    def test_round_trip_500(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            tm = random_trained(rng)
            back = checkpoint.loads(checkpoint.dumps(tm))
            assert back.model.arch() == tm.model.arch()
            assert all(torch.equal(back.model.params[k], tm.model.params[k]) for k in tm.model.params)
            assert np.array_equal(back.sched.alpha, tm.sched.alpha)
            assert np.array_equal(back.limits.mXB, tm.limits.mXB) and back.limits.r == tm.limits.r
            assert back.size_dist == tm.size_dist and back.config == tm.config

    def test_forward_bitwise(self, tmp_path):
        tm = random_trained(np.random.default_rng(1))
        tm.model = init_model(4, 5, (8, 4, 4), 2, rng_seed=3)
        checkpoint.save(tmp_path / "m.ckpt", tm)
        back = checkpoint.load(tmp_path / "m.ckpt")
        g = random_graph(np.random.default_rng(2), 6)
        a, b = forward(tm.model, g, 3, 10), forward(back.model, g, 3, 10)
        assert a.PX.tobytes() == b.PX.tobytes() and a.PE.tobytes() == b.PE.tobytes()

    def test_magic_and_layout(self):
        data = checkpoint.dumps(random_trained(np.random.default_rng(2)))
        assert data[:6] == b"DGDMB1"
        hlen = int.from_bytes(data[6:10], "little")
        header = json.loads(data[10:10 + hlen])
        assert header["format"] == 1 and "alpha" in header["schedule"] and header["tensors"]

    def test_corruption_detected(self):
        data = bytearray(checkpoint.dumps(random_trained(np.random.default_rng(3))))
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint.loads(b"XXXXXX" + bytes(data[6:]))
        flipped = bytearray(data)
        flipped[len(data) // 2] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            checkpoint.loads(bytes(flipped))
        with pytest.raises(CheckpointError):
            checkpoint.loads(bytes(data[:20]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            checkpoint.load(tmp_path / "nope.ckpt")


class TestConfig:
    def test_parse_and_fingerprint(self):
        cfg = parse_config_text("# comment\nT = 20\npersistent_trigger = false\nlr = 0.01\n")
        assert cfg.T == 20 and cfg.persistent_trigger is False and cfg.lr == 0.01
        again = parse_config_text(cfg.canonical_text())
        assert again == cfg and again.fingerprint() == cfg.fingerprint()
        assert cfg.fingerprint() != cfg.replace(T=21).fingerprint()

    @pytest.mark.parametrize("text", ["bogus = 1", "T = many", "T", "poison_rate = 100", "r = 0"])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_profiles(self):
        assert load_config(None, "desk").T == 50
        assert load_config(None, "full").T == 500
        with pytest.raises(ConfigError):
            load_config(None, "huge")


TINY_CFG = """toy_count = 60
T = 6
h_node = 8
h_edge = 4
h_global = 4
n_layers = 1
epochs = 2
batch_size = 16
poison_rate = 10
finetune_epochs = 1
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY_CFG)
    return d


class TestCli:
    def test_pipeline(self, workdir, capsys):
        cfg = str(workdir / "tiny.cfg")
        ck1, ck2 = str(workdir / "a.ckpt"), str(workdir / "b.ckpt")
        assert main(["train", "--config", cfg, "--seed", "1", "--out", ck1]) == 0
        first = json.loads(capsys.readouterr().out)
        assert main(["train", "--config", cfg, "--seed", "1", "--out", ck2]) == 0
        second = json.loads(capsys.readouterr().out)
        assert first["checksum"] == second["checksum"]
        assert Path(ck1).read_bytes() == Path(ck2).read_bytes()
        log = [json.loads(line) for line in Path(ck1 + ".log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in log] == [1, 2]

        out = str(workdir / "bd.jsonl")
        assert main(["sample", ck1, "--backdoored", "--count", "20", "--seed", "4", "--out", out]) == 0
        metas = [json.loads(line)["meta"] for line in Path(out).read_text().splitlines()]
        assert metas[3]["spawn_key"] == [3] and metas[0]["backdoored"] is True
        rep = str(workdir / "rep.json")
        assert main(["eval", out, "--mode", "backdoored", "--config", cfg, "--out", rep]) == 0
        report = json.loads(Path(rep).read_text())
        assert report["asr"] is not None and 0 <= report["asr"] <= 1 and report["count"] == 20
        assert report["fingerprint"] == load_config(cfg, "desk").fingerprint()

        assert main(["inspect-checkpoint", ck1]) == 0
        header = json.loads(capsys.readouterr().out)
        assert header["checksum"] == first["checksum"] and header["schedule"]["T"] == 6

        tuned = str(workdir / "tuned.ckpt")
        assert main(["defend-finetune", ck1, "--mode", "adversarial", "--epochs", "1", "--out", tuned]) == 0
        capsys.readouterr()

        ref = str(workdir / "ref.jsonl")
        assert main(["gen-data", "--config", cfg, "--count", "40", "--out", ref]) == 0
        det = str(workdir / "det.json")
        assert main(["defend-detect", out, "--reference", ref, "--out", det]) == 0
        assert len(json.loads(Path(det).read_text())["flags"]) == 20

    def test_ingest(self, workdir, capsys):
        out = str(workdir / "ing.jsonl")
        assert main(["ingest", str(FIX / "mixed.sdf"), "--out", out]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["parsed"] == 2 and summary["skipped"] == 1
        assert len(read_jsonl(out, 4, 5)) == 2

    def test_exit_codes(self, workdir, capsys):
        assert main(["train", "--bogus"]) == 1
        assert main(["frobnicate"]) == 1
        assert main(["sample", str(workdir / "missing.ckpt"), "--out", str(workdir / "x.jsonl")]) == 2
        (workdir / "junk.ckpt").write_bytes(b"not a checkpoint at all, clearly not" * 3)
        assert main(["inspect-checkpoint", str(workdir / "junk.ckpt")]) == 2
        assert main(["eval", str(workdir / "missing.jsonl")]) == 2
        bad = workdir / "bad.cfg"
        bad.write_text("nonsense = 3\n")
        assert main(["gen-data", "--config", str(bad), "--out", str(workdir / "y.jsonl")]) == 2
        err = capsys.readouterr().err
        assert "bad.cfg" in err and "missing.ckpt" in err

    def test_numeric_failure(self, workdir, capsys):
        cfg = workdir / "explode.cfg"
        cfg.write_text(TINY_CFG + "lr = 1e30\nepochs = 5\n")
        assert main(["train", "--config", str(cfg), "--out", str(workdir / "boom.ckpt")]) == 3
        assert "numeric" in capsys.readouterr().err

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "graphbackdoor.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "defend-finetune" in res.stdout
