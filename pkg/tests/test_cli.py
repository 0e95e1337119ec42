import filecmp
import hashlib
import json

import numpy as np
import pytest

from safeperi import cli
from safeperi.config import RunConfig


def tree_digest(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[p.relative_to(root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "raw"), "--subjects", "3", "--scales", "1,1.25"]) == 0
    assert cli.main(["normalize", "--annotations", str(root / "raw" / "annotations.csv"),
                     "--out", str(root / "norm")]) == 0
    return root


def test_synth_is_reproducible(small, tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path), "--subjects", "3", "--scales", "1,1.25"]) == 0
    assert tree_digest(tmp_path) == tree_digest(small / "raw")


def test_extract_safe_descriptor_size(small, tmp_path):
    assert cli.main(["extract", "--annotations", str(small / "norm" / "annotations.csv"),
                     "--out", str(tmp_path), "--matcher", "safe"]) == 0
    files = sorted((tmp_path / "safe").glob("*.json"))
    assert len(files) == 12
    d = json.loads(files[0].read_text())
    assert np.asarray(d["coeffs"]).size == 144 * 2  # complex as (re, im)
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["matchers"] == ["safe"] and "workers" not in cfg


def test_match_from_descriptors_equals_on_the_fly(small, tmp_path):
    ann = str(small / "norm" / "annotations.csv")
    assert cli.main(["extract", "--annotations", ann, "--out", str(tmp_path / "d"), "--matcher", "hog"]) == 0
    assert cli.main(["match", "--annotations", ann, "--out", str(tmp_path / "a"), "--matcher", "hog",
                     "--descriptors", str(tmp_path / "d")]) == 0
    assert cli.main(["match", "--annotations", ann, "--out", str(tmp_path / "b"), "--matcher", "hog"]) == 0
    assert filecmp.cmp(tmp_path / "a" / "hog.csv", tmp_path / "b" / "hog.csv", shallow=False)


def test_eval_then_rerun_from_report(small, tmp_path):
    ann = str(small / "norm" / "annotations.csv")
    before = tree_digest(small / "norm")
    assert cli.main(["eval", "--annotations", ann, "--out", str(tmp_path / "a"), "--matcher", "safe,lbp",
                     "--nf", "3"]) == 0
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["config"]["nf"] == 3 and set(report["matchers"]) == {"safe", "lbp"}
    assert cli.main(["eval", "--annotations", ann, "--out", str(tmp_path / "b"),
                     "--config", str(tmp_path / "a" / "report.json")]) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert tree_digest(small / "norm") == before


def test_fuse_and_report_subcommands(small, tmp_path):
    ann = str(small / "norm" / "annotations.csv")
    assert cli.main(["match", "--annotations", ann, "--out", str(tmp_path), "--matcher", "safe,hog"]) == 0
    scores = [str(tmp_path / "safe.csv"), str(tmp_path / "hog.csv")]
    assert cli.main(["fuse", "--scores", *scores, "--annotations", ann, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "safe_hog.csv").exists() and (tmp_path / "model_safe_hog.json").exists()
    assert cli.main(["report", "--scores", *scores, str(tmp_path / "safe_hog.csv"), "--annotations", ann,
                     "--format", "json", "--out", str(tmp_path / "rep")]) == 0
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert set(report["matchers"]) == {"safe", "hog"} and set(report["fusion"]) == {"safe+hog"}
    assert not (tmp_path / "rep" / "report.csv").exists()


class TestConfigPrecedence:
    def parse(self, *argv):
        return cli.build_config(cli.build_parser().parse_args(["eval", "--annotations", "a", "--out", "o", *argv]))

    def test_defaults(self):
        assert self.parse() == RunConfig()

    def test_file_then_flags(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"nf": 6, "sift_norm": "avg", "matchers": ["safe", "sift"]}))
        cfg = self.parse("--config", str(path), "--nf", "5")
        assert cfg.nf == 5 and cfg.sift_norm == "avg" and cfg.matchers == ["safe", "sift"]

    def test_matcher_flag_resets_stale_fusion(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"fusion": "safe+hog"}))
        assert self.parse("--config", str(path), "--matcher", "safe,lbp").fusion == "all"
        with pytest.raises(Exception):
            self.parse("--matcher", "safe,lbp", "--fusion", "safe+hog")


class TestExitCodes:
    def test_usage_errors(self, capsys):
        assert cli.main([]) == 2
        assert cli.main(["eval", "--annotations", "x"]) == 2
        assert cli.main(["eval", "--annotations", "x", "--out", "y", "--matcher", "nope"]) == 2
        assert cli.main(["eval", "--annotations", "x", "--out", "y", "--nf", "0"]) == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert all(line.startswith("error: ") for line in err)

    def test_unknown_config_key(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text('{"bogus": 1}')
        assert cli.main(["eval", "--annotations", "x", "--out", "y", "--config", str(path)]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_runtime_errors(self, tmp_path, capsys):
        assert cli.main(["normalize", "--annotations", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 1
        bad = tmp_path / "bad.csv"
        bad.write_text("image_path,subject_id\nx.png,s\n")
        assert cli.main(["eval", "--annotations", str(bad), "--out", str(tmp_path / "o")]) == 1
        lines = capsys.readouterr().err.strip().splitlines()
        assert len(lines) == 2 and all(line.startswith("error: ") for line in lines)
