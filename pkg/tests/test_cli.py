import json
import os

import numpy as np
import pytest

from dde.cli import main, load_config, config_hash
from dde.data import ConfigError
from dde import data


SMALL_CFG = {
    "seed": 3,
    "data": {"counts": {"train": 4, "calibration": 3, "test": 3},
             "pairs_per_factor": 20},
    "teacher": {"epochs": 1,
                "arch": {"widths": [4, 8], "latent_dim": 10,
                         "rep_dims": {"haze": [1], "backdrop": [3]}}},
    "distill": {"epochs": 1, "ratio": 0.5},
    "bench": {"runs": 5},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps(SMALL_CFG))
    assert main(["gen-data", "--config", str(cfg), "--out", str(d / "ds")]) == 0
    assert main(["train-teacher", "--config", str(cfg), "--data", str(d / "ds"),
                 "--out", str(d / "teacher.bin")]) == 0
    assert main(["distill", "--config", str(cfg), "--data", str(d / "ds"),
                 "--teacher", str(d / "teacher.bin"),
                 "--out", str(d / "student.bin"),
                 "--trace", str(d / "trace.csv")]) == 0
    return d


class TestConfigValidation:
    def test_unknown_top_level_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 1, "bogus": {}}))
        with pytest.raises(ConfigError, match="bogus"):
            load_config(str(p))

    def test_unknown_section_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"data": {"countz": {}}}))
        with pytest.raises(ConfigError, match="countz"):
            load_config(str(p))

    def test_invalid_json_reports_line(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"seed": 1,\n "data": }')
        with pytest.raises(ConfigError, match="line 2"):
            load_config(str(p))

    def test_bad_config_exits_2(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"nope": 1}))
        assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "d")]) == 2

    def test_missing_config_file_exits_2(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "absent.json"),
                     "--out", str(tmp_path / "d")]) == 2

    def test_missing_required_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["gen-data"])
        assert e.value.code == 2

    def test_config_hash_is_stable(self):
        a = config_hash({"b": 1, "a": 2})
        b = config_hash({"a": 2, "b": 1})
        assert a == b and len(a) == 64


class TestArtifacts:
    def test_manifest_embeds_provenance(self, workdir):
        m = json.loads((workdir / "ds" / "manifest.json").read_text())
        prov = m["provenance"]
        assert prov["seed"] == 3
        assert len(prov["config_sha256"]) == 64
        assert prov["version"]

    def test_weight_files_embed_provenance(self, workdir):
        import struct
        blob = (workdir / "teacher.bin").read_bytes()
        (hlen,) = struct.unpack("<Q", blob[4:12])
        header = json.loads(blob[12:12 + hlen])
        assert header["meta"]["seed"] == 3

    def test_trace_csv_has_provenance_columns(self, workdir):
        head = (workdir / "trace.csv").read_text().splitlines()[0]
        for col in ("config_sha256", "seed", "version"):
            assert col in head

    def test_certify_outputs(self, workdir):
        cfg = workdir / "cfg.json"
        rc = main(["certify", "--config", str(cfg), "--data", str(workdir / "ds"),
                   "--model", str(workdir / "student.bin"),
                   "--out-json", str(workdir / "cert.json"),
                   "--out-csv", str(workdir / "zeta.csv")])
        assert rc == 0
        rep = json.loads((workdir / "cert.json").read_text())
        assert set(rep["zeta"]) == {"D", "A", "I"}
        assert rep["provenance"]["seed"] == 3
        rows = (workdir / "zeta.csv").read_text().strip().splitlines()
        assert rows[0].startswith("m,")
        assert len(rows) == 1 + len(rep["zeta_vs_m"])

    def test_evaluate_output(self, workdir):
        cfg = workdir / "cfg.json"
        rc = main(["evaluate", "--config", str(cfg), "--data", str(workdir / "ds"),
                   "--teacher", str(workdir / "teacher.bin"),
                   "--student", str(workdir / "student.bin"),
                   "--out", str(workdir / "eval.json")])
        assert rc == 0
        rep = json.loads((workdir / "eval.json").read_text())
        assert set(rep["auroc"]) == {"teacher", "student"}
        assert set(rep["auroc"]["teacher"]) == {"haze", "backdrop"}
        assert rep["model_bytes"]["student"] < rep["model_bytes"]["teacher"]
        assert rep["timing"]["student"]["runs"] == 5

    def test_corrupt_weights_exit_3(self, workdir, tmp_path):
        bad = tmp_path / "bad.bin"
        blob = bytearray((workdir / "student.bin").read_bytes())
        blob[-1] ^= 0xFF
        bad.write_bytes(bytes(blob))
        rc = main(["certify", "--config", str(workdir / "cfg.json"),
                   "--data", str(workdir / "ds"), "--model", str(bad),
                   "--out-json", str(tmp_path / "c.json"),
                   "--out-csv", str(tmp_path / "z.csv")])
        assert rc == 3


class TestSeedOverride:
    def test_seed_flag_changes_data(self, workdir, tmp_path):
        cfg = workdir / "cfg.json"
        assert main(["gen-data", "--config", str(cfg), "--seed", "99",
                     "--out", str(tmp_path / "ds99")]) == 0
        a = data.load(str(workdir / "ds"))
        b = data.load(str(tmp_path / "ds99"))
        assert not np.array_equal(a.images, b.images)

    def test_gen_data_repeatable(self, workdir, tmp_path):
        cfg = workdir / "cfg.json"
        assert main(["gen-data", "--config", str(cfg),
                     "--out", str(tmp_path / "again")]) == 0
        a = (workdir / "ds" / "manifest.json").read_bytes()
        b = (tmp_path / "again" / "manifest.json").read_bytes()
        assert a == b
        for name in sorted(os.listdir(workdir / "ds")):
            if name.endswith(".ppm"):
                assert ((workdir / "ds" / name).read_bytes()
                        == (tmp_path / "again" / name).read_bytes())
