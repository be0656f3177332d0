import json
import shutil
from pathlib import Path

import pytest

from embercap.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(args, capsys):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def error_record(err):
    return json.loads(err.strip().splitlines()[-1])


def write_config(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def config(name):
    return json.loads((CONFIGS / name).read_text())


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(Path(d).rglob("*"))
            if p.is_file()}


class TestCarve:
    def test_c15n(self, tmp_path, capsys):
        code, out, _ = run(["carve", "--config", CONFIGS / "carve_c15n.json", "--out", tmp_path],
                           capsys)
        assert code == 0
        rep = json.loads((tmp_path / "partition.json").read_text())
        assert rep["cluster"]["formula"] == "C15NF12O12"
        assert rep["environment"]["formula"] == "C47B12"
        assert rep["auxiliary"]["formula"] == "F12O12B12"
        assert rep["auxiliary"]["n_components"] == 4
        assert rep["symmetry"]["symmetric"] is True
        for name in ("cluster.xyz", "environment.xyz", "auxiliary.xyz"):
            assert (tmp_path / name).is_file()
        assert "C15NF12O12" in out

    def test_family_batch(self, tmp_path, capsys):
        code, _, _ = run(["carve", "--config", CONFIGS / "carve_cluster_family.json", "--out",
                          tmp_path], capsys)
        assert code == 0
        batch = json.loads((tmp_path / "batch.json").read_text())
        assert [r["cluster"]["formula"] for r in batch["runs"]] == [
            "C15NF12O12", "C21NF18O9", "C24NF18O12", "C30NF24O9", "C36NF30O6"]

    def test_deterministic(self, tmp_path, capsys):
        for k in (1, 2):
            assert run(["carve", "--config", CONFIGS / "carve_c15n.json", "--out",
                        tmp_path / str(k)], capsys)[0] == 0
        assert files(tmp_path / "1") == files(tmp_path / "2")

    def test_empty_seeds(self, tmp_path, capsys):
        doc = config("carve_c15n.json")
        doc["structure"] = str(CONFIGS / "c62n.vasp")
        doc["seeds"] = {}
        code, _, err = run(["carve", "--config", write_config(tmp_path, "c.json", doc)], capsys)
        assert code == 2
        assert error_record(err)["error"] == "validation"

    def test_selector_matching_nothing(self, tmp_path, capsys):
        doc = config("carve_c15n.json")
        doc["structure"] = str(CONFIGS / "c62n.vasp")
        doc["seeds"] = {"n": {"element": "B"}}
        code, _, err = run(["carve", "--config", write_config(tmp_path, "c.json", doc),
                            "--out", tmp_path / "o"], capsys)
        assert code == 2 and "select no atoms" in error_record(err)["message"]

    def test_position_seeds(self, tmp_path, capsys):
        from embercap.lattice import parse_structure

        cell = parse_structure((CONFIGS / "c62n.vasp").read_text())
        n = cell.symbols.index("N")
        doc = config("carve_c15n.json")
        doc["structure"] = str(CONFIGS / "c62n.vasp")
        doc["seeds"]["n"] = {"positions": [list(cell.cart[n] + 0.05)]}
        code, _, _ = run(["carve", "--config", write_config(tmp_path, "c.json", doc),
                          "--out", tmp_path / "o", "--seed-tolerance", "0.2"], capsys)
        assert code == 0
        code, _, err = run(["carve", "--config", tmp_path / "c.json", "--out", tmp_path / "o",
                            "--seed-tolerance", "0.01"], capsys)
        assert code == 2 and "matches 0 sites" in error_record(err)["message"]

    def test_unknown_key_rejected(self, tmp_path, capsys):
        doc = config("carve_c15n.json")
        doc["structure"] = str(CONFIGS / "c62n.vasp")
        doc["colour"] = "blue"
        code, _, err = run(["carve", "--config", write_config(tmp_path, "c.json", doc)], capsys)
        assert code == 2 and "colour" in error_record(err)["message"]

    def test_corrupted_structure(self, tmp_path, capsys):
        lines = (CONFIGS / "c62n.vasp").read_text().splitlines()
        lines[4] = "0 0 abc"
        (tmp_path / "bad.vasp").write_text("\n".join(lines) + "\n")
        doc = config("carve_c15n.json")
        doc["structure"] = "bad.vasp"
        code, _, err = run(["carve", "--config", write_config(tmp_path, "c.json", doc)], capsys)
        rec = error_record(err)
        assert code == 3 and rec["error"] == "parse" and rec["line"] == 5


class TestOptimize:
    def test_disjoint(self, tmp_path, capsys):
        code, _, _ = run(["optimize", "--config", CONFIGS / "optimize_disjoint.json", "--out",
                          tmp_path], capsys)
        assert code == 0
        doc = json.loads((tmp_path / "oep.json").read_text())
        assert doc["schema"] == "embercap.oep.v1"
        assert doc["converged"] and doc["residual_max"] < 1e-10

    def test_chain_monotone_and_deterministic(self, tmp_path, capsys):
        for k in (1, 2):
            code, _, _ = run(["optimize", "--config", CONFIGS / "optimize_chain.json", "--out",
                              tmp_path / str(k)], capsys)
            assert code == 0
        rows = (tmp_path / "1" / "trace.tsv").read_text().splitlines()[1:]
        ws = [float(r.split("\t")[1]) for r in rows]
        assert all(b >= a - 1e-12 * abs(a) for a, b in zip(ws, ws[1:]))
        assert json.loads((tmp_path / "1" / "oep.json").read_text())["converged"]
        assert files(tmp_path / "1") == files(tmp_path / "2")
        assert (tmp_path / "1" / "vemb.field").read_text().startswith("# embercap field v1")

    def test_not_converged_still_writes(self, tmp_path, capsys):
        doc = config("optimize_chain.json")
        doc["model"] = str(CONFIGS / "ssh48.model")
        doc["oep"] = {"tolerance": 1e-12, "max_iter": 1}
        code, _, _ = run(["optimize", "--config", write_config(tmp_path, "o.json", doc),
                          "--out", tmp_path / "o"], capsys)
        assert code == 4
        assert not json.loads((tmp_path / "o" / "oep.json").read_text())["converged"]
        assert (tmp_path / "o" / "trace.tsv").is_file()

    def test_corrupted_model(self, tmp_path, capsys):
        lines = (CONFIGS / "ssh48.model").read_text().splitlines()
        lines[6] = "site 2 zero 0 0 0"
        (tmp_path / "bad.model").write_text("\n".join(lines) + "\n")
        doc = config("optimize_chain.json")
        doc["model"] = "bad.model"
        code, _, err = run(["optimize", "--config", write_config(tmp_path, "o.json", doc),
                            "--out", tmp_path / "o"], capsys)
        rec = error_record(err)
        assert code == 3 and rec["line"] == 7 and rec["source"].endswith("bad.model")

    def test_missing_model_file(self, tmp_path, capsys):
        doc = config("optimize_chain.json")
        doc["model"] = "nowhere.model"
        code, _, err = run(["optimize", "--config", write_config(tmp_path, "o.json", doc)],
                           capsys)
        assert code == 2 and "not found" in error_record(err)["message"]

    def test_invalid_json(self, tmp_path, capsys):
        p = tmp_path / "broken.json"
        p.write_text('{"model": "x",\n  "cluster_sites": [1,,2]}')
        code, _, err = run(["optimize", "--config", p], capsys)
        assert code == 3 and error_record(err)["line"] == 2


class TestSpectrum:
    def test_nv_model(self, tmp_path, capsys):
        code, _, _ = run(["spectrum", "--config", CONFIGS / "spectrum_nv.json", "--out",
                          tmp_path], capsys)
        assert code == 0
        doc = json.loads((tmp_path / "spectrum.json").read_text())
        assert doc["states"][0]["delta_e"] == 0.0

    def test_onsite_shift_leaves_delta_e_bytes(self, tmp_path, capsys):
        doc = config("spectrum_nv.json")
        run(["spectrum", "--config", write_config(tmp_path, "a.json", doc), "--out",
             tmp_path / "a"], capsys)
        doc["onsite_shift"] = 0.731
        run(["spectrum", "--config", write_config(tmp_path, "b.json", doc), "--out",
             tmp_path / "b"], capsys)
        assert (tmp_path / "a" / "spectrum.tsv").read_bytes() == \
            (tmp_path / "b" / "spectrum.tsv").read_bytes()
        # coefficients inside a degenerate manifold are basis dependent, dE and S^2 are not
        ta, tb = ([ln[:27] for ln in (tmp_path / d / "spectrum.txt").read_text().splitlines()[1:]]
                  for d in "ab")
        assert ta == tb
        da = json.loads((tmp_path / "a" / "spectrum.json").read_text())
        db = json.loads((tmp_path / "b" / "spectrum.json").read_text())
        assert [s["delta_e"] for s in da["states"]] == [s["delta_e"] for s in db["states"]]

    def test_fcidump(self, tmp_path, capsys):
        code, out, _ = run(["spectrum", "--config", CONFIGS / "spectrum_fcidump.json", "--out",
                            tmp_path], capsys)
        assert code == 0 and (tmp_path / "spectrum.txt").read_text() in out

    def test_bad_fcidump(self, tmp_path, capsys):
        text = (CONFIGS / "two_orbital.fcidump").read_text().replace("1   1   1   1",
                                                                     "1   9   1   1", 1)
        (tmp_path / "bad.fcidump").write_text(text)
        doc = {"integrals": "bad.fcidump"}
        code, _, err = run(["spectrum", "--config", write_config(tmp_path, "s.json", doc)],
                           capsys)
        assert code == 3 and error_record(err)["line"] == 5

    def test_two_sources_rejected(self, tmp_path, capsys):
        doc = {"integrals": str(CONFIGS / "two_orbital.fcidump"), "nv_model": {}}
        code, _, _ = run(["spectrum", "--config", write_config(tmp_path, "s.json", doc)],
                         capsys)
        assert code == 2

    def test_embedded_versus_bare(self, tmp_path, capsys):
        code, out, _ = run(["spectrum", "--config", CONFIGS / "spectrum_chain.json", "--out",
                            tmp_path], capsys)
        assert code == 0
        diff = json.loads((tmp_path / "diff.json").read_text())
        assert len(diff["excitations"]) == 3
        for name in ("spectrum_embedded.json", "spectrum_bare.json", "oep.json"):
            assert (tmp_path / name).is_file()
        assert "dE(0->1)" in out

    def test_sector_too_large(self, tmp_path, capsys):
        doc = {"integrals": str(CONFIGS / "two_orbital.fcidump"),
               "sectors": [{"sz": 0, "n_states": 9}]}
        code, _, err = run(["spectrum", "--config", write_config(tmp_path, "s.json", doc)],
                           capsys)
        assert code == 2 and error_record(err)["error"] == "validation"


class TestNvDemo:
    def test_table(self, tmp_path, capsys):
        code, out, _ = run(["nv-demo", "--config", CONFIGS / "nv_demo.json", "--out", tmp_path],
                           capsys)
        assert code == 0
        doc = json.loads((tmp_path / "nv_spectrum.json").read_text())
        assert [s["label"] for s in doc["states"]] == ["3A2", "1E", "1E", "1A1", "3E", "3E"]
        table = (tmp_path / "nv_table.txt").read_text()
        assert "|211⟩" in table and table == out

    def test_default_config(self, tmp_path, capsys, monkeypatch):
        monkeypatch.chdir(tmp_path)
        code, _, _ = run(["nv-demo"], capsys)
        assert code == 0 and (tmp_path / "embercap-out" / "nv_table.txt").is_file()


class TestReport:
    def test_summarizes_outputs(self, tmp_path, capsys):
        run(["carve", "--config", CONFIGS / "carve_c15n.json", "--out", tmp_path / "c"], capsys)
        run(["optimize", "--config", CONFIGS / "optimize_disjoint.json", "--out",
             tmp_path / "o"], capsys)
        run(["nv-demo", "--out", tmp_path / "n"], capsys)
        code, out, _ = run(["report", tmp_path / "c" / "partition.json",
                            tmp_path / "o" / "oep.json", tmp_path / "n" / "nv_spectrum.json"],
                           capsys)
        assert code == 0
        assert "C15NF12O12" in out and "OEP converged" in out and "3A2" in out

    def test_unknown_schema(self, tmp_path, capsys):
        p = write_config(tmp_path, "x.json", {"schema": "other"})
        code, _, _ = run(["report", p], capsys)
        assert code == 2

    def test_needs_input(self, capsys):
        assert run(["report"], capsys)[0] == 2


def test_console_script_runs(tmp_path):
    import subprocess

    exe = shutil.which("embercap")
    if exe is None:
        pytest.skip("console script not installed")
    proc = subprocess.run([exe, "nv-demo", "--out", str(tmp_path)], capture_output=True,
                          text=True, check=False)
    assert proc.returncode == 0 and "3A2" in proc.stdout
