"""Provenance manifests: hashing, staleness detection, relocatability."""

import json

import pytest

from noiselur.manifest import (check_upstream, digest_of, file_sha256,
                               hash_files, load_manifest, output_path,
                               write_manifest)


@pytest.fixture
def run_dir(tmp_path):
    src = tmp_path / "src"
    out = tmp_path / "out"
    src.mkdir()
    out.mkdir()
    (src / "raw.txt").write_text("upstream bytes")
    (out / "result.txt").write_text("downstream bytes")
    write_manifest(out, command="demo", seed=3, config_digest="c" * 64,
                   inputs=hash_files({"raw.txt": src / "raw.txt"}),
                   output_paths={"result.txt": out / "result.txt"},
                   extra={"note": 1})
    return tmp_path


class TestHashing:
    def test_digest_of_is_order_insensitive(self):
        assert digest_of({"a": 1, "b": 2}) == digest_of({"b": 2, "a": 1})
        assert digest_of({"a": 1}) != digest_of({"a": 2})

    def test_file_sha256_known_value(self, tmp_path):
        p = tmp_path / "f"
        p.write_bytes(b"abc")
        assert file_sha256(p) == ("ba7816bf8f01cfea414140de5dae2223"
                                  "b00361a396177a9cb410ff61f20015ad")

    def test_hash_files_missing_input(self, tmp_path):
        with pytest.raises(ValueError, match="not found"):
            hash_files({"gone": tmp_path / "gone.txt"})


class TestRoundTrip:
    def test_load_resolves_paths(self, run_dir):
        man = load_manifest(run_dir / "out")
        check_upstream(man, what="demo artifact")
        assert output_path(man, "result.txt").read_text() \
            == "downstream bytes"
        assert man["extra"] == {"note": 1}

    def test_stored_paths_are_relative(self, run_dir):
        raw = json.loads((run_dir / "out/manifest.json").read_text())
        assert raw["outputs"]["result.txt"]["path"] == "result.txt"
        assert raw["inputs"]["raw.txt"]["path"] == "../src/raw.txt"

    def test_no_timestamps(self, run_dir):
        raw = (run_dir / "out/manifest.json").read_text()
        assert "time" not in raw.lower()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ValueError, match="upstream command"):
            load_manifest(tmp_path)

    def test_not_a_manifest(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text(json.dumps({"format": "something-else"}))
        with pytest.raises(ValueError, match="not a manifest"):
            load_manifest(p)

    def test_unknown_output_name(self, run_dir):
        man = load_manifest(run_dir / "out")
        with pytest.raises(ValueError, match="lists no output"):
            output_path(man, "absent.bin")


class TestStaleness:
    def test_clean_tree_passes(self, run_dir):
        check_upstream(load_manifest(run_dir / "out"), what="x")

    def test_corrupted_output(self, run_dir):
        (run_dir / "out/result.txt").write_text("tampered")
        with pytest.raises(ValueError, match="re-run 'demo'"):
            check_upstream(load_manifest(run_dir / "out"), what="x")

    def test_changed_input(self, run_dir):
        (run_dir / "src/raw.txt").write_text("edited later")
        with pytest.raises(ValueError, match="input 'raw.txt'"):
            check_upstream(load_manifest(run_dir / "out"), what="x")

    def test_missing_input(self, run_dir):
        (run_dir / "src/raw.txt").unlink()
        with pytest.raises(ValueError, match="missing"):
            check_upstream(load_manifest(run_dir / "out"), what="x")

    def test_moved_tree_still_validates(self, run_dir, tmp_path_factory):
        import shutil

        dest = tmp_path_factory.mktemp("moved") / "tree"
        shutil.copytree(run_dir, dest)
        shutil.rmtree(run_dir)
        man = load_manifest(dest / "out")
        check_upstream(man, what="x")
        assert output_path(man, "result.txt").read_text() \
            == "downstream bytes"

    def test_rewrite_is_byte_identical(self, run_dir):
        out = run_dir / "out"
        before = file_sha256(out / "manifest.json")
        write_manifest(out, command="demo", seed=3,
                       config_digest="c" * 64,
                       inputs=hash_files(
                           {"raw.txt": run_dir / "src/raw.txt"}),
                       output_paths={"result.txt": out / "result.txt"},
                       extra={"note": 1})
        assert file_sha256(out / "manifest.json") == before
