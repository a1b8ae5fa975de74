import struct

import numpy as np
import pytest
from PIL import Image

from embed_exporter import ExportJob, export
from embed_exporter.cli import run as cli_run

# the consumer of the FEMB contract
from synthdetect.semantic import read_embedding_file


def _write_ppm(path, seed, size=16):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PPM")
    return arr


@pytest.fixture
def corpus(tmp_path):
    names = ["a.ppm", "b.ppm", "dup_of_a.ppm"]
    arr_a = _write_ppm(tmp_path / "a.ppm", seed=1)
    _write_ppm(tmp_path / "b.ppm", seed=2)
    Image.fromarray(arr_a, "RGB").save(tmp_path / "dup_of_a.ppm",
                                       format="PPM")
    man = tmp_path / "manifest.csv"
    lines = ["path,label,split"] + [f"{n},0,test" for n in names]
    man.write_text("\n".join(lines) + "\n")
    return tmp_path, str(man), names


def _parse_femb_bytes(blob):
    """Independent struct-level walk of the byte layout."""
    assert blob[:4] == b"FEMB"
    version, dim = struct.unpack_from("<II", blob, 4)
    assert version == 1
    (count,) = struct.unpack_from("<Q", blob, 12)
    pos = 20
    records = {}
    for _ in range(count):
        (idlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        rid = blob[pos:pos + idlen].decode("utf-8")
        pos += idlen
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=pos)
        pos += 4 * dim
        records[rid] = vec
    assert pos == len(blob)
    return dim, records


class TestExport:
    def test_three_image_fixture_validates_and_loads(self, corpus):
        root, man, names = corpus
        out = root / "embeds.femb"
        n = export(ExportJob(manifest=man, out=str(out),
                             encoder="tiny-deterministic", tiny_dim=32))
        assert n == 3
        dim, raw = _parse_femb_bytes(out.read_bytes())
        assert dim == 32 and set(raw) == set(names)
        # loads through the detector-side reader with matching metadata
        loaded = read_embedding_file(out)
        assert set(loaded) == set(names)
        for name in names:
            np.testing.assert_array_equal(
                loaded[name].vector, raw[name].astype(np.float64))
            assert abs(np.linalg.norm(loaded[name].vector) - 1.0) < 1e-6

    def test_duplicate_images_get_identical_vectors(self, corpus):
        root, man, names = corpus
        out = root / "embeds.femb"
        export(ExportJob(manifest=man, out=str(out),
                         encoder="tiny-deterministic"))
        loaded = read_embedding_file(out)
        np.testing.assert_array_equal(loaded["a.ppm"].vector,
                                      loaded["dup_of_a.ppm"].vector)
        assert not np.array_equal(loaded["a.ppm"].vector,
                                  loaded["b.ppm"].vector)

    def test_empty_manifest_gives_valid_empty_file(self, tmp_path):
        man = tmp_path / "m.csv"
        man.write_text("path,label,split\n")
        out = tmp_path / "e.femb"
        n = export(ExportJob(manifest=str(man), out=str(out),
                             encoder="tiny-deterministic", tiny_dim=16))
        assert n == 0
        dim, raw = _parse_femb_bytes(out.read_bytes())
        assert dim == 16 and raw == {}
        assert read_embedding_file(out) == {}

    def test_export_is_deterministic(self, corpus):
        root, man, _ = corpus
        a = root / "a.femb"
        b = root / "b.femb"
        export(ExportJob(manifest=man, out=str(a),
                         encoder="tiny-deterministic"))
        export(ExportJob(manifest=man, out=str(b),
                         encoder="tiny-deterministic"))
        assert a.read_bytes() == b.read_bytes()

    def test_missing_image_fails_and_leaves_no_output(self, tmp_path):
        man = tmp_path / "m.csv"
        man.write_text("path,label,split\nmissing.ppm,0,test\n")
        out = tmp_path / "e.femb"
        with pytest.raises(FileNotFoundError):
            export(ExportJob(manifest=str(man), out=str(out),
                             encoder="tiny-deterministic"))
        assert not out.exists()
        assert not list(tmp_path.glob("*.femb.tmp"))

    def test_dim_assertion(self, corpus):
        root, man, _ = corpus
        with pytest.raises(ValueError, match="dim"):
            export(ExportJob(manifest=man, out=str(root / "e.femb"),
                             encoder="tiny-deterministic", tiny_dim=32,
                             dim=768))

    def test_unknown_encoder(self, corpus):
        root, man, _ = corpus
        with pytest.raises(ValueError, match="unknown encoder"):
            export(ExportJob(manifest=man, out=str(root / "e.femb"),
                             encoder="resnet"))


class TestCli:
    def test_cli_roundtrip(self, corpus, capsys):
        root, man, _ = corpus
        out = root / "cli.femb"
        rc = cli_run(["--manifest", man, "--out", str(out),
                      "--encoder", "tiny-deterministic", "--tiny-dim",
                      "24"])
        captured = capsys.readouterr()
        assert rc == 0
        assert f"embeddings,{out}" in captured.out
        assert "count,3" in captured.out
        assert read_embedding_file(out)["a.ppm"].vector.shape == (24,)

    def test_cli_missing_image_exit_2(self, tmp_path):
        man = tmp_path / "m.csv"
        man.write_text("path,label,split\nnope.ppm,0,test\n")
        rc = cli_run(["--manifest", str(man), "--out",
                      str(tmp_path / "o.femb"), "--encoder",
                      "tiny-deterministic"])
        assert rc == 2
