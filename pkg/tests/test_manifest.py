import hashlib

import numpy as np
import pytest

from mtlvqe.data import (
    DegraderSpec,
    ManifestError,
    SplitRule,
    build_manifest,
    downscale,
    load_manifest,
    read_image,
)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_cardinality_and_pairing(corpus, tmp_path):
    res = build_manifest(corpus, tmp_path / "out", [22, 27, 32, 37], DegraderSpec("synthetic"))
    m = res.manifest
    assert len(m.entries) == 5 * 4
    assert res.new_entries == 20
    for e in m.entries:
        pair = m.load_pair(e)
        assert pair.hr.shape == (64, 64, 3) and pair.lr.shape == (32, 32, 3)
        assert np.array_equal(pair.lr, downscale(pair.hr, 2))
    assert m.degrader_ids == {"synthetic-dct8"}


def test_determinism_across_runs(corpus, tmp_path):
    spec = DegraderSpec("synthetic")
    a = build_manifest(corpus, tmp_path / "a", [22, 37], spec)
    b = build_manifest(corpus, tmp_path / "b", [22, 37], spec, workers=3)
    assert a.manifest.to_text() == b.manifest.to_text()
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_idempotent_rerun(corpus, tmp_path):
    spec = DegraderSpec("synthetic")
    first = build_manifest(corpus, tmp_path / "o", [22], spec)
    digest = tree_digest(tmp_path / "o")
    again = build_manifest(corpus, tmp_path / "o", [22], spec)
    assert again.new_entries == 0
    assert again.manifest.to_text() == first.manifest.to_text()
    assert tree_digest(tmp_path / "o") == digest


def test_null_degrader_decoded_is_lr(corpus, tmp_path):
    m = build_manifest(corpus, tmp_path / "o", [0], DegraderSpec("null")).manifest
    for e in m.entries:
        assert e.lr_decoded_path == e.lr_path
        p = m.load_pair(e)
        assert np.array_equal(p.lr, p.lr_decoded)


def test_save_load_round_trip(corpus, tmp_path):
    m = build_manifest(corpus, tmp_path / "o", [22, 27], DegraderSpec("synthetic"),
                       split_rule=SplitRule(val_fraction=0.2, test_fraction=0.2)).manifest
    m.save(tmp_path / "o" / "manifest.csv")
    back = load_manifest(tmp_path / "o" / "manifest.csv")
    assert back.to_text() == m.to_text()
    assert {e.split for e in back.entries} == {"train", "val", "test"}
    # every QP of one image lands in the same split
    by_image = {}
    for e in back.entries:
        by_image.setdefault(e.hr_path, set()).add(e.split)
    assert all(len(s) == 1 for s in by_image.values())


def test_missing_file_detected(corpus, tmp_path):
    m = build_manifest(corpus, tmp_path / "o", [22], DegraderSpec("synthetic")).manifest
    m.save(tmp_path / "o" / "manifest.csv")
    (tmp_path / "o" / m.entries[0].lr_decoded_path).unlink()
    with pytest.raises(ManifestError, match="missing file"):
        load_manifest(tmp_path / "o" / "manifest.csv")


def test_odd_sizes_cropped_and_bad_files_skipped(tmp_path, corpus):
    from mtlvqe.data import write_png
    write_png(corpus / "odd.png", np.full((67, 70, 3), 90, np.uint8))
    (corpus / "broken.png").write_bytes(b"not an image")
    res = build_manifest(corpus, tmp_path / "o", [22], DegraderSpec("synthetic"))
    assert [s for s, _ in res.skipped_files] == [str(corpus / "broken.png")]
    odd = [e for e in res.manifest.entries if e.id.startswith("odd")][0]
    assert read_image(res.manifest.root / odd.hr_path).shape == (64, 68, 3)


def test_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ManifestError):
        build_manifest(tmp_path / "empty", tmp_path / "o", [22], DegraderSpec("synthetic"))
