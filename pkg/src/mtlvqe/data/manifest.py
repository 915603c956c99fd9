"""Dataset generation: downscale, 4:2:0 round trip through a degrader, and the manifest index."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .color import rgb_to_yuv420, yuv420_to_rgb
from .degrade import DegraderSpec, degrade
from .patches import SamplePair
from .resize import downscale

log = logging.getLogger(__name__)

MANIFEST_MAGIC = "# MTLVQE-MANIFEST-1"
COLUMNS = ("id", "split", "qp", "degrader_id", "hr_path", "lr_path", "lr_decoded_path")
SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = {".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff", ".ppm"}
STATE_FILE = ".prepare_state.json"


class ManifestError(ValueError):
    pass


def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # no timestamps or metadata chunks, so identical pixels give identical bytes
    Image.fromarray(img).save(path, format="PNG", optimize=False, compress_level=6)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    split: str
    qp: int
    degrader_id: str
    hr_path: str
    lr_path: str
    lr_decoded_path: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    scale_factor: int
    qps: tuple[int, ...]
    created_with: str = ""
    root: Path = field(default_factory=Path)

    def validate(self, check_files: bool = True) -> None:
        problems = []
        ids = [e.id for e in self.entries]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            problems.append(f"duplicate ids: {dupes}")
        for e in self.entries:
            if e.qp not in self.qps:
                problems.append(f"{e.id}: qp {e.qp} not in declared set {list(self.qps)}")
            if e.split not in SPLITS:
                problems.append(f"{e.id}: unknown split {e.split!r}")
            if check_files:
                for p in (e.hr_path, e.lr_path, e.lr_decoded_path):
                    if not (self.root / p).is_file():
                        problems.append(f"{e.id}: missing file {p}")
        if problems:
            raise ManifestError("invalid manifest:\n  " + "\n  ".join(problems))

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def degrader_ids(self) -> set[str]:
        return {e.degrader_id for e in self.entries}

    def load_pair(self, entry: ManifestEntry) -> SamplePair:
        return SamplePair(
            id=entry.id,
            hr=read_image(self.root / entry.hr_path),
            lr=read_image(self.root / entry.lr_path),
            lr_decoded=read_image(self.root / entry.lr_decoded_path),
            qp=entry.qp,
            degrader_id=entry.degrader_id,
            scale_factor=self.scale_factor,
        )

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"{MANIFEST_MAGIC}\n")
        buf.write(f"# scale_factor={self.scale_factor}\n")
        buf.write(f"# qps={','.join(str(q) for q in self.qps)}\n")
        buf.write(f"# created_with={self.created_with}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for e in self.entries:
            writer.writerow([getattr(e, c) for c in COLUMNS])
        return buf.getvalue()

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise ManifestError(f"{path}: not a manifest file")
    meta, body = {}, []
    for line in lines[1:]:
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            meta[key] = value
        else:
            body.append(line)
    rows = list(csv.DictReader(body))
    entries = [ManifestEntry(**{**row, "qp": int(row["qp"])}) for row in rows]
    manifest = DatasetManifest(
        entries=entries,
        scale_factor=int(meta["scale_factor"]),
        qps=tuple(int(q) for q in meta["qps"].split(",") if q),
        created_with=meta.get("created_with", ""),
        root=path.parent,
    )
    manifest.validate(check_files)
    return manifest


@dataclass(frozen=True)
class SplitRule:
    """Assign source images to splits by a stable hash of the file name.

    Explicit name lists win over fractions.
    """

    val_fraction: float = 0.0
    test_fraction: float = 0.0
    val_names: tuple[str, ...] = ()
    test_names: tuple[str, ...] = ()

    def assign(self, names: list[str]) -> dict[str, str]:
        out = {}
        rest = []
        for n in names:
            if n in self.val_names:
                out[n] = "val"
            elif n in self.test_names:
                out[n] = "test"
            else:
                rest.append(n)
        ranked = sorted(rest, key=lambda n: hashlib.sha1(n.encode()).hexdigest())
        n_val = int(round(self.val_fraction * len(names)))
        n_test = int(round(self.test_fraction * len(names)))
        for i, n in enumerate(ranked):
            out[n] = "val" if i < n_val else "test" if i < n_val + n_test else "train"
        return out


def _fingerprint(src_bytes: bytes, spec: DegraderSpec, qp: int, r: int) -> str:
    h = hashlib.sha256(src_bytes)
    h.update(json.dumps([spec.kind, spec.command_template, spec.block_size, qp, r]).encode())
    return h.hexdigest()


def source_images(hr_dir: str | os.PathLike) -> list[Path]:
    return sorted(p for p in Path(hr_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@dataclass
class PrepareResult:
    manifest: DatasetManifest
    new_entries: int
    skipped_files: list[tuple[str, str]]


def build_manifest(hr_dir: str | os.PathLike, out_dir: str | os.PathLike, qps: list[int],
                   spec: DegraderSpec, r: int = 2, split_rule: SplitRule | None = None,
                   workers: int = 1) -> PrepareResult:
    """Generate (HR, LR, decoded LR) triples for every source image and QP.

    HR images are cropped so that the LR size is even (4:2:0 needs it). With the
    null degrader the decoded image is the LR image itself: no codec, no format
    round trip. Up-to-date outputs (same source bytes, degrader and QP) are reused.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split_rule = split_rule or SplitRule()
    sources = source_images(hr_dir)
    if not sources:
        raise ManifestError(f"no source images in {hr_dir}")

    state_path = out_dir / STATE_FILE
    state = json.loads(state_path.read_text()) if state_path.exists() else {}
    skipped: list[tuple[str, str]] = []

    loaded = {}
    for src in sources:
        try:
            raw = src.read_bytes()
            img = read_image(src)
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("skipping unreadable image %s: %s", src, exc)
            skipped.append((str(src), str(exc)))
            continue
        h, w = img.shape[:2]
        m = 2 * r
        if h < m or w < m:
            log.warning("skipping %s: %dx%d too small for scale %d", src, h, w, r)
            skipped.append((str(src), "too small"))
            continue
        loaded[src.stem] = (raw, img[:h - h % m, :w - w % m])
    if not loaded:
        raise ManifestError("no usable source images: " + "; ".join(f"{s}: {e}" for s, e in skipped))

    splits = split_rule.assign(sorted(loaded))
    did = spec.degrader_id
    stems = sorted(loaded)

    def rel_paths(stem: str, qp: int) -> tuple[str, str, str, str]:
        eid = f"{stem}_qp{qp}" if spec.kind != "null" else f"{stem}_qp{qp}_null"
        lr_rel = f"lr_x{r}/{stem}.png"
        dec_rel = lr_rel if spec.kind == "null" else f"decoded/{did}/qp{qp}/{stem}.png"
        return eid, f"hr/{stem}.png", lr_rel, dec_rel

    def is_fresh(stem: str, qp: int) -> bool:
        eid, *paths = rel_paths(stem, qp)
        fp = _fingerprint(loaded[stem][0], spec, qp, r)
        return state.get(eid) == fp and all((out_dir / p).is_file() for p in paths)

    # stage 1, per image: HR crop and its bicubic LR version (shared by every QP)
    lr_images: dict[str, np.ndarray] = {}

    def make_lr(stem: str):
        _, hr = loaded[stem]
        _, hr_rel, lr_rel, _ = rel_paths(stem, qps[0])
        lr = downscale(hr, r)
        if not all(is_fresh(stem, qp) for qp in qps):
            write_png(out_dir / hr_rel, hr)
            write_png(out_dir / lr_rel, lr)
        lr_images[stem] = lr

    # stage 2, per (image, qp): 4:2:0 round trip through the degrader
    def make_decoded(stem: str, qp: int):
        eid, hr_rel, lr_rel, dec_rel = rel_paths(stem, qp)
        entry = ManifestEntry(eid, splits[stem], qp, did, hr_rel, lr_rel, dec_rel)
        fp = _fingerprint(loaded[stem][0], spec, qp, r)
        if is_fresh(stem, qp):
            return entry, fp, False
        if spec.kind != "null":
            decoded = yuv420_to_rgb(degrade(rgb_to_yuv420(lr_images[stem]), spec.with_qp(qp)))
            write_png(out_dir / dec_rel, decoded)
        return entry, fp, True

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        list(pool.map(make_lr, stems))
        results = list(pool.map(lambda it: make_decoded(*it), [(s, q) for s in stems for q in qps]))

    entries = [e for e, _, _ in results]
    new_state = {e.id: fp for e, fp, _ in results}
    created_with = hashlib.sha256(
        json.dumps([sorted(new_state.items()), sorted(qps), r, did]).encode()
    ).hexdigest()[:16]
    manifest = DatasetManifest(entries, r, tuple(qps), created_with, out_dir)
    manifest.validate()
    state_path.write_text(json.dumps(new_state, sort_keys=True, indent=0))
    return PrepareResult(manifest, sum(1 for *_, new in results if new), skipped)
