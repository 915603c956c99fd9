"""Codec degraders: identity, a blockwise-DCT stand-in, and an external encoder process."""

from __future__ import annotations

import hashlib
import logging
import os
import shlex
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from .color import Yuv420, read_yuv420, write_yuv420

log = logging.getLogger(__name__)

KINDS = ("null", "synthetic", "external_codec")
PLACEHOLDERS = ("{input}", "{output}", "{qp}", "{width}", "{height}")
CODEC_ENV = "MTLVQE_CODEC_BIN"


class DegraderError(RuntimeError):
    def __init__(self, message: str, stdout: str = "", stderr: str = "", returncode: int | None = None):
        super().__init__(message)
        self.stdout = stdout
        self.stderr = stderr
        self.returncode = returncode

    def __str__(self):
        msg = super().__str__()
        if self.stderr:
            msg += "\n--- stderr ---\n" + self.stderr.strip()
        return msg


def synthetic_step(qp: int) -> float:
    """Quantiser step doubling every 6 QP, as in H.264/HEVC/VVC."""
    return 2.0 ** ((qp - 4) / 6.0)


@dataclass(frozen=True)
class DegraderSpec:
    kind: str = "null"
    qp: int = 0
    command_template: str = ""
    block_size: int = 8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degrader kind {self.kind!r}; expected one of {KINDS}")
        if not 0 <= self.qp <= 63:
            raise ValueError(f"qp must lie in [0, 63], got {self.qp}")
        if self.kind == "external_codec":
            missing = [p for p in PLACEHOLDERS if p not in self.command_template]
            if missing:
                raise ValueError(f"command_template lacks placeholders {missing}")

    def with_qp(self, qp: int) -> "DegraderSpec":
        return replace(self, qp=qp)

    @property
    def degrader_id(self) -> str:
        if self.kind == "null":
            return "null"
        if self.kind == "synthetic":
            return f"synthetic-dct{self.block_size}"
        digest = hashlib.sha1(self.command_template.encode()).hexdigest()[:8]
        return f"external-{digest}"


def _quantize_plane(plane: np.ndarray, step: float, bs: int) -> np.ndarray:
    h, w = plane.shape
    ph, pw = -h % bs, -w % bs
    x = np.pad(plane.astype(np.float64), ((0, ph), (0, pw)), mode="edge")
    H, W = x.shape
    blocks = x.reshape(H // bs, bs, W // bs, bs).transpose(0, 2, 1, 3)
    coeffs = dctn(blocks, axes=(2, 3), norm="ortho")
    coeffs = np.rint(coeffs / step) * step
    rec = idctn(coeffs, axes=(2, 3), norm="ortho").transpose(0, 2, 1, 3).reshape(H, W)
    return np.clip(np.rint(rec[:h, :w]), 0, 255).astype(np.uint8)


def command_argv(template: str, input: str, output: str, qp: int, width: int, height: int) -> list[str]:
    values = {"input": input, "output": output, "qp": qp, "width": width, "height": height}
    argv = [tok.format(**values) for tok in shlex.split(template)]
    override = os.environ.get(CODEC_ENV)
    if override:
        argv[0] = override
    return argv


def _external(yuv: Yuv420, spec: DegraderSpec) -> Yuv420:
    with tempfile.TemporaryDirectory(prefix="mtlvqe-codec-") as tmp:
        src = Path(tmp) / "input.yuv"
        dst = Path(tmp) / "output.yuv"
        write_yuv420(src, yuv)
        argv = command_argv(spec.command_template, str(src), str(dst), spec.qp, yuv.width, yuv.height)
        if shutil.which(argv[0]) is None:
            raise DegraderError(f"codec executable not found: {argv[0]!r} "
                                f"(set {CODEC_ENV} to override the binary path)")
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise DegraderError(f"codec exited with status {proc.returncode}: {shlex.join(argv)}",
                                proc.stdout, proc.stderr, proc.returncode)
        if not dst.exists():
            raise DegraderError(f"codec produced no output file: {shlex.join(argv)}",
                                proc.stdout, proc.stderr, proc.returncode)
        return read_yuv420(dst, yuv.width, yuv.height)


def degrade(yuv: Yuv420, spec: DegraderSpec) -> Yuv420:
    if spec.kind == "null":
        return yuv.copy()
    if spec.kind == "synthetic":
        step = synthetic_step(spec.qp)
        return Yuv420(*(_quantize_plane(p, step, spec.block_size) for p in yuv.planes()))
    return _external(yuv, spec)
