from .color import Yuv420, luma, read_yuv420, rgb_to_yuv420, write_yuv420, yuv420_to_rgb
from .degrade import DegraderError, DegraderSpec, degrade, synthetic_step
from .manifest import (
    DatasetManifest,
    ManifestEntry,
    ManifestError,
    SplitRule,
    build_manifest,
    load_manifest,
    read_image,
    write_png,
)
from .patches import PatchTriple, SamplePair, extract_patches, patch_offsets
from .resize import bicubic_resize, downscale, upscale
from .tensor import to_batch, to_tensor, to_uint8
