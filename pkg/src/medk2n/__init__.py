"""Progressive K->N multimodal image synthesis with quality-gated fusion."""

from .config import AblationConfig, RunConfig, build_config, load_config
from .dataset import PhantomSpec, generate_phantom, load_manifest, write_manifest
from .evaluation import run_matrix
from .metrics import psnr, ssim, wilcoxon_signed_rank
from .model import MedK2N
from .types import (AvailabilityMask, K2NTask, ModalityId, PairedSample, default_schema,
                    make_task, parse_mask)

__version__ = "0.1.0"

__all__ = [
    "AblationConfig", "AvailabilityMask", "K2NTask", "MedK2N", "ModalityId", "PairedSample",
    "PhantomSpec", "RunConfig", "build_config", "default_schema", "generate_phantom",
    "load_config", "load_manifest", "make_task", "parse_mask", "psnr", "run_matrix", "ssim",
    "wilcoxon_signed_rank", "write_manifest",
]
