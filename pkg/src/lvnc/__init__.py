"""
Left-ventricle trabeculation segmentation with a small numpy U-Net.

Segments short-axis slices into external layer (EL), internal cavity (IC)
and trabeculae (T), then computes the percentage of trabecular area
``PTA = 100 * TA / (TA + ELA)`` and flags LVNC when PTA >= 27.4 %.
"""

__version__ = "0.1.0"

from .errors import ContractError, DimensionError, FormatError, UndefinedPTAError
from .masks import (BACKGROUND, EL, IC, PTA_THRESHOLD, T, PtaResult, RegionAreas,
                    connected_components, fidelity_filter, mask_pta, pta, region_areas,
                    resample_mask)
from .tensor import Tape, Tensor, backward
from .losses import LossConfig, boundary_loss, combined_loss, lovasz_softmax, signed_distance_map
from .unet import FULL_SIZE_CONFIG, UNet, UNetConfig, count_params, load_checkpoint, save_checkpoint
from .optim import RAdam
from .data import (DatasetManifest, PhantomParams, SliceRecord, generate_dataset,
                   generate_phantom, read_manifest, stratified_kfold, write_manifest)
from .metrics import MetricsReport, TimingReport, benchmark_inference, dice, evaluate_masks
from .training import EarlyStopping, TrainConfig, fit
