"""Sparse-slice volume reconstruction: recursive middle-slice synthesis with
a multi-kernel texture loss, followed by identity-preserving 3D refinement."""

from .difftensor import NumericError, Tensor
from .kernels import KernelBank, load_bank, normalize_bank
from .losses import (Stage1LossConfig, Stage2LossConfig, depth_weight_map,
                     filtered_l1_loss, l1_loss, stage1_loss, stage2_loss)
from .metrics import ReconReport, psnr, scan_time_factor, ssim
from .models import (MKResReconParams, RefineNetParams, apply_refinement,
                     attention_gate, identityrefine_forward, init_params,
                     mkresrecon_forward)
from .pipeline import (DoublingPlan, Volume, baseline_interpolate,
                       doubling_plan, reconstruct_volume, sparse_sample)
from .data import (TrainingTriplet, export_slice_pgm, generate_phantom,
                   load_volume, make_triplets, preprocess, save_volume)
from .training import (AdamState, ModelCheckpoint, PlateauState, adam_step,
                       load_checkpoint, plateau_step, save_checkpoint,
                       train_stage1, train_stage2)

__version__ = "0.1.0"
