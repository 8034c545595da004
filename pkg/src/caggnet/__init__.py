"""Desk-scale crossing-aggregation segmentation engine.

A from-scratch CPU implementation of the CAggNet architecture (crossing
aggregation grid plus weighted aggregation head) with a U-Net baseline,
tape-based reverse-mode differentiation, focal/BCE losses, Adam, pixel
metrics, and bit-exact Netpbm data handling.
"""

from .autograd import CheckReport, GradStore, Tape, Var, backward, finite_diff_check
from .metrics import ConfusionCounts, MetricsReport, binarize, confusion, f1, iou
from .models import (
    CaggNet,
    ForwardPass,
    ModelConfig,
    ParamStore,
    UNet,
    build_caggnet,
    build_unet,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .tensor_core import Shape4, ShapeError, Tensor4, TensorError, zeros
from .train import (
    AdamState,
    EarlyStopper,
    FocalLossConfig,
    TrainingDiverged,
    adam_step,
    bce_loss,
    focal_loss,
    train_loop,
)

__version__ = "0.1.0"
