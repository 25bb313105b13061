"""Region-contrastive self-supervised pretraining on composited images,
desk scale: copy-paste composition, RoI-pooled momentum contrast over
single-map and pyramid backbones, anchor-based box augmentation, and
linear localization/classification readouts. Every numerical kernel has
an independent oracle (see insloc.selfcheck)."""

from .boxes import AnchorConfig, BBox, augment_bbox, clip_bbox, generate_anchors, iou
from .composition import CompositeSample, CompositionParams, compose, make_pair
from .contrastive import (EncoderPair, MemoryQueue, info_nce_loss,
                          insloc_step_loss, momentum_update)
from .imaging import (AugmentParams, Gallery, augment_view, generate_gallery,
                      read_ppm, resize_bilinear, write_ppm)
from .nn import Backbone, BackboneConfig, l2_normalize, l2_normalize_backward
from .probes import (ProbeConfig, classification_probe_accuracy,
                     extract_patch_embedding, localization_probe_accuracy,
                     train_linear_probe)
from .roialign import (RoiSpec, assign_fpn_level, roi_align_backward,
                       roi_align_forward)
from .trainer import (TrainConfig, TrainState, cosine_lr, load_checkpoint,
                      pretrain, resume, save_checkpoint, sgd_step)

__version__ = "0.1.0"
