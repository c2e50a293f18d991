"""Curricular self-supervised pretraining benchmark with a lung-attention audit."""

from .attention import ail, compute_cam, compute_cams, mean_ail, postprocess_mask
from .backbone import BackboneConfig, Checkpoint, HeadSpec, forward_features, init_backbone, load_checkpoint, \
    save_checkpoint, transfer_weights
from .classify import balanced_accuracy, finetune, weighted_ce
from .curriculum import is_curriculum_order, lr_search, run_curriculum, run_step
from .data import ClassLabel, ClassMode, Dataset, DatasetSpec, PhantomConfig, PhantomMode, gen_phantom, make_split
from .errors import CurricubenchError, ValidationError
from .steps import CurriculumSpec, StepSpec, default_step

__version__ = "0.1.0"
