"""Instance normalization, group whitening and attention-aware composition with explicit gradients."""

from .errors import AmsError, ConfigError, InputError, NumericalError, ShapeError
from .core import Tensor4, grad_check, Layer
from .norm import (InParams, InstanceNorm, GroupWhiten, WhitenConfig, instance_norm,
                   group_whiten, group_partition, group_merge, inverse_sqrt)
from .attention import (ChannelAttention, ChannelAttentionParams, SpatialAttention,
                        SpatialAttentionParams, channel_attention, spatial_attention)
from .ams import AMS, BASELINE, AmsBlock, AmsParams, VariantKind, ams_forward, insert_ams, variant_forward
from .losses import LossConfig, batch_hard_triplet, softmax_cross_entropy, total_loss
from .metrics import RetrievalReport, retrieval_eval

__version__ = "0.1.0"
