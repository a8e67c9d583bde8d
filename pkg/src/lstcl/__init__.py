"""Long-short temporal contrastive learning for video transformers, at desk scale."""

from .backbone import BackboneConfig, VideoTransformer
from .contrastive import Encoder, Framework, LossConfig, lstcl_loss, momentum_update
from .evaluation import Classifier, FinetuneConfig, ProbeConfig, evaluate, finetune, linear_probe
from .trainer import TrainConfig, pretrain
from .videogen import AugmentConfig, ClipSpec, GeneratorConfig, Strategy, Video, generate_corpus, sample_pair

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "BackboneConfig", "Classifier", "ClipSpec", "Encoder", "FinetuneConfig", "Framework",
    "GeneratorConfig", "LossConfig", "ProbeConfig", "Strategy", "TrainConfig", "Video", "VideoTransformer",
    "evaluate", "finetune", "generate_corpus", "linear_probe", "lstcl_loss", "momentum_update", "pretrain",
    "sample_pair",
]
