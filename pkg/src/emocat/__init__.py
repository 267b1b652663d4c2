"""EmoCat at desk scale: emotion conversion with an adversarial gradient inverter."""
from emocat.corpus import CorpusSpec, UtteranceRecord, generate_corpus
from emocat.inverter import GradTransformSpec, transform_gradient
from emocat.model import Checkpoint, EmoCatConfig, EmoCatNet
from emocat.train import TrainPlan, fine_tune, train

__version__ = "0.1.0"

__all__ = ["CorpusSpec", "UtteranceRecord", "generate_corpus", "GradTransformSpec", "transform_gradient",
           "Checkpoint", "EmoCatConfig", "EmoCatNet", "TrainPlan", "fine_tune", "train"]
