from fgam.neural.checkpoint import load, save
from fgam.neural.models import ByteSeqNet, ImageConvNet, Model, Prediction, THRESHOLD
from fgam.neural.train import TrainConfig, train

__all__ = ["ByteSeqNet", "ImageConvNet", "Model", "Prediction", "THRESHOLD", "TrainConfig", "load", "save", "train"]
