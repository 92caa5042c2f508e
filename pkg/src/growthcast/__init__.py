"""Urban growth prediction: unsupervised segmentation, mask cleanup and a
ConvLSTM next-date predictor, written on plain numpy."""

__version__ = "0.1.0"
