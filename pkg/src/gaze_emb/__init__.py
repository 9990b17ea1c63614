"""Eye-movement biometric embeddings: gaze preprocessing, a dense dilated CNN
trained with multi-similarity metric learning, and biometric evaluation."""

__version__ = "0.1.0"
