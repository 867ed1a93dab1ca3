"""melgen: conditional WGAN-GP augmentation for small labeled audio datasets.

Pipeline: WAV clips -> non-overlapping 64x64 log-mel spectrograms -> a
class-conditional WGAN-GP trained with FID-monitored checkpointing -> corpus
doubling/balancing with generated samples -> stratified 5-fold macro-F1
comparison against classical augmentations -> optional Griffin-Lim audio
rendering of generated spectrograms.
"""

__version__ = "0.1.0"
