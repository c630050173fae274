"""diffrx: OFDM channel estimation with a conditional diffusion model.

Modules:
    numcore    tape autodiff, conv2d, Adam, binary checkpoints
    chansim    synthetic tapped-delay-line channels, AWGN, datasets
    pilots     pilot masks, LS pilot estimates, soft masks
    estimators classical baselines (linear/LMMSE) with a sklearn-style API
    diffusion  noise schedule and forward/reverse step formulas
    denoiser   conditional convolutional noise predictor
    trainer    epsilon-prediction training loop
    sampler    vanilla + RePaint inference pipelines, best-of-N
    receiver   modulation, equalization, BER loop, candidate scoring
    harness    CLI, configs, manifests
"""

__version__ = "0.1.0"

from .grid import ResourceGrid  # noqa: F401  (canonical data type)
