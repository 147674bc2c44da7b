"""Adversarial subject-to-subject domain adaptation for windowed time series."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, backward          # noqa: F401
from .networks import (GeneratorSpec, DiscriminatorSpec, ClassifierSpec,   # noqa: F401
                       ModelBundle, build_bundle)
from .pipeline import DomainDataset, SynthSpec, generate_synthetic_pair    # noqa: F401
from .trainer import TrainerConfig, train           # noqa: F401
