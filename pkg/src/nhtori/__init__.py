"""Random normally hyperbolic invariant tori for a forced, noisy Duffing-type oscillator."""
from .errors import (BlowUpError, CertificationError, ConfigError, DependencyError,
                     DivergenceError, NhtoriError, NonHyperbolicError)
from .fourier_torus import FourierTorus, TorusGrid, read_torus, write_torus
from .model import ModelParams

__version__ = "0.1.0"
