"""Joint X-ray spectrum estimation and multi-material decomposition from single-energy CT."""

__version__ = "0.1.0"

from .materials import EnergyGrid, Material, MaterialSet, load_material_set
from .phantom import FractionGrid, PhantomSpec, Shape, phantom_a, phantom_b, rasterize
from .projector import Geometry, NoiseConfig, Sinogram, acquire, forward_project
from .solver import TrainConfig, evaluate_grid, train
from .spectra import Spectrum, SpectrumLibrary, compose_spectrum, generate_library, spectrum_error

__all__ = [
    "EnergyGrid",
    "FractionGrid",
    "Geometry",
    "Material",
    "MaterialSet",
    "NoiseConfig",
    "PhantomSpec",
    "Shape",
    "Sinogram",
    "Spectrum",
    "SpectrumLibrary",
    "TrainConfig",
    "acquire",
    "compose_spectrum",
    "evaluate_grid",
    "forward_project",
    "generate_library",
    "load_material_set",
    "phantom_a",
    "phantom_b",
    "rasterize",
    "spectrum_error",
    "train",
    "__version__",
]
