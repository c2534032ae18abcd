"""Physics-guided near-surface air temperature estimation from sparse
sensors and gridded land-surface temperature, with a synthetic
diffusion-reaction benchmark as the verification oracle.
"""

__version__ = "0.1.0"

from .grids import GridMeta, Scene, SensorNetwork, load_scene, load_sensors
from .physics import PhysicsConfig
from .simulate import SimConfig, simulate_scene
from .training import TrainConfig, train

__all__ = [
    "GridMeta",
    "PhysicsConfig",
    "Scene",
    "SensorNetwork",
    "SimConfig",
    "TrainConfig",
    "load_scene",
    "load_sensors",
    "simulate_scene",
    "train",
    "__version__",
]
