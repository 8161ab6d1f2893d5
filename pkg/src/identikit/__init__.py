"""Local identifiability of constant and time-varying parameters of
input-affine ODE models, with construction of indistinguishable families."""
from pathlib import Path

__version__ = "0.1.0"

MODELS_DIR = Path(__file__).parent / "models"


def model_path(name: str) -> Path:
    """Path of a bundled model file (``hiv``, ``seiar``, ``visfm``, ...)."""
    p = MODELS_DIR / f"{name}.model"
    if not p.exists():
        raise FileNotFoundError(f"no bundled model called {name!r}")
    return p
