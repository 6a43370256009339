import numpy as np
import pytest

from resplat.scene import CameraPose, GaussianScene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_scene(rng: np.random.Generator, n: int, z_offset: float = 4.0) -> GaussianScene:
    """Scene of anisotropic Gaussians in front of the default camera."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianScene(
        centers=rng.normal(scale=1.0, size=(n, 3)) + [0.0, 0.0, z_offset],
        scales=np.exp(rng.uniform(-2.5, -0.3, size=(n, 3))),
        rotations=q,
        opacities=rng.uniform(0.05, 1.0, n),
        colors=rng.uniform(0.0, 1.0, (n, 3)),
    )


def basic_camera(size: int = 64, focal: float = 60.0) -> CameraPose:
    return CameraPose(
        rotation=np.eye(3), translation=np.zeros(3),
        fx=focal, fy=focal, cx=size / 2.0, cy=size / 2.0,
        width=size, height=size,
    )


@pytest.fixture
def camera():
    return basic_camera()
