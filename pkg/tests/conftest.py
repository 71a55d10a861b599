import numpy as np
import pytest

from respmodel import _kernels
from respmodel.grid import DisplacementField, GridMeta, ScalarVolume


@pytest.fixture(params=sorted(_kernels.available_backends()))
def kernel_backend(request):
    """Run a test under each available kernel backend."""
    previous = _kernels.use_backend(request.param)
    yield request.param
    _kernels.use_backend(previous)


@pytest.fixture
def meta16():
    return GridMeta((16, 16, 16), (2.0, 2.0, 2.0))


@pytest.fixture
def meta32():
    return GridMeta((32, 32, 32), (2.0, 2.0, 2.0))


def soft_sphere(meta: GridMeta, center, radius: float, shift=(0.0, 0.0, 0.0),
                edge: float = 4.0) -> np.ndarray:
    pts = meta.coordinate_grid()
    rho = np.sqrt(((pts - np.asarray(center) - np.asarray(shift)) ** 2).sum(axis=-1))
    return 1.0 / (1.0 + np.exp(np.clip((rho - radius) / edge * 4.0, -60, 60)))


def smooth_field(meta: GridMeta, amplitude: float = 2.0, seed: int = 0) -> DisplacementField:
    """Smooth low-frequency sinusoidal field with max displacement ~amplitude mm."""
    rng = np.random.default_rng(seed)
    pts = meta.coordinate_grid()
    ext = np.asarray(meta.extent)
    u = np.zeros(meta.shape_zyx + (3,))
    for c in range(3):
        phase = rng.uniform(0, 2 * np.pi, size=3)
        w = 2.0 * np.pi / ext
        u[..., c] = (
            np.sin(w[0] * pts[..., 0] + phase[0])
            * np.sin(w[1] * pts[..., 1] + phase[1])
            * np.sin(w[2] * pts[..., 2] + phase[2])
        )
    u *= amplitude / np.abs(u).max()
    return DisplacementField(meta, u)


def volume_from(meta: GridMeta, fn) -> ScalarVolume:
    return ScalarVolume(meta, fn(meta.coordinate_grid()))


@pytest.fixture(scope="session")
def phantom_population():
    """Default 4-patient phantom stock shared by atlas/acceptance tests."""
    from respmodel.phantom import PhantomConfig, generate_population

    return generate_population(PhantomConfig())
