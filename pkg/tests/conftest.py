import numpy as np
import pytest

from meshgrow.mesh import make_mesh
from meshgrow.primitives import icosphere, tetrahedron
from meshgrow.voxel import VoxelMask


@pytest.fixture
def tetra():
    return tetrahedron()


@pytest.fixture
def sphere2():
    return icosphere(2, 1.0)


@pytest.fixture
def sphere3():
    return icosphere(3, 1.0)


def random_blob_mask(rng, shape=(32, 32, 32), n_seeds=4, spacing=(1.0, 1.0, 1.0)):
    """Smooth random blob: union of gaussian bumps thresholded at 0.5."""
    grid = np.stack(
        np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij"),
        axis=-1,
    )
    field = np.zeros(shape)
    for _ in range(n_seeds):
        center = rng.uniform(8, np.array(shape) - 8)
        radius = rng.uniform(3.0, 6.5)
        d2 = np.sum((grid - center) ** 2, axis=-1)
        field += np.exp(-d2 / (2 * radius**2))
    values = (field >= 0.5).astype(np.uint8)
    # keep the surface away from the array border
    values[0], values[-1] = 0, 0
    values[:, 0], values[:, -1] = 0, 0
    values[:, :, 0], values[:, :, -1] = 0, 0
    return VoxelMask(values=values, spacing=spacing, origin=(0.0, 0.0, 0.0))


@pytest.fixture
def blob_mask():
    return random_blob_mask(np.random.default_rng(5))


def coplanar_pair_mesh():
    """Closed mesh containing an edge whose two faces are coplanar."""
    v = np.array(
        [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.5, np.sqrt(3) / 2, 0.0],
            [0.5, -np.sqrt(3) / 2, 0.0],
            [0.5, 0.0, -1.0],
        ]
    )
    f = np.array(
        [
            [0, 1, 2],
            [1, 0, 3],
            [3, 0, 4],
            [1, 3, 4],
            [2, 1, 4],
            [0, 2, 4],
        ]
    )
    return make_mesh(v, f)
