import numpy as np
import pytest

from relightkit import envmap as em
from relightkit import latent as lt
from relightkit import olat


@pytest.fixture(scope="session")
def basis150():
    return em.fibonacci_basis(150)


@pytest.fixture(scope="session")
def sphere_world(basis150):
    """One 32x32 Lambertian stack plus its ground-truth scene."""
    return olat.synth_lambertian_world(seed=11, resolution=32, basis=basis150)


@pytest.fixture(scope="session")
def random_stack():
    """Uniform random 8x8 stack; small enough for brute-force oracles."""
    rng = np.random.default_rng(42)
    images = rng.random((olat.N_LIGHTS, 8, 8, 3), dtype=np.float32)
    return olat.OlatStack("rand", "cam0", olat.CameraPose(), images)


@pytest.fixture(scope="session")
def split_dataset(tmp_path_factory):
    """Small dataset with a train/test split for pair/eval-set tests."""
    root = tmp_path_factory.mktemp("split_ds")
    return olat.synth_dataset(
        root, seed=3, n_identities=3, n_cameras=3, n_envmaps=4,
        resolution=32, n_test_identities=1,
    )


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """The training fixture: 3 identities, 4 cameras, 16 env maps, 64x64."""
    root = tmp_path_factory.mktemp("toy_ds")
    return olat.synth_dataset(
        root, seed=0, n_identities=3, n_cameras=4, n_envmaps=16,
        resolution=64, n_test_identities=0,
    )


@pytest.fixture(scope="session")
def toy_generator():
    return lt.ToyGenerator(seed=5, image_size=64)
