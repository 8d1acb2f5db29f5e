import numpy as np
import pytest

from hoi2robot import synth
from hoi2robot.plausibility import build_tsdf


@pytest.fixture(scope="session")
def sphere_mesh():
    return synth.icosphere(radius=0.1, subdivisions=2)


@pytest.fixture(scope="session")
def sphere_grid(sphere_mesh):
    return build_tsdf(sphere_mesh, voxel=0.005, trunc=0.03)


@pytest.fixture(scope="session")
def sphere_faceting(sphere_mesh):
    """Max deviation of the faceted surface from the analytic sphere."""
    v = sphere_mesh.vertices
    tri = v[sphere_mesh.triangles]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    plane_dist = np.abs(np.einsum("fk,fk->f", normals, tri[:, 0]))
    return 0.1 - float(plane_dist.min())


@pytest.fixture(scope="session")
def box_grid():
    mesh = synth.box_mesh(half_extents=(0.06, 0.045, 0.05))
    return build_tsdf(mesh, voxel=0.005, trunc=0.02)


@pytest.fixture(scope="session")
def arm6():
    return synth.make_arm6()


@pytest.fixture(scope="session")
def planar2r():
    return synth.make_planar_2r()


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixture")
    manifest = synth.write_fixture(root, n_frames=60)
    return manifest.parent


def random_rotation(rng):
    w = rng.normal(size=3)
    w /= np.linalg.norm(w)
    return w * rng.uniform(0.0, np.pi * 0.99)
