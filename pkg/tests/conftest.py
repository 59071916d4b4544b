import numpy as np
import pytest

from facecorr.mesh import Mesh
from facecorr.synth import generate_family, make_template


def cylinder_mesh(radius, length=40.0, n_theta=120, n_z=60, arc=np.pi):
    """Open cylinder patch about the y axis, bulging towards +z."""
    th = np.linspace(-arc / 2, arc / 2, n_theta)
    ys = np.linspace(-length / 2, length / 2, n_z)
    T, Y = np.meshgrid(th, ys)
    v = np.column_stack([radius * np.sin(T).ravel(), Y.ravel(), radius * np.cos(T).ravel()])
    idx = np.arange(n_theta * n_z).reshape(n_z, n_theta)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    # counter-clockwise seen from outside (+radial)
    t = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return Mesh(v, t)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture(scope="session")
def template():
    return make_template()


@pytest.fixture(scope="session")
def family(template):
    mesh, landmarks = template
    return generate_family(mesh, 4, 4.0, seed=3, landmarks=landmarks)


# acceptance results, printed in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
