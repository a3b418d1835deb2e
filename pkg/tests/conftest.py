import numpy as np
import pytest

from lightgs.deformation import TinyMLP, init_field
from lightgs.scene import Camera, GaussianCloud, normalize_quaternions


def random_cloud(rng, n, spread=0.3, scale=(0.05, 0.2), sh_scale=0.3, degree=3):
    b = (degree + 1) ** 2
    return GaussianCloud(
        rng.uniform(-spread, spread, (n, 3)),
        normalize_quaternions(rng.normal(size=(n, 4))),
        rng.uniform(scale[0], scale[1], (n, 3)),
        rng.uniform(0.2, 0.95, n),
        rng.normal(0.0, sh_scale, (n, 3, b)),
    )


def front_camera(size=32, focal=None, distance=2.0):
    f = focal if focal is not None else size * 1.25
    return Camera.look_at([0, 0, -distance], [0, 0, 0], [0, -1, 0], f, f, size, size)


def random_field(rng, res=(5, 4, 6, 7), d=3, hidden=8, depth=2, head_scale=0.1):
    field = init_field(res, d, seed=int(rng.integers(2**31)), hidden=hidden, depth=depth)
    planes = [rng.uniform(0.5, 1.5, p.values.shape) for p in field.planes]
    weights = [rng.normal(0, 0.5, w.shape) for w in field.mlp.weights]
    biases = [rng.normal(0, 0.2, b.shape) for b in field.mlp.biases]
    weights[-1] *= head_scale
    biases[-1] *= head_scale
    return field.with_plane_values(planes).replace(mlp=TinyMLP(weights, biases))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def record_criterion(number, title, ok, detail):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
