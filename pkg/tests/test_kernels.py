import subprocess
import sys

import numpy as np
import pytest

from headpose import _pykernels, kernels
from headpose.geometry import geodesic_error, random_quaternions

needs_compiled = pytest.mark.skipif(not kernels.HAVE_COMPILED, reason="compiled kernels not built")


@pytest.fixture
def restore_backend():
    name = kernels.backend()
    yield
    kernels.use_backend(name)


def random_map(rng):
    th, k = rng.uniform(-np.pi, np.pi), rng.uniform(0.3, 3.0)
    lin = k * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return np.column_stack([lin, rng.uniform(-50, 150, 2)])


def test_python_warp_against_loop_oracle(rng, restore_backend):
    kernels.use_backend("python")
    img = rng.integers(0, 256, size=(13, 17), dtype=np.uint8)
    inv = random_map(rng) * [1, 1, 0.1]
    out = kernels.warp_bilinear(img, inv, 9, 11)
    h, w = img.shape
    for r in range(9):
        for c in range(11):
            x = min(max(inv[0, 0] * c + inv[0, 1] * r + inv[0, 2], 0.0), w - 1.0)
            y = min(max(inv[1, 0] * c + inv[1, 1] * r + inv[1, 2], 0.0), h - 1.0)
            x0, y0 = min(int(x), w - 2), min(int(y), h - 2)
            fx, fy = x - x0, y - y0
            top = img[y0, x0] * (1 - fx) + img[y0, x0 + 1] * fx
            bot = img[y0 + 1, x0] * (1 - fx) + img[y0 + 1, x0 + 1] * fx
            expect = int(np.floor(top * (1 - fy) + bot * fy + 0.5))
            assert abs(int(out[r, c]) - expect) <= 1  # oracle interpolates in a different order


def test_geodesic_kernel_matches_reference(rng, restore_backend):
    a, b = random_quaternions(rng, 500), random_quaternions(rng, 500)
    for name in ("python",) + (("compiled",) if kernels.HAVE_COMPILED else ()):
        kernels.use_backend(name)
        ref = np.array([geodesic_error(x, y) for x, y in zip(a, b)])
        np.testing.assert_allclose(kernels.geodesic_angles(a, b), ref, atol=1e-12)
        np.testing.assert_array_equal(kernels.geodesic_angles(a, -b), kernels.geodesic_angles(a, b))


@needs_compiled
def test_backends_agree(rng, restore_backend):
    img = rng.integers(0, 256, size=(240, 320), dtype=np.uint8)
    a, b = random_quaternions(rng, 2000), random_quaternions(rng, 2000)
    results = {}
    for name in ("python", "compiled"):
        kernels.use_backend(name)
        warps = [kernels.warp_bilinear(img, random_map(np.random.default_rng(i)), 129, 129) for i in range(20)]
        results[name] = (warps, kernels.geodesic_angles(a, b))
    for x, y in zip(results["python"][0], results["compiled"][0]):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_allclose(results["python"][1], results["compiled"][1], rtol=0, atol=1e-12)


def test_backend_selection(restore_backend):
    kernels.use_backend("python")
    assert kernels.backend() == "python"
    with pytest.raises(ValueError):
        kernels.use_backend("gpu")
    assert _pykernels.warp_bilinear is not None


def test_input_validation():
    with pytest.raises(ValueError):
        kernels.warp_bilinear(np.zeros((4, 4, 3), np.uint8), np.zeros((2, 3)), 2, 2)
    with pytest.raises(ValueError):
        kernels.warp_bilinear(np.zeros((4, 4), np.uint8), np.zeros((3, 3)), 2, 2)


def test_fallback_is_selected_when_extension_is_missing():
    code = (
        "import sys; sys.modules['headpose._ckernels'] = None\n"
        "from headpose import kernels, augment\n"
        "assert not kernels.HAVE_COMPILED and kernels.backend() == 'python'\n"
        "import numpy as np\n"
        "print(kernels.warp_bilinear(np.full((4, 4), 7, np.uint8), np.eye(2, 3), 2, 2).sum())\n"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "28"
