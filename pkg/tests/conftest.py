import numpy as np
import pytest

from disagg.scene import Sample, SceneConfig, generate_scene


def make_sample(mask, labels, sample_id="s", oracle=None, channels=3, seed=0):
    mask = np.asarray(mask, dtype=np.int64)
    rng = np.random.default_rng(seed)
    chip = rng.random(mask.shape + (channels,))
    return Sample(id=sample_id, chip=chip, mask=mask, labels=np.asarray(labels, dtype=np.float64), oracle=oracle)


def random_mask(rng, h, w, n):
    """Random mask with exactly n non-empty regions and some background."""
    while True:
        mask = rng.integers(0, n + 1, size=(h, w))
        if len(np.unique(mask[mask > 0])) == n:
            return mask


def rel_error(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_difference(f, x, h):
    """Numerical gradient of scalar f with respect to array x (modified in place and restored)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scenes():
    cfg = SceneConfig(height=16, width=16, parcel_grid=(2, 2), building_size_range=(2, 5), seed=3)
    return [generate_scene(SceneConfig(**{**cfg.__dict__, "seed": s}), sample_id=f"s{s}") for s in range(6)]


ACCEPTANCE_LINES = []


def record_criterion(name, passed, detail=""):
    line = f"{name} {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
