import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# Photographs bundled with scikit-image, used as the natural-image fixture.
NATURAL_NAMES = ("astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry",
                 "hubble_deep_field", "retina", "cat", "colorwheel", "motorcycle_left")

ACCEPTANCE_LINES = []


def _natural_image(name):
    import skimage.data as sd

    if name == "motorcycle_left":
        img = sd.stereo_motorcycle()[0]
    else:
        img = getattr(sd, name)()
    img = np.asarray(img)[..., :3]
    return np.transpose(img, (2, 0, 1)).astype(np.float64) / 255.0


def natural_crops(n, size=64, seed=0):
    """``n`` crops of side ``size``, cycling through the photographs with random offsets."""
    rng = np.random.default_rng(seed)
    cache, out = {}, []
    for i in range(n):
        name = NATURAL_NAMES[i % len(NATURAL_NAMES)]
        if name not in cache:
            cache[name] = _natural_image(name)
        img = cache[name]
        y = int(rng.integers(0, img.shape[1] - size + 1))
        x = int(rng.integers(0, img.shape[2] - size + 1))
        out.append(img[:, y:y + size, x:x + size].copy())
    return out


@pytest.fixture(scope="session")
def natural20():
    pytest.importorskip("skimage")
    return natural_crops(20)


def bd_oracle(anchor, test, samples=100_000):
    """Independent Bjontegaard value from (bpp, quality) pairs: np.polyfit cubics of log10 rate
    against quality, trapezoid integration of their difference over the shared quality interval."""
    qa, ra = np.array([p[1] for p in anchor]), np.log10([p[0] for p in anchor])
    qt, rt = np.array([p[1] for p in test]), np.log10([p[0] for p in test])
    ca, ct = np.polyfit(qa, ra, 3), np.polyfit(qt, rt, 3)
    grid = np.linspace(max(qa.min(), qt.min()), min(qa.max(), qt.max()), samples)
    diff = np.polyval(ct, grid) - np.polyval(ca, grid)
    avg = np.trapezoid(diff, grid) / (grid[-1] - grid[0])
    return (10 ** avg - 1) * 100


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cid_report():
    from rpprep.cid import toy_distill_demo

    return toy_distill_demo(seed=0)


REFERENCE_QPS = (22, 28, 34, 40)


@pytest.fixture(scope="session")
def reference_run():
    """The fixed-seed 3000-step training run on 500 curated patches, with held-out sweeps."""
    from rpprep import evaluation, preproc
    from rpprep.data import synthetic_patch_set
    from rpprep.entropy import EntropyModel

    train_set = synthetic_patch_set(0, 60, 256, 64, 20)[:500]
    held_out = synthetic_patch_set(1, 10, 256, 64, 4)
    net, model = preproc.PreprocNet(seed=0), EntropyModel()
    net, report = preproc.train(net, train_set, preproc.TrainConfig(steps=3000, seed=0), model)
    return {
        "net": net,
        "model": model,
        "report": report,
        "train_size": len(train_set),
        "held_out": held_out,
        "anchor": evaluation.sweep(held_out, REFERENCE_QPS, None, "identity"),
        "trained": evaluation.sweep(held_out, REFERENCE_QPS, net, "trained"),
    }
