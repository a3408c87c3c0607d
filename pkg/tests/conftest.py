import numpy as np
import pytest
from scipy import ndimage as ndi

from octpipe.phantom import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def flat_phantom():
    """Noise-free single frame, ILM at row 40."""
    return generate_phantom(PhantomSpec())


@pytest.fixture(scope="session")
def textured_pair():
    """Blurred speckled phantom frame: enough texture for flow and keypoints."""
    stack, _ = generate_phantom(PhantomSpec(width=256, height=256, speckle=0.4, ilm_depth_px=30,
                                            layer_stack=[["A", 40, 200], ["B", 60, 90], ["C", 50, 170]],
                                            shadows=[(60, 10, 0.6), (150, 14, 0.5)], seed=5))
    return ndi.gaussian_filter(stack.frames[0].astype(float), 2.0)


def rng(seed=0):
    return np.random.default_rng(seed)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
