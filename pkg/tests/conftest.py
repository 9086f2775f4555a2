import json
import os
import sys
from pathlib import Path

import numpy as np
import pytest

SRC = Path(__file__).resolve().parent.parent / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))


@pytest.fixture(scope="session", autouse=True)
def _adapters_importable():
    # Adapter subprocesses import conformalkit via PYTHONPATH; make sure the
    # source tree is visible even when the package is not installed.
    existing = os.environ.get("PYTHONPATH", "")
    parts = [str(SRC)] + ([existing] if existing else [])
    os.environ["PYTHONPATH"] = os.pathsep.join(parts)
    yield


@pytest.fixture
def scripted_adapter(tmp_path):
    """Build a reason-scripted adapter command from a list of reply rules."""
    counter = {"n": 0}

    def build(replies):
        counter["n"] += 1
        script = tmp_path / f"script_{counter['n']}.json"
        script.write_text(json.dumps({"replies": replies}))
        return (sys.executable, "-m", "conformalkit.adapters", "reason-scripted", "--script", str(script))

    return build


@pytest.fixture
def gray_image(tmp_path):
    """A deterministic 12x16 grayscale fixture image on disk."""
    from conformalkit.container import write_pnm

    rng = np.random.default_rng(2)
    pixels = rng.integers(0, 256, size=(12, 16)).astype(np.uint8)
    path = tmp_path / "image.pgm"
    write_pnm(path, pixels)
    return path, pixels
