import numpy as np
import pytest

from midres.data import load_manifest, synth_dataset

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_manifest(tmp_path_factory):
    """30 synthetic 64x64 images, 10 per class."""
    out = tmp_path_factory.mktemp("synth") / "data"
    return load_manifest(synth_dataset(10, 64, 3, seed=0, out_dir=out))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


MRI_CENSUS = {"glioma": 1426, "meningioma": 708, "pituitary": 930}


@pytest.fixture(scope="session")
def mri_census_manifest(tmp_path_factory):
    """3064-record manifest with the MRI class counts; every record points at one tiny dummy blob."""
    from midres.data import save_tensor_blob, write_manifest
    from midres.model import TUMOR_CLASSES

    root = tmp_path_factory.mktemp("census")
    save_tensor_blob(np.zeros((1, 2, 2), dtype=np.float32), root / "dummy.tnsb")
    records = [("dummy.tnsb", label, name)
               for label, name in enumerate(TUMOR_CLASSES) for _ in range(MRI_CENSUS[name])]
    return load_manifest(write_manifest(root / "manifest.txt", records, 3, (1, 2, 2)))
