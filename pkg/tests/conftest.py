import numpy as np
import pytest

from app.services.noise import brownian_sheet, sample_white_noise
from app.services.wavelets import WaveletBasisD, build_basis


@pytest.fixture(scope="session")
def haar2():
    return WaveletBasisD(build_basis("haar"), 2)


@pytest.fixture(scope="session")
def haar1():
    return WaveletBasisD(build_basis("haar"), 1)


@pytest.fixture(scope="session")
def db2_2d():
    return WaveletBasisD(build_basis("db2"), 2)


@pytest.fixture(scope="session")
def small_noise():
    """White noise on 16^2 cells of [0,1]^2 with 64 samples."""
    return sample_white_noise(16, 1.0, 2, 64, seed=7)


@pytest.fixture(scope="session")
def stat_noise():
    """White noise on 32^2 cells with enough samples for moment checks."""
    return sample_white_noise(32, 1.0, 2, 2000, seed=11)


@pytest.fixture(scope="session")
def small_sheet(small_noise):
    return brownian_sheet(small_noise)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(key=1234))


@pytest.fixture
def tmp_output(tmp_path, monkeypatch):
    from app.config import settings

    monkeypatch.setattr(settings, "output_dir", str(tmp_path / "outputs"))
    monkeypatch.setattr(settings, "logs_dir", str(tmp_path / "logs"))
    return tmp_path
