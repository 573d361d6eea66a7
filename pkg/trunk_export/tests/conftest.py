import pytest

from trunk_export.export import SUPPORTED_MODELS, export


@pytest.fixture(scope="session")
def exported_dir(tmp_path_factory):
    """One export of every catalog model, shared across the suite."""
    out = tmp_path_factory.mktemp("exported")
    for name in SUPPORTED_MODELS:
        export(name, out, seed=0)
    return out
