import pytest

from semod.datakit import GeneratorConfig, generate_synthetic_dataset, with_resolved_paths


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 240-image synthetic dataset shared by pipeline/training/CLI tests."""
    out = tmp_path_factory.mktemp("smallset")
    config = GeneratorConfig(n_samples=240, seed=9)
    records, manifest = generate_synthetic_dataset(config, out)
    return with_resolved_paths(records, manifest), manifest
