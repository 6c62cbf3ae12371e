import pytest

from tiledet.data_io import SynthConfig, synth_gen


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """Small synthetic dataset shared by pipeline/service/CLI tests."""
    root = tmp_path_factory.mktemp("mini_dataset")
    cfg = SynthConfig(
        image_count=12,
        width=480,
        height=480,
        objects_min=3,
        objects_max=6,
        object_size_min=40,
        object_size_max=90,
        class_count=3,
        seed=5,
    )
    manifest = synth_gen(cfg, root)
    return root, manifest
