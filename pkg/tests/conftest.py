import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def blobs_tiny():
    from distillbench.datasets import load_dataset

    return load_dataset("blobs-tiny")


@pytest.fixture(scope="session")
def blobs_full():
    from distillbench.datasets import load_dataset

    return load_dataset("blobs")


@pytest.fixture()
def tiny_dataset():
    """A 2-class, 8x8 single-channel dataset small enough for exact checks."""
    from distillbench.datasets import LabeledDataset

    g = torch.Generator().manual_seed(5)
    images = torch.rand(20, 1, 8, 8, generator=g)
    labels = torch.arange(2).repeat_interleave(10)
    return LabeledDataset(
        images=images,
        labels=labels,
        num_classes=2,
        mean=images.mean(dim=(0, 2, 3)),
        std=images.std(dim=(0, 2, 3)),
        name="tiny",
    )
