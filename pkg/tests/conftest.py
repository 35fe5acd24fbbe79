import pytest


def pytest_configure(config):
    # training-heavy tests recycle large buffers; keep the heap warm
    from tfckit.train import tune_allocator
    tune_allocator()
