import hypothesis
import pytest
import torch

from manifest_i2i.data import ToyCorpusSpec, generate_toy_corpus
from manifest_i2i.networks import NetworkBundle, NetworkConfig

hypothesis.settings.register_profile("default", max_examples=25, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")

torch.set_num_threads(1)


def tiny_config(**overrides) -> NetworkConfig:
    kw = dict(base_width=8, mlp_dim=32, disc_width=8, patch_size=8, phi_widths=(4, 8, 8, 8))
    kw.update(overrides)
    return NetworkConfig(**kw)


@pytest.fixture
def tiny_bundle():
    return NetworkBundle(tiny_config())


@pytest.fixture
def images():
    g = torch.Generator().manual_seed(0)
    return torch.rand(2, 3, 32, 32, generator=g) * 2 - 1


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    spec = ToyCorpusSpec(seed=3, size=32, n_source=12, n_anchor=12, n_fewshot=4,
                         n_fewshot_ref=8, n_source_test=6)
    return generate_toy_corpus(spec, root)


def tiny_training_overrides(root, out_dir, **kw):
    cfg = dict(data_root=str(root), out_dir=str(out_dir), resolution=32, iterations=3,
               batch_size=2, base_width=8, mlp_dim=32, disc_width=8, n_patches=2,
               checkpoint_every=2, style_bank_size=4, fewshot_size=4)
    cfg.update(kw)
    return cfg


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    assert passed, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
