import numpy as np
import pytest

from unite.data import generate_synthetic, split
from unite.embeddings import EmbeddingConfig, Standardizer, TransformerConfig
from unite.model import GPConfig, UniteModel
from unite.train import TrainConfig, Trainer

TINY_LEN = 24
TINY_TRANSFORMER = TransformerConfig(n_blocks=1, n_heads=2, model_dim=8, feedforward_dim=8, max_len=TINY_LEN, out_dim=4)


def tiny_model(cohort, seed=0, ablate=(), n_inducing=8):
    train = cohort.batch(cohort.indices("train"), TINY_LEN)
    emb = EmbeddingConfig(
        len(cohort.vocab), cohort.demographics_dim, cohort.location_dim, TINY_TRANSFORMER, tabular_hidden=4, fused_dim=4,
        use_demographics="demographics" not in ablate, use_location="location" not in ablate,
    )
    return UniteModel.create(emb, GPConfig(n_inducing=n_inducing), Standardizer.fit(train), seed)


TINY_TRAIN = TrainConfig(batch_size=32, pretrain_epochs=2, max_epochs=3, B_train=4, B_eval=16, seed=0)


@pytest.fixture(scope="session")
def tiny_cohort():
    return split(generate_synthetic(150, 40, 8, 0.4, seed=0), seed=0)


@pytest.fixture(scope="session")
def tiny_trained(tiny_cohort):
    model = tiny_model(tiny_cohort)
    Trainer(model, tiny_cohort, TINY_TRAIN).fit()
    return model


# one line per acceptance criterion, printed after the run whatever the capture mode
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
