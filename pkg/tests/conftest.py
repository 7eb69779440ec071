import warnings

import numpy as np
import pytest
import torch

from promptseg import Config, TeacherPrompter, desk_config, load_backend
from promptseg.types import StudentOutput, TargetSet

warnings.filterwarnings("ignore", message=".*enable_nested_tensor.*")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def desk_cfg() -> Config:
    return desk_config(num_categories=3)


@pytest.fixture(scope="session")
def tiny_cfg() -> Config:
    # smallest legal geometry: 64px image -> 4x4 features -> 1x1 reduced map
    return desk_config(num_categories=2, image_size=64, embed_dim=16,
                       num_queries=4, epochs=2, batch_size=4)


@pytest.fixture(scope="session")
def desk_backend(desk_cfg):
    return load_backend("mock", desk_cfg)


@pytest.fixture(scope="session")
def desk_teacher(desk_cfg):
    return TeacherPrompter(desk_cfg)


def random_instance(rng: np.random.Generator, cfg: Config, num_real: int,
                    dtype=torch.float64) -> tuple[TargetSet, StudentOutput]:
    """Random (targets, predictions) pair with num_real real targets."""
    s, d = cfg.num_queries, cfg.token_dim
    categories = torch.full((s,), cfg.no_part_index, dtype=torch.long)
    categories[:num_real] = torch.from_numpy(
        rng.integers(0, cfg.num_categories, num_real))
    embeddings = torch.zeros(s, d, dtype=dtype)
    embeddings[:num_real] = torch.from_numpy(
        rng.normal(size=(num_real, d))).to(dtype)
    targets = TargetSet(categories=categories, embeddings=embeddings,
                        num_real=num_real)
    preds = StudentOutput(
        class_logits=torch.from_numpy(
            rng.normal(size=(s, cfg.num_categories + 1))).to(dtype),
        prompt_tokens=torch.from_numpy(rng.normal(size=(s, d))).to(dtype))
    return targets, preds
