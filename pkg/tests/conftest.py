import logging
from pathlib import Path
from typing import Callable, List, Sequence

import numpy as np
import pytest
import torch

from app.config import (
    ExperimentConfig,
    PhantomConfig,
    TrainConfig,
    UNetConfig,
    student_train_config,
    teacher_train_config,
)
from app.data.ingest import truncate_hu
from app.data.model import BoxSet
from app.data.samples import TrainCase, one_hot
from app.phantom.generator import gen_phantom, phantom_case_id, write_corpus
from app.phantom.oracles import oracle_grad, relative_error
from app.utils.seed import sample_rng

# small enough for CPU unit tests, big enough for lesions to fit
TINY_PHANTOM = PhantomConfig(
    shape=(8, 32, 32),
    lesion_count=(1, 2),
    lesion_radius=(1.5, 2.5),
    distractor_count=(0, 1),
    seed=0,
)
TINY_NET = UNetConfig(scales=2, base_channels=2)
TINY_CROP = (4, 32, 32)


def tiny_teacher(**overrides) -> TrainConfig:
    base = dict(epochs=2, crop=TINY_CROP, net=TINY_NET, val_every=1, batch_size=4)
    base.update(overrides)
    return teacher_train_config(**base)


def tiny_student(**overrides) -> TrainConfig:
    base = dict(epochs=2, decay_start=1, crop=TINY_CROP, net=TINY_NET, val_every=1, batch_size=4)
    base.update(overrides)
    return student_train_config(**base)


@pytest.fixture
def phantom_cfg() -> PhantomConfig:
    return TINY_PHANTOM


@pytest.fixture
def strong_cases() -> List[TrainCase]:
    out = []
    for i in range(3):
        volume, mask = gen_phantom(TINY_PHANTOM, sample_rng(TINY_PHANTOM.seed, i), phantom_case_id(i))
        out.append(TrainCase(truncate_hu(volume), BoxSet.from_mask(mask), mask))
    return out


@pytest.fixture
def pseudo_cases() -> List[TrainCase]:
    """Pseudo cases whose soft labels are the one-hot ground truth."""
    out = []
    for i in range(10, 13):
        volume, mask = gen_phantom(TINY_PHANTOM, sample_rng(TINY_PHANTOM.seed, i), phantom_case_id(i))
        soft = np.stack([one_hot(mask.labels[d]) for d in range(mask.shape[0])], axis=1)
        out.append(TrainCase(truncate_hu(volume), BoxSet.from_mask(mask), None, soft))
    return out


@pytest.fixture
def dataset_root(tmp_path: Path) -> Path:
    root = tmp_path / "cases"
    write_corpus(root, TINY_PHANTOM, 10)
    return root


@pytest.fixture
def tiny_experiment(tmp_path: Path, dataset_root: Path) -> ExperimentConfig:
    return ExperimentConfig(
        dataset_root=dataset_root,
        out_dir=tmp_path / "run",
        ratio=(30, 60, 10),
        seed=0,
        teacher=tiny_teacher(),
        student=tiny_student(),
        phantom=TINY_PHANTOM,
        phantom_cases=10,
    )


@pytest.fixture
def mixseg_logs(caplog):
    caplog.set_level(logging.INFO, logger="mixseg")
    return caplog


@pytest.fixture
def grad_check() -> Callable[..., float]:
    """
    Backprop once, then compare against central differences on a seeded
    random subset of `per_param` entries per parameter. Returns the
    relative error over all checked entries.
    """
    def run(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
            per_param: int = 4, eps: float = 1e-6, seed: int = 0) -> float:
        params = list(params)
        for p in params:
            p.grad = None
        loss_fn().backward()
        analytic = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]
        rng = np.random.default_rng(seed)
        entries = [sorted(rng.choice(p.numel(), size=min(per_param, p.numel()), replace=False).tolist())
                   for p in params]
        numeric = oracle_grad(loss_fn, params, eps=eps, entries=entries)
        return relative_error(torch.cat([a.reshape(-1) for a in analytic]),
                              torch.cat([n.reshape(-1) for n in numeric]))
    return run


@pytest.fixture
def make_teacher_cfg() -> Callable[..., TrainConfig]:
    return tiny_teacher


@pytest.fixture
def make_student_cfg() -> Callable[..., TrainConfig]:
    return tiny_student
