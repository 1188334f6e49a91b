"""Shared fixtures: reference meshes and the session-scoped trained benchmark.

Training the benchmark denoiser takes a few minutes; set
SPECMATCH_TEST_CACHE=<dir> to cache the checkpoint and dataset between runs
(safe: training is bit-deterministic for fixed seeds, but wipe the cache
after changing model code).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from specmatch import (
    DeformConfig,
    DenoiserConfig,
    MapDataset,
    NoiseSchedule,
    TriangleMesh,
    build_fmap_dataset,
    deform,
    make_template,
    train_denoiser,
)
from specmatch.sgm import DenoiserParams, load_checkpoint, save_checkpoint
from specmatch.synth import template_basis

settings.register_profile(
    "specmatch",
    derandomize=True,
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("specmatch")

BENCH_SEED = 11
BENCH_EPSILON = 0.12
BENCH_ROTATE = 20.0  # pose decoupling for held-out matching pairs
BENCH_COUNT = 4000
BENCH_EPOCHS = 400
BENCH_LR = 3e-3
BENCH_SDATA = 0.08
HOLDOUT_SEED = 777


def grid_mesh(nx: int, ny: int | None = None) -> TriangleMesh:
    """Unit-square right-triangle grid with nx * ny vertices."""
    ny = ny or nx
    xs, ys = np.meshgrid(np.linspace(0, 1, nx), np.linspace(0, 1, ny), indexing="ij")
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a = i * ny + j
            b = a + ny
            faces.append([a, b, a + 1])
            faces.append([b, b + 1, a + 1])
    return TriangleMesh(verts, np.array(faces))


@pytest.fixture(scope="session")
def icosphere3() -> TriangleMesh:
    return make_template("icosphere", 3)


@pytest.fixture(scope="session")
def bumpy2() -> TriangleMesh:
    return make_template("bumpy", 2)


@pytest.fixture(scope="session")
def square25() -> TriangleMesh:
    return grid_mesh(25)


@dataclass
class Bench:
    """Trained 30x30 denoiser plus its synthetic training family."""

    denoiser: DenoiserParams
    dataset: MapDataset
    losses: list
    gen: DeformConfig
    template: TriangleMesh

    def holdout_shapes(self, count: int, seed: int = HOLDOUT_SEED,
                       rotate: float = BENCH_ROTATE):
        cfg = DeformConfig(kind=self.gen.kind, level=self.gen.level,
                           epsilon=self.gen.epsilon, seed=seed, rotate=rotate)
        basis = template_basis(self.template, 13)
        return [deform(self.template, cfg, i, basis=basis) for i in range(count)]


def _build_bench() -> Bench:
    gen = DeformConfig(kind="bumpy", level=2, epsilon=BENCH_EPSILON, seed=BENCH_SEED)
    cache = os.environ.get("SPECMATCH_TEST_CACHE")
    ckpt = maps = losses_file = None
    if cache:
        root = Path(cache)
        root.mkdir(parents=True, exist_ok=True)
        tag = f"{gen.kind}{gen.level}_e{gen.epsilon}_s{BENCH_SEED}_c{BENCH_COUNT}_ep{BENCH_EPOCHS}"
        ckpt = root / f"bench_{tag}.sgm"
        maps = root / f"bench_{tag}.npy"
        losses_file = root / f"bench_{tag}.losses.npy"
    if ckpt and ckpt.exists() and maps.exists() and losses_file.exists():
        dataset = MapDataset(np.load(maps), {"cached": True})
        return Bench(load_checkpoint(ckpt), dataset, list(np.load(losses_file)),
                     gen, make_template(gen.kind, gen.level))
    dataset = build_fmap_dataset(gen, BENCH_COUNT, 30)
    params, losses = train_denoiser(dataset, DenoiserConfig(s_data=BENCH_SDATA),
                                    NoiseSchedule(), epochs=BENCH_EPOCHS, seed=0,
                                    lr=BENCH_LR)
    if ckpt:
        save_checkpoint(params, ckpt)
        np.save(maps, dataset.maps)
        np.save(losses_file, np.array(losses))
    return Bench(params, dataset, losses, gen, make_template(gen.kind, gen.level))


@pytest.fixture(scope="session")
def bench() -> Bench:
    return _build_bench()


@pytest.fixture
def announce(capsys):
    """Print a live acceptance pass/fail line even under output capture."""

    def _announce(criterion: str, ok: bool, detail: str):
        with capsys.disabled():
            state = "PASS" if ok else "FAIL"
            print(f"[acceptance] {criterion}: {state} ({detail})", flush=True)
        assert ok, f"{criterion}: {detail}"

    return _announce
