"""Toy data tasks: a distribution to learn, its exact denoiser, and its
conditioning inputs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from effdiff.denoiser import ConditionInput, GaussianData, GaussianMixture, GaussianOracle, GmmOracle
from effdiff.schedule import NoiseSchedule


@dataclass
class GmmTask:
    """Isotropic Gaussian mixture.

    With ``conditional=True`` every sample carries its component index as
    class id, and the tokens for class k are a fixed random
    ``n_tokens x d_model`` matrix (drawn from ``token_seed``).
    """

    gmm: GaussianMixture
    conditional: bool = False
    n_tokens: int = 4
    d_model: int = 8
    token_seed: int = 1234
    token_table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.token_seed)
        self.token_table = rng.standard_normal((self.n_classes, self.n_tokens, self.d_model))

    @property
    def dim(self) -> int:
        return self.gmm.dim

    @property
    def n_classes(self) -> int:
        return self.gmm.n_components if self.conditional else 1

    def condition(self, labels: np.ndarray) -> ConditionInput:
        cid = labels if self.conditional else np.zeros_like(labels)
        return ConditionInput(cid, self.token_table[cid])

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, ConditionInput]:
        x, labels = self.gmm.sample(n, rng)
        return x, self.condition(labels)

    def sample_data(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.gmm.sample(n, rng)[0]

    def _mirror(self) -> np.ndarray:
        means = self.gmm.means
        return np.array([int(np.argmin(np.linalg.norm(means + means[k], axis=1))) for k in range(len(means))])

    @property
    def sign_symmetric(self) -> bool:
        """Whether x -> -x maps the data distribution onto itself."""
        g, mirror = self.gmm, self._mirror()
        return bool(
            np.allclose(g.means[mirror], -g.means)
            and np.allclose(g.weights[mirror], g.weights)
            and np.allclose(g.stds[mirror], g.stds)
        )

    def flip_class(self, class_ids: np.ndarray) -> np.ndarray:
        """Class ids after negating x0 (the component with mirrored mean)."""
        if not self.conditional:
            return class_ids
        return self._mirror()[class_ids]

    def oracle(self, schedule: NoiseSchedule) -> GmmOracle:
        return GmmOracle(self.gmm, schedule, per_class=self.conditional)


@dataclass
class GaussianTask:
    data: GaussianData

    @property
    def dim(self) -> int:
        return self.data.dim

    @property
    def n_classes(self) -> int:
        return 1

    def condition(self, labels: np.ndarray) -> ConditionInput:
        return ConditionInput(np.zeros_like(labels))

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, ConditionInput]:
        x, labels = self.data.sample(n, rng)
        return x, self.condition(labels)

    def sample_data(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.data.sample(n, rng)[0]

    @property
    def sign_symmetric(self) -> bool:
        return bool(np.allclose(self.data.mean, 0.0))

    def flip_class(self, class_ids: np.ndarray) -> np.ndarray:
        return class_ids

    def oracle(self, schedule: NoiseSchedule) -> GaussianOracle:
        return GaussianOracle(self.data, schedule)


def two_mode_gmm(dim: int = 2, separation: float = 2.0, std: float = 0.5) -> GaussianMixture:
    mean = np.zeros(dim)
    mean[0] = separation
    return GaussianMixture(np.array([0.5, 0.5]), np.stack([-mean, mean]), np.array([std, std]))
