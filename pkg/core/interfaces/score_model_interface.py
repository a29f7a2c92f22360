from abc import ABC, abstractmethod

import numpy as np


class ScoreModel(ABC):

    @abstractmethod
    def score(self, x_t: np.ndarray, t: float) -> np.ndarray:
        pass
