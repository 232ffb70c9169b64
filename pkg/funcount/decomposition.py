# funcount/decomposition.py

from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from funcount.arrays import FloatArray
from funcount.outputs import atomic_write_text

Method = Literal["GFPCA", "PFPCA", "NARFD"]


class Decomposition(BaseModel):
    """
    Result of any of the three count-curve decompositions.

    `mean` is on the log scale for GFPCA/PFPCA and absent for NARFD.
    `fitted` lives on the observation (count) scale and is not written to
    JSON; reload a decomposition and refit if fitted values are needed.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    method: Method = Field(description="Decomposition method tag.")
    grid: FloatArray = Field(description="Time grid shared by all curves.")
    subject_ids: List[str] = Field(default_factory=list, description="Subject ids, one per score row.")
    mean: Optional[FloatArray] = Field(default=None, description="Mean function on the link scale (None for NARFD).")
    components: FloatArray = Field(description="K x T component functions on the grid.")
    scores: FloatArray = Field(description="N x K subject scores.")
    eigenvalues: Optional[FloatArray] = Field(default=None, description="K eigenvalues, descending (GFPCA/PFPCA).")
    noise_var: Optional[float] = Field(default=None, description="Measurement-error variance (GFPCA).")
    fitted: Optional[FloatArray] = Field(default=None, exclude=True, description="N x T fitted values, count scale.")
    penalty_weight: Optional[float] = Field(default=None, description="NARFD roughness penalty weight.")
    objective_trace: Optional[FloatArray] = Field(default=None, description="NARFD objective per half-iteration.")
    converged: bool = Field(default=True, description="False when an iterative fit hit its iteration cap.")

    @model_validator(mode="after")
    def _check_shapes(self):
        t = self.grid.size
        if self.components.ndim != 2 or self.components.shape[1] != t:
            raise ValueError(f"components must be K x {t}")
        k = self.components.shape[0]
        if self.scores.ndim != 2 or self.scores.shape[1] != k:
            raise ValueError(f"scores must be N x {k}")
        if self.subject_ids and len(self.subject_ids) != self.scores.shape[0]:
            raise ValueError("one subject id per score row is required")
        if self.mean is not None and self.mean.shape != (t,):
            raise ValueError(f"mean must have length {t}")
        if self.eigenvalues is not None and self.eigenvalues.shape != (k,):
            raise ValueError(f"eigenvalues must have length {k}")
        if self.fitted is not None and self.fitted.shape != (self.scores.shape[0], t):
            raise ValueError("fitted must be N x T")
        return self

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def score_names(self) -> List[str]:
        prefix = self.method.lower()
        return [f"{prefix}_score_{k + 1}" for k in range(self.n_components)]


def save_decomposition(decomp: Decomposition, path: Union[str, Path]) -> Path:
    return atomic_write_text(path, decomp.model_dump_json(indent=2, exclude_none=True))


def load_decomposition(path: Union[str, Path]) -> Decomposition:
    return Decomposition.model_validate_json(Path(path).read_text(encoding="utf-8"))
