"""The result type shared by every redefinition rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

METHODS = ("original", "crump", "ps_minmax", "ps_quantile", "covariate_range", "policy")


@dataclass(frozen=True, eq=False)
class Subpopulation:
    """A redefined population of inference.

    Attributes
    ----------
    method : str
        One of ``METHODS``.
    label : str
        Human-readable tag used in reports (``"crump"``, ``"quantile:90"``,
        ``"policy:frpl"``, ...).
    mask : ndarray of bool
        Retained units, aligned with the frame's rows. Sample units are
        always retained.
    provenance : dict
        Parameters actually used, sufficient to reproduce ``mask``.
    ids : tuple of str
        Frame ids the mask refers to, in frame order.
    region : ndarray of bool, optional
        Units (sample or population) that satisfy the rule itself. A sample
        unit outside the region is still part of the study but resembles no
        retained population unit; weighting estimators give it zero weight.
        ``None`` means every unit.
    """

    method: str
    label: str
    mask: np.ndarray
    provenance: Mapping[str, Any]
    ids: tuple = field(repr=False)
    in_sample: np.ndarray = field(repr=False)
    region: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown redefinition method {self.method!r}")
        mask = np.array(self.mask, dtype=bool)
        in_sample = np.array(self.in_sample, dtype=bool)
        if mask.shape != (len(self.ids),) or in_sample.shape != mask.shape:
            raise ValueError("mask must align with the frame ids")
        if not mask[in_sample].all():
            raise ValueError("a subpopulation must retain every sample unit")
        if not (mask & ~in_sample).any():
            raise ValueError("empty subpopulation")
        region = np.ones_like(mask) if self.region is None else np.array(self.region, dtype=bool)
        if region.shape != mask.shape:
            raise ValueError("region must align with the frame ids")
        if (region[~in_sample] != mask[~in_sample]).any():
            raise ValueError("region and mask disagree on population units")
        for arr in (mask, in_sample, region):
            arr.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "in_sample", in_sample)
        object.__setattr__(self, "region", region)

    @property
    def n0(self) -> int:
        """Number of retained population-only units."""
        return int((self.mask & ~self.in_sample).sum())

    @property
    def population_mask(self) -> np.ndarray:
        return self.mask & ~self.in_sample

    @property
    def sample_support(self) -> np.ndarray:
        """Per sample unit (in frame order): does it satisfy the rule?"""
        return self.region[self.in_sample]

    @property
    def retained_ids(self) -> tuple:
        return tuple(i for i, keep in zip(self.ids, self.mask) if keep)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "label": self.label,
            "n0": self.n0,
            "sample_in_region": int(self.sample_support.sum()),
            "provenance": _jsonable(self.provenance),
            "retained_ids": list(self.retained_ids),
        }


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
