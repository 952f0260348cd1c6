"""
Interface definitions for the region lab.
Concrete operators, proposal sources, renderers and cell runners depend on these
abstractions so the pipeline and the ablation orchestrator can swap them freely.
"""

from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Dict, List, Sequence, Tuple

import numpy as np

if TYPE_CHECKING:
    from boxgeom import Box
    from roiops import RoiFeature, RoiOpSpec, RoiProvenance
    from synthgen import InstanceAnnotation


class RoiOperator(ABC):
    """Extracts a fixed-size feature map from one RoI and replays its adjoint"""

    kind: str = ""

    @abstractmethod
    def forward(self, feature: np.ndarray, roi: "Box", spec: "RoiOpSpec") -> "RoiFeature":
        """Extract the RoI feature and the provenance needed for backward"""
        pass

    @abstractmethod
    def backward(self, grad_out: np.ndarray, provenance: "RoiProvenance",
                 feature_shape: Tuple[int, int, int]) -> np.ndarray:
        """Scatter an output gradient back onto the feature map"""
        pass


class ProposalSource(ABC):
    """Produces candidate boxes for the second stage"""

    @abstractmethod
    def propose(self, image_shape: Tuple[int, int], annotations: Sequence["InstanceAnnotation"],
                rng: np.random.Generator) -> List["Box"]:
        """Return proposals for one image"""
        pass


class ReportRenderer(ABC):
    """Renders a flat metric report or a table of rows"""

    @abstractmethod
    def render(self, report: Dict, title: str) -> str:
        """Render report data into the renderer's format"""
        pass


class CellRunner(ABC):
    """Runs one (variant, seed) cell of an ablation"""

    @abstractmethod
    def run_cell(self, config, seed: int, out_dir: str) -> Dict[str, float]:
        """Train and evaluate one configuration, returning its metric report"""
        pass
