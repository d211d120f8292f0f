from .boxes import Annotation, BBox, iou
from .detector import Detection, MiniDetector, ProposalRecord
from .maf import LossTerms, MafModel
