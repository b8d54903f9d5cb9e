from typing import Literal, Optional, TypedDict


Split = Literal["labeled", "unlabeled", "test"]


class ManifestEntry(TypedDict):
    image: str
    mask: Optional[str]
    patient: str
    split: Split


class TransformRecord(TypedDict, total=False):
    op: str
    geometric: bool
    # op specific payload
    k: int
    dy: int
    dx: int
    top: int
    left: int
    height: int
    width: int
    scale: float
    value: float
    sigma: float
    alpha: float
    fill: float
    fallback: bool


class Stage1Record(TypedDict):
    step: int
    total: float
    text: float
    mask: float


class Stage2Record(TypedDict):
    iteration: int
    loss_sup: float
    loss_u_teacher: float
    loss_u_assistant: float
    alpha_t: float
    alpha_v: float
    confident_fraction: float
