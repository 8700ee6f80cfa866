"""
Base class for the per-stage agents of the pipeline.
"""
import abc
from typing import ClassVar


class Agent(abc.ABC):
    """
    A pipeline stage applied to one frame (or, for the report agent, to the
    whole run). `stage` names the stage in logs and in per-image error fields.
    """

    stage: ClassVar[str]

    @abc.abstractmethod
    def run(self, *args, **kwargs):
        raise NotImplementedError
