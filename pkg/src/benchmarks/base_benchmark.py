from abc import ABC, abstractmethod

from src.core.frontend import default_schedule, lower, output_name, params_for


class BaseBenchmark(ABC):
    """
    Abstract base class for benchmark families.

    A benchmark owns its parameters and knows how to build its tensor-expression
    graph, its dense reference and the schedule applied when none is given.
    """

    names = ()

    def __init__(self, name, shape=None):
        self.name = name
        self.params = params_for(name, shape)

    @abstractmethod
    def graph(self):
        """Build the TensorExprGraph"""
        pass

    @abstractmethod
    def oracle(self, inputs):
        """Dense evaluation of the benchmark output"""
        pass

    @property
    def output(self):
        return output_name(self.name)

    def program(self):
        return lower(self.graph())

    def default_schedule(self):
        return default_schedule(self.name, self.params)

    def __repr__(self):
        return f"{type(self).__name__}({self.name}, {self.params})"
