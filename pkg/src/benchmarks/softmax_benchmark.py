from src.benchmarks.base_benchmark import BaseBenchmark
from src.core.frontend import builtin, reference_attention


class SoftmaxBenchmark(BaseBenchmark):
    """Row-wise softmax denominator ``xsum[i] = sum_j exp(inp[i, j] - max_j inp[i, j])``."""

    names = ("softmax_denom",)

    def graph(self):
        return builtin(self.name, self.params)

    def oracle(self, inputs):
        return reference_attention(self.name, inputs, self.params)

    @property
    def shape(self):
        return (self.params["rows"], self.params["cols"])
