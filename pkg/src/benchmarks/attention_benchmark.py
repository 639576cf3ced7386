from src.benchmarks.base_benchmark import BaseBenchmark
from src.core.frontend import ATTENTION_BENCHMARKS, builtin, reference_attention


class AttentionBenchmark(BaseBenchmark):
    """
    Attention variants over ``q, k, v`` of shape ``(B, N, S, H)``.

    Prefill shapes are scheduled with rolling update, decoding shapes
    (``Sq == 1``) with split-k update.
    """

    names = ATTENTION_BENCHMARKS

    def graph(self):
        return builtin(self.name, self.params)

    def oracle(self, inputs):
        return reference_attention(self.name, inputs, self.params)

    @property
    def shape(self):
        p = self.params
        return (p.B, p.N, p.Sq, p.Skv, p.H)

    @property
    def is_decode(self):
        return self.params.Sq == 1
