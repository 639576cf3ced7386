from src.benchmarks.attention_benchmark import AttentionBenchmark
from src.benchmarks.base_benchmark import BaseBenchmark
from src.benchmarks.softmax_benchmark import SoftmaxBenchmark
from src.core.errors import UnknownBenchmark

BENCHMARK_CLASSES = (SoftmaxBenchmark, AttentionBenchmark)


def get_benchmark(name, shape=None):
    """
    Args:
        name (str): Benchmark name, e.g. ``causal_attn``.
        shape (tuple): Optional shape; ``(rows, cols)`` or ``(B, N, Sq, Skv, H)``.

    Returns:
        BaseBenchmark: The benchmark instance.
    """
    for cls in BENCHMARK_CLASSES:
        if name in cls.names:
            return cls(name, shape)
    known = [n for cls in BENCHMARK_CLASSES for n in cls.names]
    raise UnknownBenchmark(f"unknown benchmark {name}; choose one of {', '.join(known)}")


__all__ = ["AttentionBenchmark", "BaseBenchmark", "SoftmaxBenchmark", "get_benchmark"]
