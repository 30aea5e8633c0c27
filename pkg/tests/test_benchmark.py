import importlib.util
import pathlib

BENCH = pathlib.Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"


def test_benchmark_runs(capsys):
    spec = importlib.util.spec_from_file_location("bench_kernels", BENCH)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    mod.main(["--n", "6", "--points", "2", "--repeat", "1"])
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("grid 6^3, 64 pairs")
    assert len(out) == 2 + 8
