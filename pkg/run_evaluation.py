import logging
import sys
sys.path.append('.')
from src.benchmark import BenchmarkRunner
from src.config import load_config, parse_overrides

CONFIG = "config/synthetic_benchmark.ini"


def main():
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")
    print("Running synthetic open-set benchmark...")

    config = load_config(CONFIG, parse_overrides(sys.argv[1:]))
    result = BenchmarkRunner(config).run()

    print("\nBenchmark completed successfully!" if result.passed else "\nBenchmark finished with failing checks")
    print(f"Adapted C2AE AUROC: {result.report('c2ae').auroc:.3f}")
    sys.exit(0 if result.passed else 1)

if __name__ == "__main__":
    main()
