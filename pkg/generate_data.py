import logging
import sys
sys.path.append('.')
from src.config import load_config
from src.pipeline import Pipeline

CONFIG = "config/synthetic_benchmark.ini"


def main():
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")
    config = load_config(sys.argv[1] if len(sys.argv) > 1 else CONFIG)
    manifest = Pipeline(config).generate()
    print(f'Generated {len(manifest)} synthetic clips under {config.paths.dataset_root}')

    print("\nClips per class:")
    for label, count in sorted(manifest.class_counts().items()):
        kind = "known" if label in config.data.known_classes else "unknown"
        print(f'  {label} ({kind}): {count}')
    print('-' * 60)

if __name__ == "__main__":
    main()
