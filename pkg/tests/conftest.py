import os
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

REPO_ROOT = Path(__file__).resolve().parent.parent
MNIST_DIR = Path(os.environ.get("F4_DATA_DIR", REPO_ROOT / "data")) / "mnist"


def mnist_available():
    for stem in (
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ):
        p = MNIST_DIR / stem
        if not p.exists() and not p.with_name(p.name + ".gz").exists():
            return False
    return True
