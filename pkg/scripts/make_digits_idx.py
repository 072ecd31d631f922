"""Write the 5,000 MNIST digits bundled with mlxtend as IDX files.

    pip download --no-deps mlxtend -d /tmp/wheels
    python scripts/make_digits_idx.py /tmp/wheels/mlxtend-*.whl data/digits

The source table is sorted by digit class, so rows are shuffled with a
fixed seed before the first 4,000 become the training file and the last
1,000 the test file.  Only the greyscale pixels are needed downstream; labels are written
for completeness.
"""
import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from cifvi.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
SHUFFLE_SEED = 20200


def main(wheel: str, out: str) -> None:
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    table = table[np.random.default_rng(SHUFFLE_SEED).permutation(len(table))]
    pixels, labels = table[:, :784], table[:, 784]
    images = pixels.reshape(-1, 28, 28).astype(np.uint8)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", images[:4000])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[:4000].astype(np.uint8))
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[4000:])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[4000:].astype(np.uint8))


if __name__ == "__main__":
    main(*sys.argv[1:3])
