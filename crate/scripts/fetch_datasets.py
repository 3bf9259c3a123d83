#!/usr/bin/env python3
"""Fetch the optdigits, pendigits and landsat (satimage) datasets as CSV.

The UCI originals are redistributed inside the `keel-ds` wheel on PyPI, with
the original training rows first and the test rows after them. This script
downloads that wheel and writes one CSV per dataset into the output
directory, label in the last column. The configs split them with
`train_rows` (optdigits 3823, pendigits 7494, landsat 4435).

    python3 scripts/fetch_datasets.py [out_dir]     # default: data/
"""
import pathlib
import subprocess
import sys
import tempfile
import zipfile

DATASETS = {
    "optdigits": "optdigits",
    "pendigits": "penbased",
    "landsat": "satimage",
}


def main() -> int:
    out_dir = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data")
    out_dir.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "-d", tmp, "keel-ds==0.2.5"],
            check=True,
        )
        wheel = next(pathlib.Path(tmp).glob("keel_ds-*.whl"))
        with zipfile.ZipFile(wheel) as z:
            for name, keel_name in DATASETS.items():
                raw = z.read(f"keel_ds/data/balanced/raw/{keel_name}.dat").decode()
                rows = []
                for line in raw.splitlines():
                    line = line.strip()
                    if not line or line.startswith("@"):
                        continue
                    rows.append(",".join(cell.strip() for cell in line.split(",")))
                path = out_dir / f"{name}.csv"
                path.write_text("\n".join(rows) + "\n")
                print(f"{path}: {len(rows)} rows")
    return 0


if __name__ == "__main__":
    sys.exit(main())
