"""Fetch MovieLens-100k and write it in the original ``u.data`` layout.

GroupLens downloads are not always reachable, so the ratings are taken from
the copy bundled in the ``recbole`` wheel (same 100,000 rows, same order,
plus a header line) fetched with ``pip download``.
"""

import argparse
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def fetch(dest: Path) -> Path:
    dest.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--quiet",
             "-d", tmp, "recbole==1.2.1"],
            check=True,
        )
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            lines = zf.read(MEMBER).decode("utf-8").splitlines()
    rows = lines[1:]  # drop the typed header
    if len(rows) != 100_000:
        raise SystemExit(f"unexpected row count {len(rows)}")
    dest.write_text("\n".join(rows) + "\n")
    return dest


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dest", type=Path, default=Path("data/ml-100k/u.data"))
    args = parser.parse_args()
    if args.dest.exists():
        print(f"{args.dest} already present")
        return
    print(f"wrote {fetch(args.dest)}")


if __name__ == "__main__":
    main()
