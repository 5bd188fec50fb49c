#!/usr/bin/env python3
"""Download the NAB machine-temperature series into data/nab/.

The revision is pinned so the file is stable across runs; override it with
``--revision`` or ``FASTGRANT_NAB_REVISION``. The destination root follows
``FASTGRANT_NAB_DIR`` when set, matching what ``fastgrant predict`` reads.
"""

import argparse
import hashlib
import os
import sys
import urllib.request
from pathlib import Path

DEFAULT_REVISION = "v1.1"
URL = "https://raw.githubusercontent.com/numenta/NAB/{rev}/data/realKnownCause/machine_temperature_system_failure.csv"
RELATIVE = Path("realKnownCause") / "machine_temperature_system_failure.csv"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--revision", default=os.environ.get("FASTGRANT_NAB_REVISION", DEFAULT_REVISION),
                    help="NAB git tag or commit (default %(default)s)")
    ap.add_argument("--dest", default=os.environ.get("FASTGRANT_NAB_DIR",
                                                     Path(__file__).resolve().parents[1] / "data" / "nab"))
    ap.add_argument("--force", action="store_true", help="re-download even if the file exists")
    args = ap.parse_args(argv)

    target = Path(args.dest) / RELATIVE
    if target.exists() and not args.force:
        print(f"{target} already present")
        return 0
    url = URL.format(rev=args.revision)
    try:
        with urllib.request.urlopen(url, timeout=60) as resp:
            body = resp.read()
    except OSError as exc:
        print(f"download of {url} failed: {exc}", file=sys.stderr)
        return 1
    if not body.startswith(b"timestamp,value"):
        print(f"{url} did not return the expected CSV", file=sys.stderr)
        return 1
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(body)
    print(f"wrote {target} ({len(body)} bytes, sha256 {hashlib.sha256(body).hexdigest()[:16]})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
