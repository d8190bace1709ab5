"""Default frame decoder: ``python -m sceneqa.extract_frames <video> <out_dir> <t>...``

Writes one ``<t>.png`` per requested timestamp (seconds, one decimal) into
the output directory, exiting non-zero if any frame cannot be produced.
"""

from __future__ import annotations

import sys
from pathlib import Path


def main(argv: list[str] | None = None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if len(args) < 3:
        print("usage: extract_frames <video> <out_dir> <t>...", file=sys.stderr)
        return 2
    video, out_dir, stamps = args[0], Path(args[1]), args[2:]

    import cv2

    cap = cv2.VideoCapture(video)
    if not cap.isOpened():
        print(f"cannot open {video}", file=sys.stderr)
        return 1
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        for stamp in stamps:
            cap.set(cv2.CAP_PROP_POS_MSEC, float(stamp) * 1000.0)
            ok, frame = cap.read()
            if not ok:
                print(f"no frame at t={stamp}", file=sys.stderr)
                return 1
            if not cv2.imwrite(str(out_dir / f"{stamp}.png"), frame):
                print(f"failed writing frame t={stamp}", file=sys.stderr)
                return 1
    finally:
        cap.release()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
