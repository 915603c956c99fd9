"""Stand-in for an external encoder+decoder: argv = input output qp width height mode."""

import sys

src, dst, qp, width, height, mode = sys.argv[1:7]
data = open(src, "rb").read()
if mode == "fail":
    sys.stderr.write("encoder exploded\n")
    sys.exit(3)
if mode == "nooutput":
    sys.exit(0)
if mode == "invert":
    data = bytes(255 - b for b in data)
open(dst, "wb").write(data)
