"""Guidance stub: NaN gradient at epoch 2 (argv[1] overrides)."""
import json
import sys

bad = int(sys.argv[1]) if len(sys.argv) > 1 else 2
n = 0
for line in sys.stdin:
    msg = json.loads(line)
    if msg["type"] == "init":
        n = len(msg["vertices"])
    elif msg["type"] == "step":
        g = "NaN" if msg["epoch"] >= bad else "0.0"
        sys.stdout.write('{"type":"grad","epoch":%d,"loss":0.0,"grad":[%s]}\n' % (msg["epoch"], ",".join(["[%s,0.0,0.0]" % g] * n)))
        sys.stdout.flush()
    elif msg["type"] == "close":
        break
