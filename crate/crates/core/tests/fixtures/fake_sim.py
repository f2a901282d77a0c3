#!/usr/bin/env python3
"""AR(1) simulator speaking the OUTPUTMV line protocol, with fault modes.

Modes:
  ok          well-behaved
  ack         prints an acknowledgement after every reset
  badprefix   answers without the OUTPUTMV: prefix
  nonnumeric  answers OUTPUTMV:abc
  nosentinel  answers 0 for unknown observables
  noexit      ignores EOF and keeps running
  slow        sleeps before every answer
  crash       exits with status 1 at the first observation
"""
import argparse
import os
import random
import sys
import time

parser = argparse.ArgumentParser()
parser.add_argument("--phi", type=float, default=0.5)
parser.add_argument("--sd", type=float, default=1.0)
parser.add_argument("--mode", default="ok")
parser.add_argument("--argv-log")
parser.add_argument("--crash-once", help="crash at the first observation unless this file exists")
parser.add_argument("-experimentMV", type=int, default=None)
parser.add_argument("-numMCexpMV", type=int, default=None)
args = parser.parse_args()

if args.argv_log:
    with open(args.argv_log, "a") as f:
        f.write(" ".join(sys.argv[1:]) + "\n")

rng = random.Random(0)
x = 0.0


def answer(value):
    if args.mode == "slow":
        time.sleep(2.0)
    if args.mode == "badprefix":
        sys.stdout.write("VALUE:%r\n" % value)
    elif args.mode == "nonnumeric":
        sys.stdout.write("OUTPUTMV:abc\n")
    else:
        sys.stdout.write("OUTPUTMV:%r\n" % value)
    sys.stdout.flush()


for raw in sys.stdin:
    line = raw.strip()
    if not line:
        continue
    if line.startswith("reset"):
        parts = line.split()
        try:
            seed = int(parts[1])
        except (IndexError, ValueError):
            answer(-1.0)
            continue
        rng = random.Random(seed)
        x = rng.gauss(0.0, args.sd)
        if args.mode == "ack":
            sys.stdout.write("OK\n")
            sys.stdout.flush()
    elif line == "next":
        x = args.phi * x + rng.gauss(0.0, args.sd)
    else:
        if args.mode == "crash":
            sys.exit(1)
        if args.crash_once and not os.path.exists(args.crash_once):
            open(args.crash_once, "w").close()
            sys.exit(1)
        if line == "X":
            answer(x)
        elif line == "XSQ":
            answer(x * x)
        else:
            answer(0.0 if args.mode == "nosentinel" else -1.0)

if args.mode == "noexit":
    time.sleep(60)
