"""The command line tool end to end on a small synthetic digit set.

Everything below goes through ``fecnet.cli.main``, exactly as the ``fecnet``
executable would: write a run configuration, train for a few epochs, inspect
the checkpoint, evaluate it, and segment a digit image. The run directory
keeps the resolved configuration, the per-epoch metrics and the logs, so the
same numbers can be regenerated later from the same seed.

A couple of hundred steps on 2000 digits only lift accuracy a little above
chance. The model needs the full 60k set for a few epochs, as in the
acceptance test, to pass 95%. This script is about the plumbing.

Run:  python demos/03_command_line_round_trip.py [work_dir]
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from fecnet.cli import main as fecnet
from fecnet.synthetic import make_digits, write_mnist_idx


def main(work="demo_cli"):
    work = Path(work)
    data = write_mnist_idx(work / "digits", n_train=2000, n_test=500, seed=5)
    config = work / "run.cfg"
    config.write_text("# a few quick epochs on 2000 synthetic digits\n"
                      f"data = {data}\n"
                      "epochs = 4\nbatch_size = 32\nbase_lr = 2e-3\nwarmup_epochs = 0.5\n"
                      "hflip = false  # digits are not mirror symmetric\nseed = 1\n")
    run = work / "run"

    steps = [
        ["train", "--config", str(config), "--out", str(run)],
        ["inspect", str(run / "checkpoint.fecw")],
        ["eval", str(run / "checkpoint.fecw"), str(data)],
    ]
    digit, label = make_digits(1, seed=99)
    Image.fromarray(np.asarray(digit[0], np.uint8)).save(work / "digit.png")
    steps.append(["segment", str(run / "checkpoint.fecw"), str(work / "digit.png"),
                  "--out", str(work / "segments"), "--level", "1", "--level", "3", "--k", "3"])
    for argv in steps:
        print("$ fecnet " + " ".join(argv))
        code = fecnet(argv)
        print(f"  -> exit {code}\n")
        if code:
            return code
    print("metrics.log:", (run / "metrics.log").read_text().strip())
    print("segment files:", sorted(p.name for p in (work / "segments").iterdir()))
    return 0


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
