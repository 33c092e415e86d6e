"""Full Sioux Falls recipe: 5000 train / 500 test samples, 200 epochs, batch 500, lr 1e-3.

Needs the TNTP files ``SiouxFalls_net.tntp`` and ``SiouxFalls_trips.tntp``
(not shipped; academic-use licence). Expect several hours of CPU time,
dominated by ground-truth generation.

Usage:
    python3 scripts/reproduce_sioux_falls.py --tntp-dir DIR [--work runs/sioux] [--seed 0]
"""

import argparse
import sys
from pathlib import Path

from eqfpn.cli import main as eqfpn


def run(argv):
    print("$ eqfpn " + " ".join(argv), flush=True)
    code = eqfpn(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tntp-dir", required=True)
    ap.add_argument("--work", default="runs/sioux_falls")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=5500)
    ap.add_argument("--epochs", type=int, default=200)
    args = ap.parse_args()
    src, work = Path(args.tntp_dir), Path(args.work)
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data"
    if not (data / "metadata.json").exists():
        run(["generate", "--game", "tntp", "--net", str(src / "SiouxFalls_net.tntp"),
             "--trips", str(src / "SiouxFalls_trips.tntp"), "--n", str(args.n), "--seed", str(args.seed),
             "--out", str(data)])
    run(["-v", "train", "--data", str(data), "--epochs", str(args.epochs), "--batch", "500", "--lr", "1e-3",
         "--seed", str(args.seed), "--out", str(work / "model.npz"), "--history", str(work / "history.csv")])
    run(["eval", "--model", str(work / "model.npz"), "--data", str(data), "--out", str(work / "eval.csv")])


if __name__ == "__main__":
    main()
