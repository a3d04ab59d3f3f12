"""Few-shot calibration curve (needs the main run; trains it first if missing)."""
import argparse
import json
import logging

from gazefield.presets import calibration_experiment

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--artifacts", default="artifacts")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
curve = calibration_experiment(args.artifacts)
print(json.dumps({k: curve[k] for k in ("k", "real_only", "augmented", "pretrained", "wins")}, indent=2))
