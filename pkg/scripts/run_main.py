"""Train and evaluate the full toy model (about an hour on one CPU core)."""
import argparse
import json
import logging

from gazefield.presets import main_experiment

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--artifacts", default="artifacts")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
result = main_experiment(args.artifacts)
print(json.dumps(result["report"], indent=2))
