"""Train (or load) the four frozen helper networks and print their validation numbers."""
import argparse
import json
import logging

from gazefield.presets import helpers_for

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--artifacts", default="artifacts")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
h = helpers_for(args.artifacts)
print(json.dumps({n: getattr(h, n).validation for n in ("loss_net", "eval_net", "extractor", "embedder")}, indent=2))
