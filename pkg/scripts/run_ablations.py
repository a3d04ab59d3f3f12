"""Train every ablation variant at the reduced step budget and print the comparison table."""
import argparse
import logging

from gazefield.presets import ABLATION_STEPS, ablation_experiment

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--artifacts", default="artifacts")
parser.add_argument("--steps", type=int, default=ABLATION_STEPS)
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
result = ablation_experiment(args.artifacts, steps=args.steps)
print(result["table"], end="")
for label, err in result["errors"].items():
    print(f"{label}: {err}")
