#!/usr/bin/env python3
"""Dump the default benchmark configuration as editable JSON."""

import argparse
import json

from planmerge.experiment import config_to_json, default_config


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="config.json")
    args = parser.parse_args()
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(config_to_json(default_config()), fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
