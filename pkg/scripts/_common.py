import argparse
import json
import logging
import sys

from goweb.config import PRESETS, load_config


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--preset", choices=sorted(PRESETS), default="small")
    p.add_argument("--config", help="JSON overlay applied on top of the preset")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--out", help="write the JSON result here as well as to stdout")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def configs(args):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    for seed in args.seeds:
        base = PRESETS[args.preset](seed)
        yield seed, (load_config(args.config, base).with_seed(seed) if args.config else base)


def emit(args, result) -> None:
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
