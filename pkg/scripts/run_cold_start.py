"""History-free model on cold users versus warm users, in a world without persistent goals."""

from dataclasses import replace

from _common import configs, emit, parser
from goweb import pipeline


def main():
    p = parser(__doc__)
    p.add_argument("--persistent-goals", action="store_true",
                   help="keep per-user core goals, making histories informative")
    args = p.parse_args()
    out = {}
    for seed, cfg in configs(args):
        cfg = replace(cfg, synth=replace(cfg.synth, persistent_goals=args.persistent_goals))
        res = pipeline.cold_start_parity(cfg)
        for task, r in res.items():
            key = pipeline.HEADLINE[task]
            r["relative_gap"] = abs(r["cold"][key] - r["warm"][key]) / r["warm"][key]
        out[seed] = res
    emit(args, out)


if __name__ == "__main__":
    main()
