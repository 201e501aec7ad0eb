"""Full versus goal-ablated model on both tasks across seeds."""

import numpy as np

from _common import configs, emit, parser
from goweb import pipeline


def main():
    args = parser(__doc__).parse_args()
    per_seed, gains = {}, {t: [] for t in pipeline.TASKS}
    for seed, cfg in configs(args):
        runs = pipeline.goal_awareness_run(cfg)
        row = {}
        for task in pipeline.TASKS:
            key = pipeline.HEADLINE[task]
            full, abl = runs[(task, "full")][key], runs[(task, "ablation")][key]
            gains[task].append(pipeline.relative_gain(full, abl))
            row[task] = {"full": runs[(task, "full")], "ablation": runs[(task, "ablation")],
                         "relative_gain": gains[task][-1]}
        per_seed[seed] = row
    summary = {t: {"mean_relative_gain": float(np.mean(g)),
                   "seeds_won": int(sum(x > 0 for x in g))} for t, g in gains.items()}
    summary["pooled_mean_relative_gain"] = float(np.mean([x for g in gains.values() for x in g]))
    emit(args, {"per_seed": per_seed, "summary": summary})


if __name__ == "__main__":
    main()
