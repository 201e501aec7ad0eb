"""Per-session K-means++ on estimated goal vectors versus hashed content vectors."""

from _common import configs, emit, parser
from goweb import pipeline


def main():
    args = parser(__doc__).parse_args()
    out = {}
    for seed, cfg in configs(args):
        prep = pipeline.prepare(cfg)
        out[seed] = pipeline.clustering_comparison(prep.data.sessions, prep.corpus,
                                                   pipeline.page_goals(prep.sidecar), seed=seed)
        out[seed]["session_goal_counts"] = dict(sorted(
            pipeline.session_goal_counts(prep.data.sessions, pipeline.page_goals(prep.sidecar)).items()))
    emit(args, out)


if __name__ == "__main__":
    main()
