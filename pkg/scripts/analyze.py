"""Revisit-duration profiles and single-goal session rates on a synthetic world."""

from goweb import dataio, pipeline

from _common import configs, emit, parser


def main():
    args = parser(__doc__).parse_args()
    out = {}
    for seed, cfg in configs(args):
        taxonomy = pipeline.make_run_taxonomy(cfg)
        events, sidecar, _ = dataio.synth_generate(cfg.synth, taxonomy)
        sessions = [s for s in dataio.segment_sessions(events) if s.start < cfg.synth.split.t2]
        report = pipeline.analyze(sessions, pipeline.category_labels(sidecar, taxonomy))
        planted = pipeline.affinity_order(sidecar, taxonomy)
        share = report["revisit_durations"]["scale_share"]
        report["planted_affinity_order"] = planted
        report["recovered_hours_order"] = sorted(planted, key=lambda c: -share[c]["hours"])
        out[seed] = report
    emit(args, out)


if __name__ == "__main__":
    main()
