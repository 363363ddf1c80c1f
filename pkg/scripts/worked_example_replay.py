"""Replay the worked two-step example from the bundled fixture and print the trace.

    python3 scripts/worked_example_replay.py [--show-prompt]
"""

from __future__ import annotations

import argparse
from pathlib import Path

from coh import pipeline
from coh.history import first_order_histories
from coh.llm import BackendConfig, Gateway
from coh.pipeline import CoHConfig
from coh.scoring import FusionConfig

FIXTURE = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "nigeria"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default=str(FIXTURE))
    ap.add_argument("--show-prompt", action="store_true")
    args = ap.parse_args()

    data = pipeline.load_workspace(args.data)
    cfg = CoHConfig(backend=BackendConfig.scripted(Path(args.data) / "replay.jsonl"),
                    fusion=FusionConfig(alpha=0.3, w=0.0), max_in_flight=1)
    query = data.queries[0]
    verbalizer = data.verbalizer(cfg)
    if args.show_prompt:
        refs = first_order_histories(data.kg, query, cfg.first_order_limit)
        print(verbalizer.select_prompt(refs, query, cfg.n).text)
        print("-" * 72)

    gw = Gateway.from_config(cfg.backend, max_in_flight=1)
    record = next(pipeline.run_coh(data.kg, data.vocab, [query], cfg, gw, verbalizer))
    print("query:", verbalizer.fact_fields(query.fact))
    print("step-1 selection:", ", ".join(map(str, record.steps[0].selected)))
    print(f"{len(record.final_chains)} chains after extension")
    for e in record.answers.entries:
        mark = "  <- ground truth" if e.entity == query.ground_truth else ""
        print(f"{e.position}. {e.surface}{mark}")
    print("fused rank of the ground truth:", record.rank)


if __name__ == "__main__":
    main()
