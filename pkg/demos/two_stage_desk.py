"""One seed of the low-resource scenario on the synthetic corpora.

Stage 1 fine-tunes the whole desk model on domain A.  Stage 2 adapts it to the
small domain-B set with MAM modules, and is compared with a frozen random
backbone and with direct full fine-tuning on B.  Takes a few minutes on one core.

    python demos/two_stage_desk.py [seed] [out_dir]
"""

import json
import logging
import sys

from petlsv.scenario import ScenarioConfig, run_scenario

if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    out = sys.argv[2] if len(sys.argv) > 2 else "scenario_out"
    res = run_scenario(ScenarioConfig(seeds=(seed,)), out)
    s = res.seeds[0]
    print(f"stage 1 EER on A {s.eer_a_stage1:.3f}, on B {s.eer_b_stage1:.3f}")
    for arm, eer in s.eer_b.items():
        print(f"{arm:<8} EER on B {eer:.3f}")
    print(f"MAM trainable ratio {s.mam_ratio:.4f}")
    print(json.dumps(res.checks()))
