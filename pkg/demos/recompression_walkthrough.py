"""Build a small corpus, show the instability decay, and train a detector.

    python demos/recompression_walkthrough.py [WORKDIR]

Takes a couple of minutes on one core.
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from mbmdetect.codec import EncodeConfig, build_ladder
from mbmdetect.feature import compute_feature_vector
from mbmdetect.harness import GridConfig, extract_corpus_features, render_report, run_experiment, synthesize_corpus


def main(workdir):
    workdir = Path(workdir)
    manifest = synthesize_corpus(workdir / "corpus", {"original": 6, "double": 6}, seed=1, frames=36)
    print(f"synthesized {len(manifest.entries)} clips under {workdir / 'corpus'}")

    # one clip, three re-encodes: unstable macroblock counts shrink each step
    clip = manifest.entries[0].path
    ladder = build_ladder(clip, 3, EncodeConfig(), workdir / "ladder")
    print(clip.name, "v =", [round(v, 1) for v in compute_feature_vector(ladder, 3).values])

    table = extract_corpus_features(manifest, 2, cache_dir=workdir / "cache")
    for label in (0, 1):
        vals = np.array([v.values for e, v in table.rows if e.label == label])
        print(f"class {label}: mean features {vals.mean(axis=0).round(1).tolist()}")

    report, _ = run_experiment(table, 2, grid=GridConfig(folds=3))
    print(render_report(report, workdir / "report"))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="mbm-demo-"))
