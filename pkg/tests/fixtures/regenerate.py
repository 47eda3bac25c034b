"""Rebuild the committed fixtures and golden outputs.

Run from the repository root: ``python3 tests/fixtures/regenerate.py``. Only
needed when a file format or a default changes on purpose; the golden tests
compare against whatever this script last produced.
"""

from __future__ import annotations

import json
import shutil
import sys
from pathlib import Path

import numpy as np

from occgrounder.benchmark import open_world_plan
from occgrounder.cli import main
from occgrounder.voxelcore import IGNORE_ID, GridSpec, SemanticVoxelGrid, open_world_label_space, write_grid, write_label_space

HERE = Path(__file__).resolve().parent
SCENE = HERE / "scene"
GOLDEN = HERE / "golden"
OPENWORLD = HERE / "openworld"

SCENE_ARGS = ["--seed", "7", "--n-sweeps", "3", "--n-cameras", "2", "--n-rays", "3000", "--n-boxes", "4", "--image-width", "64", "--image-height", "48"]


def run(*argv):
    code = main([str(a) for a in argv])
    if code != 0:
        sys.exit(f"command failed ({code}): {argv}")


def infer_args(criterion, out):
    return [
        "infer",
        "--voxel-emb", SCENE / "voxel_emb.agoe",
        "--adapted-emb", SCENE / "adapted_emb.agoe",
        "--text", SCENE / "text.agoe",
        "--free", SCENE / "free.agoe",
        "--queries", SCENE / "label_space.json",
        "--spec", SCENE / "grid.json",
        "--criterion", criterion,
        "--out", out,
        "--manifest", out.with_suffix(".manifest.json"),
    ]


def openworld_fixture():
    """Random fine-label ground truth and a zero-shot-space prediction on a 6x6x2 grid."""
    OPENWORLD.mkdir(exist_ok=True)
    rng = np.random.default_rng(11)
    space = open_world_label_space()
    spec = GridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (6, 6, 2))
    gt = rng.integers(0, space.n_cls + 1, spec.n_voxels).astype(np.uint16)
    gt[rng.random(spec.n_voxels) < 0.1] = IGNORE_ID
    n_stage = len(open_world_plan("zero-shot").class_names())
    pred = rng.integers(0, n_stage + 1, spec.n_voxels).astype(np.uint16)
    write_grid(SemanticVoxelGrid(spec, gt, space.n_cls), OPENWORLD / "gt.agov")
    write_grid(SemanticVoxelGrid(spec, pred, n_stage), OPENWORLD / "pred_zero_shot.agov")
    write_label_space(space, OPENWORLD / "label_space.json")


def main_():
    if SCENE.exists():
        shutil.rmtree(SCENE)
    run("make-scene", *SCENE_ARGS, "--out-dir", SCENE, "--manifest", HERE / "make_scene.manifest.json")
    # the manifest records absolute paths; keep it out of the committed scene
    (HERE / "make_scene.manifest.json").unlink()
    cfg = json.loads((SCENE / "pseudolabel.json").read_text())
    single = dict(cfg, n_sweep=1)
    (SCENE / "pseudolabel_single.json").write_text(json.dumps(single, indent=2) + "\n")
    if GOLDEN.exists():
        shutil.rmtree(GOLDEN)
    GOLDEN.mkdir()
    run("gen-pseudolabels", SCENE / "pseudolabel.json", "--out", GOLDEN / "pseudolabels.agov", "--manifest", GOLDEN / "tmp.json")
    run("gen-pseudolabels", SCENE / "pseudolabel_single.json", "--out", GOLDEN / "pseudolabels_single.agov", "--manifest", GOLDEN / "tmp.json")
    for crit in ("min-entropy", "max-confidence", "grounding-only"):
        run(*infer_args(crit, GOLDEN / f"pred_{crit}.agov"))
        (GOLDEN / f"pred_{crit}.manifest.json").unlink()
    (GOLDEN / "tmp.json").unlink()
    toy = {"steps": 60, "lr": 1.0, "seed": 3, "paradigm": "adaptive", "n_noise": 10}
    (HERE / "toytrain.json").write_text(json.dumps(toy, indent=2) + "\n")
    run("toytrain", HERE / "toytrain.json", "--out-dir", GOLDEN / "toytrain")
    (GOLDEN / "toytrain" / "manifest.json").unlink()
    openworld_fixture()


if __name__ == "__main__":
    main_()
