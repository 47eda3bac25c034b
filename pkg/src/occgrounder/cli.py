"""Command-line entry point: ``occgrounder <command> ...``.

Every command writes its outputs plus a JSON run manifest. Exit codes: 0 on
success, 2 for usage/configuration problems and missing inputs, 3 for malformed
data files, 4 for numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import Stage, StagePlan, iou_report, open_world_plan, stage_eval
from .errors import ConfigError, ContractError, DivergenceError, FeasibilityError, FormatError, ShapeError
from .formats import read_embedding, read_mask, read_sections, write_embedding, write_mask, write_sections
from .geometry import read_rig, read_sweep, write_rig, write_sweep
from .grounding import MODES, SUBCLASS_MAX, LossWeights, prompt_tokens, token_groups
from .openworld import Criterion, class_entropy_report, entropy_report_csv, infer_occupancy, query_scores, softmax_probs
from .pseudolabel import PipelineConfig, generate_pseudolabels, project_embeddings, select_sweeps
from .voxelcore import IGNORE_ID, GridSpec, LabelSpace, read_grid, read_label_space, write_grid, write_label_space

log = logging.getLogger("occgrounder")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_DIVERGENCE = 0, 2, 3, 4
THREADS_ENV = "OCCGROUNDER_THREADS"


class _Manifest:
    """Collects digests of everything a command reads and writes."""

    def __init__(self, command: str, config: dict, seed=None):
        self.command = command
        self.config = config
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.extra: dict = {}
        self.t0 = time.perf_counter()

    def read(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"input file not found: {p}")
        self.inputs[str(path)] = sha256_file(p)
        return p

    def wrote(self, path) -> None:
        self.outputs[str(path)] = sha256_file(path)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "tool_version": __version__,
            "config_sha256": hashlib.sha256(canonical_json(self.config)).hexdigest(),
            "config": self.config,
            "seed": self.seed,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            **self.extra,
            "wall_time": round(time.perf_counter() - self.t0, 6),
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _load_json(path, manifest: _Manifest | None = None) -> dict:
    p = manifest.read(path) if manifest else Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc.msg} (line {exc.lineno})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: expected a JSON object")
    return data


def _require(cfg: dict, key: str, kind, where: str):
    if key not in cfg:
        raise ConfigError(f"{where}: missing required field {key!r}")
    val = cfg[key]
    if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
        raise ConfigError(f"{where}: field {key!r} has the wrong type")
    return val


def _check_keys(cfg: dict, allowed: set[str], where: str) -> None:
    extra = sorted(set(cfg) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {extra}")


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get(THREADS_ENV, "1")
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _manifest_path(args, primary) -> Path:
    return Path(args.manifest) if args.manifest else Path(str(primary) + ".manifest.json")


# ---------------------------------------------------------------- gen-pseudolabels

PSEUDO_KEYS = {"grid", "label_space", "sweeps", "rig", "rigs", "masks", "n_sweep", "n_interval", "key_index"}


def cmd_gen_pseudolabels(args) -> int:
    cfg_path = Path(args.config)
    m = _Manifest("gen-pseudolabels", {})
    cfg = _load_json(cfg_path, m)
    m.config = cfg
    where = str(cfg_path)
    _check_keys(cfg, PSEUDO_KEYS, where)
    base = cfg_path.parent
    spec = GridSpec.from_dict(cfg["grid"]) if "grid" in cfg else GridSpec.occ3d()
    space = read_label_space(m.read(base / _require(cfg, "label_space", str, where)))
    sweeps = [read_sweep(m.read(base / p)) for p in _require(cfg, "sweeps", list, where)]
    if "rigs" in cfg:
        rigs = [read_rig(m.read(base / p)) for p in cfg["rigs"]]
    else:
        rigs = read_rig(m.read(base / _require(cfg, "rig", str, where)))
    mask_paths = _require(cfg, "masks", list, where)
    config = PipelineConfig(spec, space, int(cfg.get("n_sweep", 30)), int(cfg.get("n_interval", 2)), int(cfg.get("key_index", 0)))
    chosen = select_sweeps(len(sweeps), config.key_index, config.n_sweep, config.n_interval)
    masks = {}
    for i in chosen:
        if i >= len(mask_paths):
            raise ConfigError(f"{where}: no masks listed for sweep {i}")
        masks[i] = [read_mask(m.read(base / p)) for p in mask_paths[i]]
    grid = generate_pseudolabels(config, sweeps, rigs, masks, threads=_threads(args))
    write_grid(grid, args.out)
    m.wrote(args.out)
    m.extra["selected_sweeps"] = chosen
    m.write(_manifest_path(args, args.out))
    return EXIT_OK


# ---------------------------------------------------------------- infer / report-entropy


def _load_queries(args, m: _Manifest) -> LabelSpace:
    return read_label_space(m.read(args.queries))


def _infer_inputs(args, m: _Manifest, need_adapted: bool):
    space = _load_queries(args, m)
    spec = GridSpec.from_dict(_load_json(args.spec, m))
    voxel = read_embedding(m.read(args.voxel_emb))
    text = read_embedding(m.read(args.text))
    free = read_embedding(m.read(args.free)).reshape(-1)
    adapted = None
    if need_adapted:
        if not args.adapted_emb:
            raise ConfigError(f"criterion {args.criterion} needs --adapted-emb")
        adapted = read_embedding(m.read(args.adapted_emb))
    groups = token_groups(space)
    if text.shape[0] != groups.n_text:
        raise ConfigError(f"{args.text}: {text.shape[0]} text rows, the query prompts have {groups.n_text} tokens")
    if voxel.shape[0] != spec.n_voxels:
        raise ConfigError(f"{args.voxel_emb}: {voxel.shape[0]} rows for a grid of {spec.n_voxels} voxels")
    if adapted is not None and adapted.shape != voxel.shape:
        raise ConfigError(f"{args.adapted_emb}: shape {adapted.shape} differs from voxel embeddings {voxel.shape}")
    return space, spec, voxel, adapted, text, free, groups


def _infer_config(args) -> dict:
    return {"criterion": args.criterion, "mode": args.mode}


def cmd_infer(args) -> int:
    m = _Manifest("infer", _infer_config(args))
    criterion = Criterion(args.criterion)
    space, spec, voxel, adapted, text, free, groups = _infer_inputs(args, m, criterion is not Criterion.GROUNDING_ONLY)
    res = infer_occupancy(voxel, adapted, text, free, groups, criterion, args.mode)
    write_grid(res.grid(spec), args.out)
    m.wrote(args.out)
    indicator = Path(args.indicator) if args.indicator else Path(args.out).with_suffix(".c.agoe")
    write_embedding(res.indicator.astype(np.float32).reshape(-1, 1), indicator)
    m.wrote(indicator)
    m.extra["label_space_sha256"] = hashlib.sha256(canonical_json(space.to_dict())).hexdigest()
    m.write(_manifest_path(args, args.out))
    return EXIT_OK


def cmd_report_entropy(args) -> int:
    m = _Manifest("report-entropy", _infer_config(args))
    criterion = Criterion(args.criterion)
    space, spec, voxel, adapted, text, free, groups = _infer_inputs(args, m, True)
    res = infer_occupancy(voxel, adapted, text, free, groups, criterion, args.mode)
    q = res.p_adapted if res.p_adapted is not None else softmax_probs(query_scores(adapted, text, free, groups, args.mode))
    rows = class_entropy_report(res.p, q, res.labels, list(space.classes) + ["free"])
    Path(args.out).write_text(entropy_report_csv(rows), encoding="utf-8")
    m.wrote(args.out)
    m.write(_manifest_path(args, args.out))
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    m = _Manifest("eval", {"stage": args.stage, "format": args.format})
    pred = read_grid(m.read(args.pred))
    gt = read_grid(m.read(args.gt))
    if pred.spec != gt.spec:
        raise ConfigError(f"{args.pred} and {args.gt} have different grid specs")
    mask = None
    if args.mask:
        mg = read_grid(m.read(args.mask))
        mask = (mg.labels != 0) & (mg.labels != IGNORE_ID)
    gt_space = read_label_space(m.read(args.gt_space)) if args.gt_space else None
    if args.stage:
        if gt_space is None:
            raise ConfigError("--stage needs --gt-space")
        if args.plan:
            plan = StagePlan.from_dict(_load_json(args.plan, m))
            if plan.stage is not Stage(args.stage):
                raise ConfigError(f"{args.plan} describes stage {plan.stage.value}, not {args.stage}")
        else:
            plan = open_world_plan(args.stage)
        report = stage_eval(plan, pred, gt, gt_space, mask)
    else:
        names = list(gt_space.classes) + ["free"] if gt_space else None
        if gt_space is not None and gt_space.n_cls != gt.n_cls:
            raise ConfigError(f"{args.gt_space} has {gt_space.n_cls} classes, {args.gt} has {gt.n_cls}")
        report = iou_report(pred, gt, mask, class_names=names)
    text = report.to_json() if args.format == "json" else report.to_table()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        m.wrote(args.out)
        m.write(_manifest_path(args, args.out))
    else:
        sys.stdout.write(text)
        if args.manifest:
            m.write(args.manifest)
    return EXIT_OK


# ---------------------------------------------------------------- toytrain

TOY_KEYS = {"steps", "lr", "seed", "paradigm", "n_noise", "hidden", "weights", "halve_on_increase", "resample_noise", "problem_seed", "dim"}


def cmd_toytrain(args) -> int:
    from .toytrain import ToyModel, TrainConfig, make_toy_problem, trace_csv, train

    m = _Manifest("toytrain", {})
    cfg = _load_json(args.config, m)
    m.config = cfg
    _check_keys(cfg, TOY_KEYS, args.config)
    weights = cfg.get("weights") or {}
    if not isinstance(weights, dict) or set(weights) - {"ce", "lovasz", "occ", "align"}:
        raise ConfigError(f"{args.config}: 'weights' must map ce/lovasz/occ/align to numbers")
    try:
        tc = TrainConfig(
            steps=int(cfg.get("steps", 500)),
            lr=float(cfg.get("lr", 1.0)),
            seed=int(cfg.get("seed", 0)),
            paradigm=cfg.get("paradigm", "adaptive"),
            n_noise=int(cfg.get("n_noise", 10)),
            hidden=cfg.get("hidden"),
            weights=LossWeights(**{k: float(v) for k, v in weights.items()}),
            halve_on_increase=bool(cfg.get("halve_on_increase", False)),
            resample_noise=bool(cfg.get("resample_noise", True)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{args.config}: {exc}") from exc
    m.seed = tc.seed
    problem = make_toy_problem(int(cfg.get("problem_seed", tc.seed)), dim=int(cfg.get("dim", 16)))
    model = ToyModel.init(problem, tc.seed, tc.hidden)
    trained, trace = train(model, problem, tc)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.csv").write_text(trace_csv(trace), encoding="utf-8")
    m.wrote(out / "trace.csv")
    write_sections({"voxel_table": trained.table, **{k: np.atleast_2d(v) for k, v in trained.adapter.arrays().items()}}, out / "weights.agow")
    m.wrote(out / "weights.agow")
    m.extra["final"] = {k: trace[-1][k] for k in ("L_ce", "L_lovasz", "L_occ", "L_align", "train_mIoU")}
    m.write(Path(args.manifest) if args.manifest else out / "manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------- make-scene


def cmd_make_scene(args) -> int:
    from .toytrain import make_synthetic_scene, phrase_embedding

    conf = {
        "seed": args.seed,
        "n_sweeps": args.n_sweeps,
        "n_boxes": args.n_boxes,
        "n_cameras": args.n_cameras,
        "n_rays": args.n_rays,
        "image_size": [args.image_height, args.image_width],
    }
    m = _Manifest("make-scene", conf, seed=args.seed)
    scene = make_synthetic_scene(
        args.seed,
        n_boxes=args.n_boxes,
        n_cameras=args.n_cameras,
        n_rays=args.n_rays,
        n_sweeps=args.n_sweeps,
        image_size=(args.image_height, args.image_width),
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, writer, obj):
        writer(obj, out / name)
        written.append(name)

    emit("gt.agov", write_grid, scene.gt)
    emit("label_space.json", write_label_space, scene.label_space)
    emit("rig.json", write_rig, scene.rig)
    (out / "grid.json").write_text(json.dumps(scene.spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    written.append("grid.json")
    sweep_names, mask_names = [], []
    for i, sweep in enumerate(scene.sweeps):
        emit(f"sweep_{i:03d}.agop", write_sweep, sweep)
        sweep_names.append(f"sweep_{i:03d}.agop")
        row = []
        for j, mask in enumerate(scene.masks[i]):
            emit(f"mask_{i:03d}_{j}.pgm", write_mask, mask)
            emit(f"image_emb_{i:03d}_{j}.agoe", write_embedding, scene.image_embeddings[i][j])
            row.append(f"mask_{i:03d}_{j}.pgm")
        mask_names.append(row)
    pseudo_cfg = {
        "grid": scene.spec.to_dict(),
        "label_space": "label_space.json",
        "sweeps": sweep_names,
        "rig": "rig.json",
        "masks": mask_names,
        "n_sweep": len(scene.sweeps),
        "n_interval": 1,
        "key_index": 0,
    }
    (out / "pseudolabel.json").write_text(json.dumps(pseudo_cfg, indent=2) + "\n", encoding="utf-8")
    written.append("pseudolabel.json")

    # inference inputs: grounding-side voxel embeddings sit near the text prototypes,
    # the adapted stream is the image embedding projected through the LiDAR points
    space = scene.label_space
    dim = scene.text_prototypes.shape[1]
    text = np.stack([phrase_embedding(t, dim) for t in prompt_tokens(space)])
    free = phrase_embedding("free", dim)
    groups = token_groups(space)
    class_mean = np.stack([text[np.concatenate(groups.classes[k])].mean(axis=0) for k in range(space.n_cls)])
    rng = np.random.default_rng(args.seed + 1)
    lab = scene.gt.labels.astype(np.int64)
    protos = np.vstack([class_mean, free[None]])
    voxel = np.zeros((scene.spec.n_voxels, dim))
    known = lab != IGNORE_ID
    voxel[known] = protos[lab[known]]
    voxel = 5.0 * (voxel + 0.15 * rng.standard_normal(voxel.shape))
    adapted, _ = project_embeddings(scene.image_embeddings, scene.sweeps, scene.rig, scene.spec)
    adapted *= 5.0
    emit("text.agoe", write_embedding, text.astype(np.float32))
    emit("free.agoe", write_embedding, free.astype(np.float32)[None])
    emit("voxel_emb.agoe", write_embedding, voxel.astype(np.float32))
    emit("adapted_emb.agoe", write_embedding, adapted.astype(np.float32))
    for name in written:
        m.wrote(out / name)
    m.write(Path(args.manifest) if args.manifest else out / "manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occgrounder", description="Open-world 3D semantic occupancy tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")
        sp.add_argument("--manifest", help="where to write the run manifest")

    g = sub.add_parser("gen-pseudolabels", help="pseudo-label grid from sweeps and 2-D masks")
    g.add_argument("config", help="JSON pipeline config; paths inside are relative to it")
    g.add_argument("--out", required=True, help="output AGOV grid")
    common(g)
    g.set_defaults(func=cmd_gen_pseudolabels)

    for name, func, help_ in (
        ("infer", cmd_infer, "open-world occupancy prediction"),
        ("report-entropy", cmd_report_entropy, "per-class mean entropy of both streams as CSV"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--voxel-emb", required=True, help="AGOE voxel embeddings (grounding stream)")
        s.add_argument("--adapted-emb", help="AGOE adapted embeddings (alignment stream)")
        s.add_argument("--text", required=True, help="AGOE text token embeddings of the query prompts")
        s.add_argument("--free", required=True, help="AGOE free embedding (one row)")
        s.add_argument("--queries", required=True, help="label space JSON of the queries")
        s.add_argument("--spec", required=True, help="grid spec JSON")
        s.add_argument("--criterion", choices=[c.value for c in Criterion], default=Criterion.MIN_ENTROPY.value)
        s.add_argument("--mode", choices=MODES, default=SUBCLASS_MAX, help="class scoring from token scores")
        s.add_argument("--out", required=True)
        if name == "infer":
            s.add_argument("--indicator", help="c-indicator AGOE sidecar (default: <out>.c.agoe)")
        common(s)
        s.set_defaults(func=func)

    e = sub.add_parser("eval", help="IoU / mIoU report")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--gt-space", help="label space JSON of the ground truth")
    e.add_argument("--stage", choices=[s.value for s in Stage], help="score as an open-world stage")
    e.add_argument("--plan", help="stage plan JSON (default: the built-in open-world plan)")
    e.add_argument("--mask", help="AGOV grid; voxels labelled 0 or IGNORE are left out")
    e.add_argument("--format", choices=("json", "table"), default="json")
    e.add_argument("--out")
    common(e)
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("toytrain", help="train the toy model")
    t.add_argument("config", help="JSON training config")
    t.add_argument("--out-dir", required=True)
    common(t)
    t.set_defaults(func=cmd_toytrain)

    s = sub.add_parser("make-scene", help="write a synthetic scene")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n-sweeps", type=int, default=1)
    s.add_argument("--n-boxes", type=int)
    s.add_argument("--n-cameras", type=int)
    s.add_argument("--n-rays", type=int)
    s.add_argument("--image-width", type=int, default=128)
    s.add_argument("--image-height", type=int, default=96)
    common(s)
    s.set_defaults(func=cmd_make_scene)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"occgrounder: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except DivergenceError as exc:
        print(f"occgrounder: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except FileNotFoundError as exc:
        print(f"occgrounder: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ShapeError, ContractError, FeasibilityError) as exc:
        print(f"occgrounder: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
