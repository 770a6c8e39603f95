"""Command-line entry point.

One binary with subcommands: ``make-basis``, ``decode``, ``render``,
``train``, ``eval`` (``geo``, ``emd``, ``recall``, ``landmarks``), and
``gradcheck``.  Reports print as ``key,value`` CSV, or as JSON with
``--json``.  Commands that write artifacts also drop a manifest with
content hashes so a rerun can be checked byte for byte.

Exit codes: 0 success, 2 validation or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, io, losses, model, network, pipeline, raster, \
    shading, trainer
from .errors import FormatError, NumericError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def _emit_report(rows, args, out_path=None):
    """Print a key,value report (CSV or JSON) and optionally save it."""
    if getattr(args, "json", False):
        text = json.dumps(dict(rows), indent=2, sort_keys=True) + "\n"
    else:
        text = "".join(f"{k},{v}\n" for k, v in rows)
    sys.stdout.write(text)
    if out_path is not None:
        Path(out_path).write_text(text)


def _write_manifest(args, inputs, outputs, seed, path):
    manifest = io.RunManifest(command=list(sys.argv[1:]), seed=int(seed))
    for p in inputs:
        manifest.add_input(p)
    for p in outputs:
        manifest.add_output(p)
    manifest.write(path)


def read_params_csv(path, dims) -> model.FaceParameters:
    """Three comma-separated lines: shape, texture, expression.

    A blank line stands for all zeros in that block.
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    while len(lines) < 3:
        lines.append("")
    if len(lines) > 3 and any(ln.strip() for ln in lines[3:]):
        raise FormatError(f"{path}: expected 3 lines "
                          "(shape, texture, expression)")
    blocks = []
    for lineno, (text, d) in enumerate(zip(lines[:3], dims), start=1):
        text = text.strip()
        if not text:
            blocks.append(np.zeros(d))
            continue
        try:
            values = np.array([float(v) for v in text.split(",")])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected comma-separated "
                              "numbers")
        if len(values) != d:
            raise FormatError(f"{path}:{lineno}: expected {d} values, "
                              f"got {len(values)}")
        blocks.append(values)
    return model.FaceParameters(*blocks)


def read_landmark_file(path):
    """68 lines of ``index x y``: vertex index and target pixel."""
    indices = []
    targets = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'index x y'")
            try:
                indices.append(int(parts[0]))
                targets.append([float(parts[1]), float(parts[2])])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad number in "
                                  f"{line!r}")
    if len(indices) != 68:
        raise FormatError(f"{path}: expected 68 landmarks, got "
                          f"{len(indices)}")
    return np.array(indices, dtype=np.int64), np.array(targets)


def read_score_csv(path) -> evaluation.Histogram1D:
    values = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                values.append(float(line))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected one number "
                                  "per line")
    if not values:
        raise FormatError(f"{path}: no scores found")
    return evaluation.Histogram1D(np.sort(np.array(values)))


def _frontal_camera(width, height):
    d = trainer.pose_distance()
    return raster.Camera(eye=np.array([0.0, 0.0, d]), look_at=np.zeros(3),
                         up=np.array([0.0, 1.0, 0.0]),
                         vertical_fov=trainer.DEFAULT_FOV, near=10.0,
                         far=10.0 * d, width=width, height=height)


def cmd_make_basis(args):
    dims = tuple(int(v) for v in args.dims.split(","))
    if len(dims) != 3:
        raise ValidationError("--dims needs three comma-separated ints")
    basis = model.make_test_basis(args.seed, args.vertices, dims=dims)
    model.save_basis(basis, args.out)
    _write_manifest(args, [], [args.out], args.seed,
                    str(args.out) + ".manifest.json")
    _emit_report([("vertices", basis.num_vertices),
                  ("dims", "/".join(str(d) for d in basis.dims)),
                  ("out", args.out)], args)
    return EXIT_OK


def cmd_decode(args):
    basis = model.load_basis(args.basis)
    params = read_params_csv(args.params, basis.dims)
    mesh = model.decode_mesh(basis, params)
    io.write_mesh(mesh, args.out)
    _write_manifest(args, [args.basis, args.params], [args.out], 0,
                    str(args.out) + ".manifest.json")
    _emit_report([("vertices", len(mesh.positions)),
                  ("triangles", len(mesh.triangles)),
                  ("out", args.out)], args)
    return EXIT_OK


def cmd_render(args):
    basis = model.load_basis(args.basis)
    rng = np.random.default_rng(args.seed)
    if args.params is not None:
        params = read_params_csv(args.params, basis.dims)
    else:
        params = model.sample_parameters(rng, basis)
    mesh = model.decode_mesh(basis, params)
    camera = trainer.sample_pose(rng, args.width, args.height)
    rig = shading.sample_lighting(rng)
    image, cache = pipeline.render_mesh(mesh, camera, rig)
    io.write_image(image, args.out, linear=args.linear)
    outputs = [args.out]
    if args.dump_gbuffer:
        gb = cache.gbuffer
        ids = np.where(gb.triangle_id >= 0, gb.triangle_id % 256, 0) / 255.0
        bary = np.clip(gb.barycentrics, 0.0, 1.0)
        for suffix, channel in (("id", ids), ("bary_x", bary[..., 0]),
                                ("bary_y", bary[..., 1])):
            path = f"{args.dump_gbuffer}_{suffix}.png"
            io.write_image(np.repeat(channel[..., None], 3, axis=2), path,
                           linear=True)
            outputs.append(path)
    inputs = [args.basis] + ([args.params] if args.params else [])
    _write_manifest(args, inputs, outputs, args.seed,
                    str(args.out) + ".manifest.json")
    _emit_report([("coverage", f"{pipeline.coverage_fraction(cache):.6f}"),
                  ("out", args.out)], args)
    return EXIT_OK


def cmd_train(args):
    config = io.parse_config(args.config)
    basis = model.load_basis(args.basis)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder = network.ToyEncoder(config.seed,
                                 (config.image_size, config.image_size))
    log = []
    state = trainer.train_stage1(config, basis, encoder, log=log)
    stage1_path = out_dir / "stage1.ckpt"
    trainer.save_checkpoint(stage1_path, state, config)
    outputs = [stage1_path]
    if config.steps_stage2 > 0:
        source = trainer.make_render_source(basis, config,
                                            n_identities=32,
                                            seed=config.seed + 1)
        state = trainer.train_stage2(config, basis, encoder, source, state,
                                     log=log)
        stage2_path = out_dir / "stage2.ckpt"
        trainer.save_checkpoint(stage2_path, state, config)
        outputs.append(stage2_path)
    curve_path = out_dir / "losses.csv"
    with open(curve_path, "w", encoding="utf-8") as f:
        f.write("step,l_param,l_id,l_batch,l_loop,total\n")
        for row in log:
            f.write("%d,%.9g,%.9g,%.9g,%.9g,%.9g\n"
                    % (row["step"], row["l_param"], row["l_id"],
                       row["l_batch"], row["l_loop"], row["total"]))
    outputs.append(curve_path)
    _write_manifest(args, [args.config, args.basis], outputs, config.seed,
                    out_dir / "manifest.json")
    _emit_report([("steps", state.step),
                  ("final_total", f"{log[-1]['total']:.9g}"),
                  ("out", str(out_dir))], args)
    return EXIT_OK


def cmd_eval_geo(args):
    pred = io.read_mesh(args.pred)
    scan = io.read_mesh(args.scan)
    transform, icp_rms = evaluation.icp_similarity(pred, scan)
    aligned = model.Mesh(positions=transform.apply(pred.positions),
                         colors=pred.colors, triangles=pred.triangles)
    center = np.mean(scan.positions, axis=0)
    aligned = evaluation.crop_scan(aligned, center, args.radius)
    cropped_scan = evaluation.crop_scan(scan, center, args.radius)
    p2p = evaluation.symmetric_point_to_plane(aligned, cropped_scan)
    _emit_report([("p2p_mm", f"{p2p:.9g}"),
                  ("icp_rms_mm", f"{icp_rms:.9g}"),
                  ("scale", f"{transform.scale:.9g}")], args, args.out)
    return EXIT_OK


def cmd_eval_emd(args):
    h_a = read_score_csv(args.a)
    h_b = read_score_csv(args.b)
    distance = evaluation.emd_1d(h_a, h_b)
    _emit_report([("emd", f"{distance:.9g}"),
                  ("mean_a", f"{np.mean(h_a.values):.9g}"),
                  ("mean_b", f"{np.mean(h_b.values):.9g}")], args, args.out)
    return EXIT_OK


def _embeddings_with_identity(path):
    """Load an embedding file, labeling identities by the key prefix.

    Keys look like ``identity/instance``; everything before the first
    slash names the identity.
    """
    records = network.read_embedding_file(path)
    return {key: (key.split("/", 1)[0], pair.identity)
            for key, pair in records.items()}


def cmd_eval_recall(args):
    k_list = [int(v) for v in args.k.split(",")]
    renders = _embeddings_with_identity(args.renders)
    photos = _embeddings_with_identity(args.photos)
    recall = evaluation.clustering_recall(renders, photos, k_list)
    _emit_report([(f"recall@{k}", f"{recall[k]:.9g}") for k in k_list],
                 args, args.out)
    return EXIT_OK


def cmd_eval_landmarks(args):
    basis = model.load_basis(args.basis)
    indices, targets = read_landmark_file(args.landmarks)
    if args.params is not None:
        params = read_params_csv(args.params, basis.dims)
    else:
        dims = basis.dims
        params = model.FaceParameters(np.zeros(dims[0]), np.zeros(dims[1]),
                                      np.zeros(dims[2]))
    camera = _frontal_camera(args.width, args.height)
    fit = evaluation.fit_pose_expression(basis, params, indices, targets,
                                         camera)
    angle = np.arccos(np.clip((np.trace(fit.rotation) - 1) / 2, -1, 1))
    _emit_report([("residual_px", f"{fit.residual:.9g}"),
                  ("steps", fit.steps),
                  ("rotation_angle_rad", f"{angle:.9g}"),
                  ("expression_norm",
                   f"{np.linalg.norm(fit.expression):.9g}")],
                 args, args.out)
    return EXIT_OK


def _gradcheck_cases(seed):
    """Yield (name, analytic, numeric, scale) finite-difference probes."""
    rng = np.random.default_rng(seed)
    basis = model.make_test_basis(seed, 120, dims=(4, 3, 2))
    params = model.sample_parameters(rng, basis)
    h = 1e-6

    # Decoder chain: scalar functional of the decoded positions/colors.
    w_pos = rng.standard_normal((basis.num_vertices, 3))
    w_col = rng.standard_normal((basis.num_vertices, 3))

    def decode_scalar(p):
        mesh = model.decode_mesh(basis, p)
        return float(np.sum(mesh.positions * w_pos)
                     + np.sum(mesh.colors * w_col))

    grad = model.decode_mesh_vjp(basis, w_pos, w_col)
    for block in ("shape", "texture", "expression"):
        vec = getattr(params, block)
        for idx in range(len(vec)):
            def numeric(i=idx, b=block):
                pp, pm = params.copy(), params.copy()
                getattr(pp, b)[i] += h
                getattr(pm, b)[i] -= h
                return (decode_scalar(pp) - decode_scalar(pm)) / (2 * h)
            yield (f"decode.{block}[{idx}]", getattr(grad, block)[idx],
                   numeric, 1e-4)

    # Losses.
    b = 4
    dims = basis.dims
    pred = [model.sample_parameters(rng, basis) for _ in range(b)]
    truth = [model.sample_parameters(rng, basis) for _ in range(b)]
    l_val, l_grads = losses.parameter_loss(pred, truth)
    _, d_batch = losses.batch_distribution_loss(pred)
    g1 = rng.standard_normal(8)
    g2 = rng.standard_normal(8)
    _, d_g1, d_g2 = losses.identity_loss(g1, g2)

    def param_fd(sample, block, idx):
        def numeric():
            perturbed = [p.copy() for p in pred]
            getattr(perturbed[sample], block)[idx] += h
            up, _ = losses.parameter_loss(perturbed, truth)
            getattr(perturbed[sample], block)[idx] -= 2 * h
            dn, _ = losses.parameter_loss(perturbed, truth)
            return (up - dn) / (2 * h)
        return numeric

    for s in range(b):
        for block in ("shape", "texture", "expression"):
            idx = int(rng.integers(dims[{"shape": 0, "texture": 1,
                                         "expression": 2}[block]]))
            yield (f"loss.param[{s}].{block}[{idx}]",
                   getattr(l_grads[s], block)[idx],
                   param_fd(s, block, idx), 1e-5)

    for _ in range(20):
        i = int(rng.integers(b))
        block = ("shape", "texture")[rng.integers(2)]
        j = int(rng.integers(dims[0] if block == "shape" else dims[1]))

        def numeric(i=i, block=block, j=j):
            perturbed = [p.copy() for p in pred]
            getattr(perturbed[i], block)[j] += h
            up, _ = losses.batch_distribution_loss(perturbed)
            getattr(perturbed[i], block)[j] -= 2 * h
            dn, _ = losses.batch_distribution_loss(perturbed)
            return (up - dn) / (2 * h)
        yield (f"loss.batch[{i}].{block}[{j}]",
               getattr(d_batch[i], block)[j], numeric, 1e-5)

    for idx in range(len(g1)):
        def numeric(i=idx):
            gp, gm = g1.copy(), g1.copy()
            gp[i] += h
            gm[i] -= h
            return (losses.identity_loss(gp, g2)[0]
                    - losses.identity_loss(gm, g2)[0]) / (2 * h)
        yield (f"loss.id.g1[{idx}]", d_g1[idx], numeric, 1e-5)

    # Shading: dim lights keep the output clamp and the diffuse clamp
    # inactive so the reverse pass is smooth at the probe points.
    size = 5
    camera = _frontal_camera(size, size)
    pos_buf = rng.uniform(-60, 60, size=(size, size, 3))
    nrm_buf = rng.standard_normal((size, size, 3))
    nrm_buf /= np.linalg.norm(nrm_buf, axis=-1, keepdims=True)
    dif_buf = rng.uniform(0.1, 0.7, size=(size, size, 3))
    mask = np.ones((size, size), dtype=bool)
    dim = [shading.PointLight(position=light.position,
                              rgb_intensity=0.2 * light.rgb_intensity)
           for light in shading.sample_lighting(rng).lights]
    rig = shading.LightingRig(lights=tuple(dim))
    d_image = rng.standard_normal((size, size, 3))

    def shade_scalar(p_buf, n_buf, d_buf):
        image = shading.phong_shade(p_buf, n_buf, d_buf, mask, rig, camera)
        return float(np.sum(image * d_image))

    d_pos, d_nrm, d_dif = shading.phong_shade_vjp(pos_buf, nrm_buf, dif_buf,
                                                  mask, rig, camera, d_image)
    for _ in range(60):
        which = rng.integers(2)
        buf, grad = ((pos_buf, d_pos), (dif_buf, d_dif))[which]
        idx = int(rng.integers(buf.size))

        def numeric(buf=buf, idx=idx, which=which):
            bp, bm = buf.copy(), buf.copy()
            bp.ravel()[idx] += h
            bm.ravel()[idx] -= h
            if which == 0:
                return (shade_scalar(bp, nrm_buf, dif_buf)
                        - shade_scalar(bm, nrm_buf, dif_buf)) / (2 * h)
            return (shade_scalar(pos_buf, nrm_buf, bp)
                    - shade_scalar(pos_buf, nrm_buf, bm)) / (2 * h)
        name = ("shade.position", "shade.diffuse")[which]
        yield (f"{name}[{idx}]", grad.ravel()[idx], numeric, 1e-3)


def cmd_gradcheck(args):
    worst = 0.0
    n_cases = 0
    n_failed = 0
    for name, analytic, numeric, tol in _gradcheck_cases(args.seed):
        fd = numeric()
        rel = abs(analytic - fd) / max(1.0, abs(fd))
        worst = max(worst, rel)
        n_cases += 1
        if rel > tol:
            n_failed += 1
            sys.stderr.write(f"FAIL {name}: analytic {analytic:.9g} "
                             f"fd {fd:.9g} rel {rel:.3g}\n")
    _emit_report([("cases", n_cases), ("failed", n_failed),
                  ("worst_rel_err", f"{worst:.3g}")], args, args.out)
    return EXIT_OK if n_failed == 0 else EXIT_NUMERIC


def build_parser():
    parser = argparse.ArgumentParser(prog="morphrec")
    parser.add_argument("--json", action="store_true",
                        help="emit reports as JSON instead of CSV")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-basis", help="generate a synthetic basis file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vertices", type=int, default=1000)
    p.add_argument("--dims", default="199,199,100")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_basis)

    p = sub.add_parser("decode", help="decode parameters to a mesh file")
    p.add_argument("--basis", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("render", help="render a face under random "
                                      "pose and lighting")
    p.add_argument("--basis", required=True)
    p.add_argument("--params")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--linear", action="store_true")
    p.add_argument("--dump-gbuffer", dest="dump_gbuffer",
                   help="prefix for triangle-id and barycentric PNGs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="run both training stages")
    p.add_argument("--config", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluation protocols")
    ev_sub = ev.add_subparsers(dest="protocol", required=True)

    p = ev_sub.add_parser("geo", help="ICP-aligned point-to-plane error")
    p.add_argument("--pred", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--radius", type=float, default=95.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_geo)

    p = ev_sub.add_parser("emd", help="1-D earth mover's distance "
                                      "between score files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_emd)

    p = ev_sub.add_parser("recall", help="identity recall of renders "
                                         "against photos")
    p.add_argument("--renders", required=True)
    p.add_argument("--photos", required=True)
    p.add_argument("--k", default="1,5")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_recall)

    p = ev_sub.add_parser("landmarks", help="fit pose and expression "
                                            "to 2-D landmarks")
    p.add_argument("--basis", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--params")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_landmarks)

    p = sub.add_parser("gradcheck", help="finite-difference gradient gate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, ValidationError, FormatError, FileNotFoundError) \
            as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION
    except NumericError as exc:
        sys.stderr.write(f"numeric error: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
