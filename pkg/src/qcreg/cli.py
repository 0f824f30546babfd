"""Command-line front end: flatten, deform and register subcommands.

Every run writes ``run_manifest.json`` with the fully resolved config, the
sha256 of each input file and the tool version, so reruns are auditable and
the CSV outputs are reproducible byte for byte. PNG files are diagnostic
renders only; CSV and PGM files are the machine-readable surface.

Exit codes: 0 ok, 2 input error, 3 unsupported input, 4 numeric failure.
The environment variable QCREG_THREADS caps worker parallelism (the current
implementation computes sequentially, which satisfies any cap).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, conformal, intensity, mesh, pipeline
from .distortion import DistortionBounds
from .errors import (
    NonConvergence,
    NotDiskTopology,
    QcregError,
    SingularSystem,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_UNSUPPORTED = 3
EXIT_NUMERIC = 4

CONFIG_KEYS = (
    "alpha", "beta", "k1", "k2", "n", "n1", "m1", "m2",
    "tau_demons", "sigma_gauss", "grid_res", "early_stop_rel",
    "prealign", "demons_sign",
)

DEFAULTS = {
    "alpha": 0.01,
    "beta": 0.1,
    "k1": 2.0,
    "k2": 0.5,
    "n": 50,
    "n1": 1,
    "m1": 1,
    "m2": 5,
    "tau_demons": 1.0,
    "sigma_gauss": 2.0,
    "grid_res": 512,
    "early_stop_rel": 1e-6,
    "prealign": True,
    "demons_sign": 1.0,
}


def _load_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _resolve_config(args):
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        loaded = _load_toml(args.config)
        unknown = set(loaded) - set(CONFIG_KEYS)
        if unknown:
            raise QcregError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in CONFIG_KEYS:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            cfg[key] = val
    return cfg


def _to_registration_config(cfg):
    res = cfg["grid_res"]
    grid = (int(res), int(res)) if np.isscalar(res) else (int(res[0]), int(res[1]))
    return pipeline.RegistrationConfig(
        alpha=float(cfg["alpha"]),
        beta=float(cfg["beta"]),
        bounds=DistortionBounds(float(cfg["k1"]), float(cfg["k2"])),
        n_outer=int(cfg["n"]),
        n_proj=int(cfg["n1"]),
        m_outer=int(cfg["m1"]),
        m_smooth=int(cfg["m2"]),
        tau_demons=float(cfg["tau_demons"]),
        sigma_gauss=float(cfg["sigma_gauss"]),
        grid_res=grid,
        early_stop_rel=float(cfg["early_stop_rel"]),
        prealign=bool(cfg["prealign"]),
        demons_sign=float(cfg["demons_sign"]),
    )


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(outdir, subcommand, inputs, cfg):
    manifest = {
        "tool": "qcreg",
        "version": __version__,
        "subcommand": subcommand,
        "inputs": {name: {"path": p, "sha256": _sha256(p)} for name, p in inputs.items()},
        "config": {k: cfg[k] for k in sorted(cfg)},
    }
    with open(os.path.join(outdir, "run_manifest.json"), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(path, what):
    if not path or not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def _plot_wireframe(path, meshes, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    for uv, faces, color in meshes:
        ax.triplot(uv[:, 0], uv[:, 1], faces, linewidth=0.3, color=color)
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_raster(path, array, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(array, origin="lower", cmap="magma")
    ax.set_title(title)
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_flatten(args):
    _require(args.mesh, "mesh")
    os.makedirs(args.out, exist_ok=True)
    m = mesh.load_mesh(args.mesh)
    result = conformal.flatten_lscm(m, args.pin_a, args.pin_b)
    param = conformal.normalize_domain(result.param)
    stem = os.path.splitext(os.path.basename(args.mesh))[0]
    out_mesh = os.path.join(args.out, f"{stem}_flat.obj")
    mesh.save_mesh(param.base, out_mesh, uv=param.uv)
    with open(os.path.join(args.out, "conformality.csv"), "w", encoding="ascii") as fh:
        fh.write("face,abs_mu\n")
        for i, c in enumerate(result.conformality):
            fh.write(f"{i},{c:.17g}\n")
    _write_manifest(args.out, "flatten", {"mesh": args.mesh}, {
        "pin_a": result.pinned[0][0], "pin_b": result.pinned[1][0],
    })
    print(f"flattened {args.mesh} -> {out_mesh} (max |mu| {result.conformality.max():.3g})")
    return EXIT_OK


def _load_landmarks_arg(args, moving, target):
    _require(args.landmarks, "landmarks file")
    return mesh.load_landmarks(args.landmarks, moving, target)


def cmd_deform(args):
    _require(args.mesh, "mesh")
    os.makedirs(args.out, exist_ok=True)
    cfg_dict = _resolve_config(args)
    cfg = _to_registration_config(cfg_dict)
    moving = mesh.load_param_mesh(args.mesh)
    moving = conformal.normalize_domain(moving) if args.normalize else moving
    landmarks = _load_landmarks_arg(args, moving, moving)
    result, trace = pipeline.free_boundary_deform(moving, landmarks, cfg)
    stem = os.path.splitext(os.path.basename(args.mesh))[0]
    out_mesh = os.path.join(args.out, f"{stem}_deformed.obj")
    deformed = np.column_stack([result.target_uv, np.zeros(moving.n_vertices)])
    mesh.save_mesh(
        mesh.TriMesh(deformed, moving.faces), out_mesh, uv=result.target_uv
    )
    trace.write_csv(os.path.join(args.out, "energy.csv"))
    _plot_wireframe(
        os.path.join(args.out, "before.png"),
        [(moving.uv, moving.faces, "tab:blue")], "input domain",
    )
    _plot_wireframe(
        os.path.join(args.out, "after.png"),
        [(result.target_uv, moving.faces, "tab:blue")], "deformed domain",
    )
    _write_manifest(
        args.out, "deform", {"mesh": args.mesh, "landmarks": args.landmarks}, cfg_dict
    )
    flips = int((result.face_dets <= 0).sum())
    last = trace[-1]
    print(
        f"deformed {args.mesh}: {len(trace) - 1} iterations, "
        f"min face det {last.min_face_det:.3g}, flipped {flips}, "
        f"landmark rmse {last.landmark_rmse:.3g}"
    )
    return EXIT_OK


def _param_with_intensity(mesh_path, csv_path, what):
    _require(mesh_path, what)
    param = mesh.load_param_mesh(mesh_path)
    if csv_path:
        _require(csv_path, f"{what} intensity")
        param = mesh.ParamMesh(
            mesh.attach_intensity(param.base, csv_path), param.uv, boundary=param.boundary
        )
    if param.base.intensity is None:
        raise QcregError(f"{what} has no intensity (embed PLY quality or pass a CSV)")
    return param


def cmd_register(args):
    os.makedirs(args.out, exist_ok=True)
    cfg_dict = _resolve_config(args)
    cfg = _to_registration_config(cfg_dict)
    moving = _param_with_intensity(args.moving, args.moving_intensity, "moving mesh")
    static_ = _param_with_intensity(args.static, args.static_intensity, "static mesh")
    if args.normalize:
        moving = conformal.normalize_domain(moving)
        static_ = conformal.normalize_domain(static_)
    landmarks = _load_landmarks_arg(args, moving, static_)
    result, corr, trace = pipeline.register(moving, static_, landmarks, cfg)

    out_mesh = os.path.join(args.out, "registered.obj")
    mesh.save_mesh(moving.base, out_mesh, uv=result.target_uv)
    trace.write_csv(os.path.join(args.out, "energy.csv"))
    with open(os.path.join(args.out, "omega1_faces.csv"), "w", encoding="ascii") as fh:
        fh.write("face\n")
        for i in np.flatnonzero(corr.omega1_faces):
            fh.write(f"{i}\n")
    intensity.save_pgm(corr.omega2_mask, os.path.join(args.out, "omega2_mask.pgm"))
    with open(os.path.join(args.out, "partners.csv"), "w", encoding="ascii") as fh:
        fh.write("vertex,face,b0,b1,b2\n")
        for v in np.flatnonzero(corr.partner_face >= 0):
            b = corr.partner_bary[v]
            fh.write(f"{v},{corr.partner_face[v]},{b[0]:.17g},{b[1]:.17g},{b[2]:.17g}\n")

    # diagnostic renders
    _plot_wireframe(
        os.path.join(args.out, "overlay.png"),
        [(static_.uv, static_.faces, "tab:red"), (result.target_uv, moving.faces, "tab:blue")],
        "deformed moving (blue) over static (red)",
    )
    i1, i2 = pipeline._normalized_intensities(moving, static_)
    mgrid = intensity.rasterize(moving, result, i1, cfg.grid_res)
    sgrid = intensity.rasterize(static_, static_.uv, i2, cfg.grid_res)
    ov = intensity.overlap_mask(mgrid, sgrid)
    diff = np.where(ov, np.abs(mgrid.values - sgrid.values), 0.0)
    _plot_raster(os.path.join(args.out, "intensity_diff.png"), diff, "|I1 o f^-1 - I2|")

    _write_manifest(
        args.out,
        "register",
        {
            "moving": args.moving,
            "static": args.static,
            "landmarks": args.landmarks,
            **({"moving_intensity": args.moving_intensity} if args.moving_intensity else {}),
            **({"static_intensity": args.static_intensity} if args.static_intensity else {}),
        },
        cfg_dict,
    )
    last = trace[-1]
    if trace.empty_overlap:
        print("WARNING: empty overlap between the deformed source and the target; "
              "correspondence files are empty")
    print(
        f"registered {args.moving} -> {args.static}: {len(trace) - 1} iterations, "
        f"fidelity {last.fidelity:.6g}, landmark rmse {last.landmark_rmse:.3g}, "
        f"omega1 {int(corr.omega1_faces.sum())}/{len(corr.omega1_faces)} faces"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_config_args(p):
    p.add_argument("--config", help="TOML config file; flags override its values")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--k1", type=float)
    p.add_argument("--k2", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--n1", type=int)
    p.add_argument("--m1", type=int)
    p.add_argument("--m2", type=int)
    p.add_argument("--tau-demons", type=float, dest="tau_demons")
    p.add_argument("--sigma-gauss", type=float, dest="sigma_gauss")
    p.add_argument("--grid-res", type=int, dest="grid_res")
    p.add_argument("--early-stop-rel", type=float, dest="early_stop_rel")
    p.add_argument("--prealign", dest="prealign", action="store_true", default=None)
    p.add_argument("--no-prealign", dest="prealign", action="store_false", default=None)
    p.add_argument("--demons-sign", type=float, dest="demons_sign")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qcreg",
        description="register partially corresponding surfaces via "
                    "quasiconformal deformation of their parameter domains",
    )
    parser.add_argument("--version", action="version", version=f"qcreg {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("flatten", help="conformally flatten a disk-topology mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pin-a", type=int, dest="pin_a")
    p.add_argument("--pin-b", type=int, dest="pin_b")
    p.set_defaults(func=cmd_flatten)

    p = sub.add_parser("deform", help="landmark-driven free-boundary deformation")
    p.add_argument("--mesh", required=True, help="flattened mesh (OBJ with vt) or planar mesh")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", action="store_true",
                   help="rescale the domain into [0,1]^2 before deforming")
    _add_config_args(p)
    p.set_defaults(func=cmd_deform)

    p = sub.add_parser("register", help="register two flattened meshes with intensities")
    p.add_argument("--moving", required=True, help="pre-flattened moving mesh (OBJ with vt)")
    p.add_argument("--static", required=True, help="pre-flattened static mesh (OBJ with vt)")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--moving-intensity", dest="moving_intensity",
                   help="CSV vertex_id,value (PLY quality is picked up automatically)")
    p.add_argument("--static-intensity", dest="static_intensity")
    p.add_argument("--out", required=True)
    p.add_argument("--preflattened", action="store_true",
                   help="inputs already carry uv (e.g. externally cut fundamental domains)")
    p.add_argument("--normalize", action="store_true", default=True,
                   help="rescale both domains into [0,1]^2 (default)")
    p.add_argument("--no-normalize", dest="normalize", action="store_false")
    _add_config_args(p)
    p.set_defaults(func=cmd_register)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NotDiskTopology as exc:
        print(
            f"error: {exc} (supply a pre-flattened fundamental domain via "
            "'register --preflattened')",
            file=sys.stderr,
        )
        return EXIT_UNSUPPORTED
    except (SingularSystem, NonConvergence) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except QcregError as exc:
        code = EXIT_NUMERIC if _is_numeric(exc) else EXIT_INPUT
        print(f"error: {exc}", file=sys.stderr)
        return code


def _is_numeric(exc):
    from .errors import (
        DegenerateFace,
        FlippedFaces,
        MuOutOfRange,
        NonFiniteInput,
        NonPositiveDefiniteA,
    )

    return isinstance(
        exc, (FlippedFaces, MuOutOfRange, NonFiniteInput, NonPositiveDefiniteA, DegenerateFace)
    )


if __name__ == "__main__":
    sys.exit(main())
