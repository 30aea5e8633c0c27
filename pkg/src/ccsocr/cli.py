"""Command-line front end: ``ccsocr simulate|reconstruct|evaluate|export``.

Every verb takes ``--config <file.json>``.  Configs are validated against a
JSON schema before anything runs; unknown keys are rejected and the error
message carries the JSON pointer of the offending entry.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O.
"""
import argparse
import hashlib
import json
import sys
import time
import warnings

import jsonschema
import numpy as np

from ._accel import set_threads
from .baselines import log_bp
from .core import DirectionalAlbedo, VoxelGrid, albedo_of, normal_of
from .errors import (CCSOCRError, FormatError, GridMismatchError, NumericalError, ParameterError,
                     SingularGeometryError)
from .metrics import depth_map, evaluate, front_projection
from .scenes import (NoiseSpec, PatternSpec, ScalarVolume, Timing, default_pyramid_grid, make_pattern,
                     make_plane_chart, make_pyramid, read_signal, read_volume, simulate_measurement,
                     write_signal, write_volume)
from .solver import SolverParams, reconstruct

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(Exception):
    """Invalid configuration; ``pointer`` is the JSON pointer of the problem."""

    def __init__(self, pointer, message):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


# -- schemas ------------------------------------------------------------------------

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_VEC3 = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}
_PATH = {"type": "string", "minLength": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


GRID_SCHEMA = _obj({
    "n": {"type": "integer", "minimum": 1},
    "shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
    "lower": _VEC3,
    "upper": _VEC3,
})

SIMULATE_SCHEMA = _obj({
    "seed": _INT,
    "scene": _obj({
        "kind": {"enum": ["pyramid", "plane-chart"]},
        "grid": GRID_SCHEMA,
        "albedo": _NUM,
        "apex_toward_relay": {"type": "boolean"},
        "depth": _NUM,
        "mask": {"type": "array", "items": {"type": "array", "items": {"type": "boolean"}}},
    }, required=["kind"]),
    "pattern": _obj({
        "kind": {"enum": ["grid", "random", "vertical-bars", "horizontal-bars", "box-frame", "point-list"]},
        "counts": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "extent": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        "center": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        "depth": _NUM,
        "mode": {"enum": ["confocal", "exhaustive-nonconfocal", "fixed-detector"]},
        "points": {"type": "array", "items": _VEC3},
        "detector": _VEC3,
    }, required=["kind"]),
    "timing": _obj({
        "bin_width": {"type": "number", "exclusiveMinimum": 0},
        "n_t": {"type": ["integer", "null"], "minimum": 1},
        "t0": _NUM,
    }),
    "noise": _obj({
        "enabled": {"type": "boolean"},
        "peak_counts": {"type": "number", "exclusiveMinimum": 0},
        "background": {"type": "number", "minimum": 0},
    }),
    "output": _obj({"signal": _PATH, "truth": _PATH}, required=["signal"]),
}, required=["scene", "pattern", "output"])

_SOLVER_FIELDS = {
    name: {"type": ["number", "null"]} for name in (
        "s_u", "s_b", "s_d", "lambda_u", "lambda_d", "lambda_pu", "lambda_fd", "mu",
        "virtual_plane_depth")
}
_SOLVER_FIELDS.update({name: _NUM for name in (
    "sigma_b", "lambda_b", "lambda_pb", "lambda_pd", "lambda_sb", "lambda_sd", "lambda_bd", "s_u_init",
    "mu_init", "lambda_u_imp", "lambda_d_imp", "threshold_imp", "pu_relative", "virtual_noise",
    "cg_tol", "shared_tol")})
_SOLVER_FIELDS.update({name: {"type": "integer", "minimum": 1} for name in (
    "K", "J", "cg_max_iter", "block_size", "block_stride", "window", "n_neighbors", "dict_sweeps",
    "wiener_size", "wiener_stride", "frame_sweeps", "power_iterations")})
_SOLVER_FIELDS["J_init"] = {"type": ["integer", "null"], "minimum": 1}
_SOLVER_FIELDS["jacobi"] = {"type": "boolean"}
_SOLVER_FIELDS["frame_size"] = {"type": "array", "items": {"type": "integer", "minimum": 1},
                                "minItems": 3, "maxItems": 3}
_SOLVER_FIELDS["frame_stride"] = _SOLVER_FIELDS["frame_size"]
_SOLVER_FIELDS["virtual_grid"] = {"oneOf": [
    {"type": "null"}, {"const": "sqrt"},
    {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2}]}

RECONSTRUCT_SCHEMA = _obj({
    "seed": _INT,
    "signal": _PATH,
    "grid": GRID_SCHEMA,
    "method": {"enum": ["ccsocr", "logbp"]},
    "solver": _obj(_SOLVER_FIELDS),
    "logbp": _obj({"sigma": {"type": "number", "exclusiveMinimum": 0}}),
    "output": _obj({"volume": _PATH, "diagnostics": _PATH}, required=["volume"]),
}, required=["signal", "grid", "output"])

EVALUATE_SCHEMA = _obj({
    "seed": _INT,
    "recon": _PATH,
    "truth": _PATH,
    "threshold": {"type": "number", "minimum": 0, "maximum": 1},
    "output": _PATH,
}, required=["recon", "truth", "output"])

EXPORT_SCHEMA = _obj({
    "seed": _INT,
    "volume": _PATH,
    "kind": {"enum": ["mip", "depth", "slice", "normals"]},
    "axis": {"type": "integer", "minimum": 0, "maximum": 2},
    "index": {"type": "integer", "minimum": 0},
    "threshold": {"type": "number", "minimum": 0, "maximum": 1},
    "output": _PATH,
}, required=["volume", "kind", "output"])

SCHEMAS = {"simulate": SIMULATE_SCHEMA, "reconstruct": RECONSTRUCT_SCHEMA,
           "evaluate": EVALUATE_SCHEMA, "export": EXPORT_SCHEMA}


def json_pointer(path):
    """RFC 6901 pointer for a sequence of keys and indices."""
    parts = [str(p).replace("~", "~0").replace("/", "~1") for p in path]
    return "/" + "/".join(parts) if parts else ""


def validate_config(config, schema):
    """Raise ConfigError (with a JSON pointer) unless ``config`` matches ``schema``."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(config), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            if extra:
                path = path + [extra[0]]
                raise ConfigError(json_pointer(path), "unknown key")
        raise ConfigError(json_pointer(path), err.message)
    return config


def load_config(path, verb):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from exc
    return validate_config(config, SCHEMAS[verb])


def derive_seed(seed, name):
    """Sub-seed for a named random stream, from a fixed hash of ``(seed, name)``."""
    digest = hashlib.blake2b(f"{int(seed)}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def grid_from_config(cfg):
    cfg = cfg or {}
    if "shape" in cfg or "lower" in cfg or "upper" in cfg:
        missing = [k for k in ("shape", "lower", "upper") if k not in cfg]
        if missing:
            raise ConfigError(f"/grid/{missing[0]}", "required with an explicit grid")
        return VoxelGrid.from_bounds(tuple(cfg["shape"]), cfg["lower"], cfg["upper"])
    return default_pyramid_grid(cfg.get("n", 64))


# -- image export ---------------------------------------------------------------------


def to_gray(values):
    """Map values on [0, 1] to bytes, rounding half up."""
    v = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def normal_to_gray(component):
    """Normal component on [-1, 1] to bytes: -1 -> 0, 0 -> 128, +1 -> 255."""
    return to_gray((np.asarray(component, dtype=float) + 1.0) / 2.0)


def image_rows(plane):
    """Orient an ``(a, b)`` array as an image: rows follow ``b`` from high to low, columns ``a``."""
    return np.ascontiguousarray(np.asarray(plane)[:, ::-1].T)


def encode_pnm(pixels):
    """Binary PGM (2-D uint8) or PPM (3-D uint8 with 3 channels), maxval 255."""
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        raise ParameterError("pixels must be uint8")
    if px.ndim == 2:
        magic = b"P5"
    elif px.ndim == 3 and px.shape[2] == 3:
        magic = b"P6"
    else:
        raise ParameterError("pixels must be (h, w) or (h, w, 3)")
    h, w = px.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(px).tobytes()


def write_pnm(path, pixels):
    with open(path, "wb") as fh:
        fh.write(encode_pnm(pixels))


def _albedo_and_normals(vol):
    if isinstance(vol, DirectionalAlbedo):
        return vol.grid, albedo_of(vol.u), normal_of(vol.u)
    return vol.grid, np.asarray(vol.values, dtype=float), None


def export_images(vol, kind, output, axis=0, index=None, threshold=0.25):
    """Write the images of one export kind; returns the list of written paths.

    ``output`` is a path prefix: ``<output>_<name>.pgm`` / ``.ppm``.
    """
    grid, albedo, normals = _albedo_and_normals(vol)
    written = []

    def put(name, pixels):
        ext = "ppm" if pixels.ndim == 3 else "pgm"
        path = f"{output}_{name}.{ext}"
        write_pnm(path, pixels)
        written.append(path)

    if kind == "mip":
        for ax, name in enumerate(("x", "y", "z")):
            put(f"mip_{name}", to_gray(image_rows(front_projection(np.moveaxis(albedo, ax, 0)))))
    elif kind == "depth":
        depth, empty = depth_map(albedo, grid.axis_centers(0), threshold)
        d_lo, d_hi = grid.origin[0], grid.origin[0] + grid.shape[0] * grid.voxel_size[0]
        # nearest surfaces bright, empty columns black
        scaled = np.where(empty, 0.0, (1.0 + 254.0 * (d_hi - np.nan_to_num(depth)) / (d_hi - d_lo)) / 255.0)
        put("depth", to_gray(image_rows(scaled)))
    elif kind == "slice":
        n = albedo.shape[axis]
        k = n // 2 if index is None else index
        if not 0 <= k < n:
            raise ParameterError(f"slice index {k} outside [0, {n})")
        plane = np.take(albedo, k, axis=axis)
        peak = float(np.max(np.abs(albedo)))
        put(f"slice_{'xyz'[axis]}{k}", to_gray(image_rows(plane / peak if peak > 0 else plane)))
    elif kind == "normals":
        if normals is None:
            raise ParameterError("normal export needs a directional volume")
        # normal of the brightest voxel along each depth column
        pick = np.argmax(albedo, axis=0)
        front = np.take_along_axis(normals, pick[None, :, :, None], axis=0)[0]
        front = np.where(albedo.max(axis=0)[..., None] > 0, front, 0.0)
        channels = [image_rows(front[..., c]) for c in range(3)]
        for c, name in enumerate(("x", "y", "z")):
            put(f"normal_{name}", normal_to_gray(channels[c]))
        put("normal_rgb", normal_to_gray(np.stack(channels, axis=-1)))
    else:
        raise ParameterError(f"unknown export kind {kind!r}")
    return written


# -- verbs ----------------------------------------------------------------------------


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _finite_json(value):
    """Replace non-finite floats by strings so the output stays strict JSON."""
    if isinstance(value, dict):
        return {k: _finite_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite_json(v) for v in value]
    if isinstance(value, (float, np.floating)) and not np.isfinite(value):
        return "nan" if np.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def cmd_simulate(config, seed=0):
    scene = config["scene"]
    grid = grid_from_config(scene.get("grid"))
    if scene["kind"] == "pyramid":
        truth = make_pyramid(grid, scene.get("albedo", 1.0), scene.get("apex_toward_relay", True))
    else:
        if "depth" not in scene:
            raise ConfigError("/scene/depth", "required for a plane chart")
        mask = np.array(scene["mask"], dtype=bool) if "mask" in scene else None
        truth = make_plane_chart(grid, scene["depth"], mask, scene.get("albedo", 1.0))
    pat = dict(config["pattern"])
    for key in ("counts", "extent", "center"):
        if key in pat:
            pat[key] = tuple(pat[key])
    pat["seed"] = derive_seed(seed, "pattern")
    pairs = make_pattern(PatternSpec(**pat))
    tcfg = config.get("timing", {})
    timing = Timing(tcfg.get("bin_width", 32e-12), tcfg.get("n_t"), tcfg.get("t0", 0.0))
    ncfg = config.get("noise", {})
    noise = None
    if ncfg.get("enabled", False):
        noise = NoiseSpec(True, background=ncfg.get("background", 0.0), seed=derive_seed(seed, "noise"),
                          peak_counts=ncfg.get("peak_counts", 1000.0))
    signal = simulate_measurement(truth, pairs, timing, noise)
    out = config["output"]
    write_signal(out["signal"], signal)
    if "truth" in out:
        write_volume(out["truth"], truth)
    return {"pairs": signal.n_pairs, "bins": signal.n_t}


def cmd_reconstruct(config, seed=0, method=None):
    method = method or config.get("method", "ccsocr")
    signal = read_signal(config["signal"])
    grid = grid_from_config(config.get("grid"))
    tic = time.perf_counter()
    if method == "logbp":
        sigma = config.get("logbp", {}).get("sigma", 1.0)
        volume = ScalarVolume(grid, log_bp(signal, grid, sigma))
        diagnostics = {"method": "logbp", "sigma": sigma}
    elif method == "ccsocr":
        params = SolverParams.from_dict(config.get("solver", {}))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = reconstruct(signal, grid, params)
        volume = result.u
        diagnostics = dict(result.diagnostics, method="ccsocr",
                           warnings=sorted({str(w.message) for w in caught}))
    else:
        raise ConfigError("/method", f"unknown method {method!r}")
    diagnostics["wall_time"] = time.perf_counter() - tic
    out = config["output"]
    write_volume(out["volume"], volume)
    if "diagnostics" in out:
        _write_json(out["diagnostics"], _finite_json(diagnostics))
    return {"method": method}


def _albedo_volume(vol):
    return albedo_of(vol.u) if isinstance(vol, DirectionalAlbedo) else np.asarray(vol.values, dtype=float)


def cmd_evaluate(config, seed=0):
    recon = read_volume(config["recon"])
    truth = read_volume(config["truth"])
    if recon.grid != truth.grid:
        raise GridMismatchError("reconstruction and truth live on different grids")
    report = evaluate(_albedo_volume(recon), _albedo_volume(truth), truth.grid.axis_centers(0),
                      config.get("threshold", 0.25))
    _write_json(config["output"], report.to_dict())
    return report.to_dict()


def cmd_export(config, seed=0):
    vol = read_volume(config["volume"])
    paths = export_images(vol, config["kind"], config["output"], config.get("axis", 0),
                          config.get("index"), config.get("threshold", 0.25))
    return {"written": paths}


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "evaluate": cmd_evaluate,
            "export": cmd_export}


def build_parser():
    parser = argparse.ArgumentParser(prog="ccsocr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in COMMANDS:
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="seed for all random streams")
        p.add_argument("--threads", type=int, default=None, help="threads for the inner kernels")
        if verb == "reconstruct":
            p.add_argument("--method", choices=("ccsocr", "logbp"), default=None)
    return parser


def run(argv=None):
    """Parse ``argv`` and run one verb; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.verb)
        if args.threads:
            set_threads(args.threads)
        seed = args.seed if args.seed is not None else config.get("seed", 0)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("/seed", "seed must be an unsigned 64-bit integer")
        kwargs = {"method": args.method} if args.verb == "reconstruct" else {}
        COMMANDS[args.verb](config, seed=seed, **kwargs)
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParameterError, GridMismatchError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, SingularGeometryError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CCSOCRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
