"""Run configuration: YAML parsing, schema validation, profile defaults.

A run config is a YAML mapping with sections `data`, `model`, `adaptation`,
`train`, `eval`, `report` plus the scalars `profile`, `run_name`, `seed`.
Unknown keys anywhere are errors.  The `paper` profile defaults every
training field to the reference settings (200k iterations, batch 2, SGD
1e-5 / Adam 4e-6, poly 0.9, source resized to 720x1280, targets at
400x2048, per-site loss weights 0.001/1.0 and 0.0002/0.1); the `desk`
profile shrinks the same pipeline to commodity-CPU scale.  Defaults are
also shipped as data in configs/defaults_{paper,desk}.yaml.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import yaml

from .adapt import DA_1, DA_2, DASiteConfig
from .attention import AttentionConfig, VARIANTS
from .scene import EQUIRECTANGULAR, PINHOLE, CameraSpec
from .segnet import SegmenterConfig
from .train import PAPER_SITE_DEFAULTS, TrainConfig

PROFILES = ("desk", "paper")

ENV_DATA_ROOT = "PIN2PANO_DATA_ROOT"
ENV_RUN_ROOT = "PIN2PANO_RUN_ROOT"


class ConfigError(ValueError):
    """Schema violation with the offending key path."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 7
    complexity: int = 10
    train_scenes: int = 24
    val_scenes: int = 8
    source_camera: CameraSpec = CameraSpec(PINHOLE, 64, 64, math.pi / 2)
    target_camera: CameraSpec = CameraSpec(EQUIRECTANGULAR, 256, 64)


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    synth: SynthSpec = SynthSpec()
    source_train: str = "source_train"
    target_train: str = "target_train"
    target_val: str = "target_val"


@dataclass(frozen=True)
class EvalConfig:
    split: str = "target_val"
    input_size: tuple[int, int] | None = None
    checkpoint: str | None = None


@dataclass(frozen=True)
class ReportConfig:
    rows: tuple[dict, ...] = ()
    class_tables: tuple[str, ...] = ()
    output: str | None = None


@dataclass(frozen=True)
class RunConfig:
    profile: str
    run_name: str
    seed: int
    data: DataConfig
    model: SegmenterConfig
    train: TrainConfig
    eval: EvalConfig
    report: ReportConfig

    @property
    def adaptation(self) -> tuple[DASiteConfig, ...]:
        return self.train.sites


_PROFILE_MODEL = {
    "paper": {"encoder_channels": (32, 64, 96, 128)},
    "desk": {"encoder_channels": (16, 32, 48, 64)},
}

_PROFILE_TRAIN = {
    "paper": dict(
        max_iter=200_000,
        batch_size=2,
        g_base_lr=1e-5,
        d_base_lr=4e-6,
        d_base_channels=64,
        source_resize=(720, 1280),
        target_size=(400, 2048),
        checkpoint_every=1000,
    ),
    "desk": dict(
        max_iter=2000,
        batch_size=2,
        g_base_lr=5e-3,
        d_base_lr=1e-4,
        d_base_channels=16,
        source_resize=None,
        target_size=None,
        checkpoint_every=1000,
    ),
}


def _mapping(node, path: str) -> dict:
    if node is None:
        return {}
    if not isinstance(node, dict):
        raise ConfigError(path, f"expected a mapping, got {type(node).__name__}")
    return node

def _sequence(node, path: str) -> list:
    if node is None:
        return []
    if not isinstance(node, list):
        raise ConfigError(path, f"expected a list, got {type(node).__name__}")
    return node


def _check_keys(node: dict, allowed: set[str], path: str) -> None:
    unknown = set(node) - allowed
    if unknown:
        raise ConfigError(path, f"unknown keys: {sorted(unknown)}; allowed: {sorted(allowed)}")


def _int(node, path: str, minimum: int | None = None) -> int:
    if isinstance(node, bool) or not isinstance(node, int):
        raise ConfigError(path, f"expected an integer, got {node!r}")
    if minimum is not None and node < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {node}")
    return node


def _float(node, path: str, minimum: float | None = None) -> float:
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(path, f"expected a number, got {node!r}")
    v = float(node)
    if minimum is not None and v < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {v}")
    return v


def _str(node, path: str, choices: tuple[str, ...] | None = None) -> str:
    if not isinstance(node, str):
        raise ConfigError(path, f"expected a string, got {node!r}")
    if choices is not None and node not in choices:
        raise ConfigError(path, f"expected one of {list(choices)}, got {node!r}")
    return node


def _size(node, path: str) -> tuple[int, int] | None:
    if node is None:
        return None
    if not isinstance(node, (list, tuple)) or len(node) != 2:
        raise ConfigError(path, f"expected [height, width] or null, got {node!r}")
    return (_int(node[0], path + "[0]", 1), _int(node[1], path + "[1]", 1))


def _camera(node, path: str, default: CameraSpec) -> CameraSpec:
    if node is None:
        return default
    node = _mapping(node, path)
    _check_keys(node, {"kind", "width", "height", "horizontal_fov"}, path)
    kind = _str(node.get("kind", default.kind), path + ".kind", (PINHOLE, EQUIRECTANGULAR))
    fov = node.get("horizontal_fov", default.horizontal_fov if kind == PINHOLE else None)
    try:
        return CameraSpec(
            kind=kind,
            width=_int(node.get("width", default.width), path + ".width", 1),
            height=_int(node.get("height", default.height), path + ".height", 1),
            horizontal_fov=None if fov is None else _float(fov, path + ".horizontal_fov"),
        )
    except ValueError as e:
        raise ConfigError(path, str(e)) from e


def _attention_entry(node, path: str) -> AttentionConfig:
    if isinstance(node, str):
        node = {"variant": node}
    node = _mapping(node, path)
    _check_keys(node, {"variant", "reduction_ratio", "gamma_init"}, path)
    try:
        return AttentionConfig(
            variant=_str(node.get("variant"), path + ".variant", VARIANTS),
            reduction_ratio=_int(node.get("reduction_ratio", 8), path + ".reduction_ratio", 1),
            gamma_init=_float(node.get("gamma_init", 0.0), path + ".gamma_init"),
        )
    except ValueError as e:
        raise ConfigError(path, str(e)) from e


def _site_entry(node, path: str) -> DASiteConfig:
    node = _mapping(node, path)
    _check_keys(node, {"site", "mechanism", "lambda_adv", "lambda_seg"}, path)
    site = _str(node.get("site"), path + ".site", (DA_1, DA_2))
    defaults = PAPER_SITE_DEFAULTS[site]
    try:
        return DASiteConfig(
            site=site,
            mechanism=_str(node.get("mechanism", "S"), path + ".mechanism"),
            lambda_adv=_float(
                node.get("lambda_adv", defaults["lambda_adv"]), path + ".lambda_adv"
            ),
            lambda_seg=_float(
                node.get("lambda_seg", defaults["lambda_seg"]), path + ".lambda_seg"
            ),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(path, str(e)) from e


def validate_config(text: str) -> RunConfig:
    """Parse and validate YAML text into a fully defaulted RunConfig."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError("<document>", f"invalid YAML: {e}") from e
    raw = _mapping(raw, "<document>")
    _check_keys(
        raw,
        {"profile", "run_name", "seed", "data", "model", "adaptation", "train", "eval", "report"},
        "<document>",
    )
    profile = _str(raw.get("profile", "desk"), "profile", PROFILES)
    run_name = _str(raw.get("run_name", "run"), "run_name")
    seed = _int(raw.get("seed", 0), "seed", 0)

    data_node = _mapping(raw.get("data"), "data")
    _check_keys(
        data_node,
        {"root", "synth", "source_train", "target_train", "target_val"},
        "data",
    )
    synth_node = _mapping(data_node.get("synth"), "data.synth")
    _check_keys(
        synth_node,
        {"seed", "complexity", "train_scenes", "val_scenes", "source_camera", "target_camera"},
        "data.synth",
    )
    default_synth = SynthSpec()
    synth = SynthSpec(
        seed=_int(synth_node.get("seed", default_synth.seed), "data.synth.seed", 0),
        complexity=_int(
            synth_node.get("complexity", default_synth.complexity), "data.synth.complexity", 1
        ),
        train_scenes=_int(
            synth_node.get("train_scenes", default_synth.train_scenes),
            "data.synth.train_scenes",
            1,
        ),
        val_scenes=_int(
            synth_node.get("val_scenes", default_synth.val_scenes), "data.synth.val_scenes", 1
        ),
        source_camera=_camera(
            synth_node.get("source_camera"), "data.synth.source_camera",
            default_synth.source_camera,
        ),
        target_camera=_camera(
            synth_node.get("target_camera"), "data.synth.target_camera",
            default_synth.target_camera,
        ),
    )
    if synth.source_camera.kind != PINHOLE:
        raise ConfigError("data.synth.source_camera.kind", "source camera must be pinhole")
    if synth.target_camera.kind != EQUIRECTANGULAR:
        raise ConfigError(
            "data.synth.target_camera.kind", "target camera must be equirectangular"
        )
    data = DataConfig(
        root=_str(data_node.get("root", "data"), "data.root"),
        synth=synth,
        source_train=_str(data_node.get("source_train", "source_train"), "data.source_train"),
        target_train=_str(data_node.get("target_train", "target_train"), "data.target_train"),
        target_val=_str(data_node.get("target_val", "target_val"), "data.target_val"),
    )

    model_node = _mapping(raw.get("model"), "model")
    _check_keys(model_node, {"encoder_channels", "attention", "aux_head"}, "model")
    enc = model_node.get("encoder_channels", list(_PROFILE_MODEL[profile]["encoder_channels"]))
    enc = _sequence(enc, "model.encoder_channels")
    if len(enc) != 4:
        raise ConfigError("model.encoder_channels", "expected four channel widths")
    channels = tuple(_int(c, f"model.encoder_channels[{i}]", 1) for i, c in enumerate(enc))
    attention = tuple(
        _attention_entry(a, f"model.attention[{i}]")
        for i, a in enumerate(_sequence(model_node.get("attention"), "model.attention"))
    )
    aux_head = model_node.get("aux_head", True)
    if not isinstance(aux_head, bool):
        raise ConfigError("model.aux_head", f"expected a boolean, got {aux_head!r}")
    try:
        model = SegmenterConfig(
            encoder_channels=channels, attention=attention, aux_head=aux_head
        )
    except ValueError as e:
        raise ConfigError("model", str(e)) from e

    sites = tuple(
        _site_entry(s, f"adaptation[{i}]")
        for i, s in enumerate(_sequence(raw.get("adaptation"), "adaptation"))
    )
    if any(s.site == DA_2 and s.lambda_seg > 0 for s in sites) and not model.aux_head:
        raise ConfigError(
            "adaptation", "DA_2 lambda_seg > 0 requires model.aux_head: true"
        )

    train_node = _mapping(raw.get("train"), "train")
    allowed_train = {
        "max_iter", "batch_size", "g_base_lr", "g_momentum", "g_weight_decay",
        "d_base_lr", "d_base_channels", "lr_power", "rcdam_stage2_seg_weight",
        "boundary_threshold", "source_resize", "target_size", "checkpoint_every",
        "log_every",
    }
    _check_keys(train_node, allowed_train, "train")
    p = _PROFILE_TRAIN[profile]
    try:
        train = TrainConfig(
            max_iter=_int(train_node.get("max_iter", p["max_iter"]), "train.max_iter", 1),
            batch_size=_int(train_node.get("batch_size", p["batch_size"]), "train.batch_size", 1),
            g_base_lr=_float(train_node.get("g_base_lr", p["g_base_lr"]), "train.g_base_lr", 0.0),
            g_momentum=_float(train_node.get("g_momentum", 0.9), "train.g_momentum", 0.0),
            g_weight_decay=_float(
                train_node.get("g_weight_decay", 5e-4), "train.g_weight_decay", 0.0
            ),
            d_base_lr=_float(train_node.get("d_base_lr", p["d_base_lr"]), "train.d_base_lr", 0.0),
            d_base_channels=_int(
                train_node.get("d_base_channels", p["d_base_channels"]),
                "train.d_base_channels",
                1,
            ),
            lr_power=_float(train_node.get("lr_power", 0.9), "train.lr_power", 0.0),
            sites=sites,
            rcdam_stage2_seg_weight=_float(
                train_node.get("rcdam_stage2_seg_weight", 1.5),
                "train.rcdam_stage2_seg_weight",
                0.0,
            ),
            boundary_threshold=_float(
                train_node.get("boundary_threshold", 0.1), "train.boundary_threshold", 0.0
            ),
            source_resize=_size(
                train_node.get("source_resize", p["source_resize"]), "train.source_resize"
            ),
            target_size=_size(
                train_node.get("target_size", p["target_size"]), "train.target_size"
            ),
            seed=seed,
            checkpoint_every=_int(
                train_node.get("checkpoint_every", p["checkpoint_every"]),
                "train.checkpoint_every",
                1,
            ),
            log_every=_int(train_node.get("log_every", 1), "train.log_every", 1),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError("train", str(e)) from e

    eval_node = _mapping(raw.get("eval"), "eval")
    _check_keys(eval_node, {"split", "input_size", "checkpoint"}, "eval")
    eval_cfg = EvalConfig(
        split=_str(eval_node.get("split", "target_val"), "eval.split"),
        input_size=_size(eval_node.get("input_size"), "eval.input_size"),
        checkpoint=(
            None
            if eval_node.get("checkpoint") is None
            else _str(eval_node.get("checkpoint"), "eval.checkpoint")
        ),
    )

    report_node = _mapping(raw.get("report"), "report")
    _check_keys(report_node, {"rows", "class_tables", "output"}, "report")
    rows = []
    for i, r in enumerate(_sequence(report_node.get("rows"), "report.rows")):
        r = _mapping(r, f"report.rows[{i}]")
        _check_keys(
            r,
            {"name", "backbone", "source_miou", "target_miou", "source", "target"},
            f"report.rows[{i}]",
        )
        by_value = "source_miou" in r or "target_miou" in r
        by_file = "source" in r or "target" in r
        if by_value == by_file:
            raise ConfigError(
                f"report.rows[{i}]",
                "give either source_miou/target_miou numbers or source/target report files",
            )
        if by_value:
            rows.append(
                {
                    "name": _str(r.get("name"), f"report.rows[{i}].name"),
                    "backbone": _str(r.get("backbone", "-"), f"report.rows[{i}].backbone"),
                    "source_miou": _float(r.get("source_miou"), f"report.rows[{i}].source_miou"),
                    "target_miou": _float(r.get("target_miou"), f"report.rows[{i}].target_miou"),
                }
            )
        else:
            rows.append(
                {
                    "backbone": _str(r.get("backbone", "-"), f"report.rows[{i}].backbone"),
                    "source": _str(r.get("source"), f"report.rows[{i}].source"),
                    "target": _str(r.get("target"), f"report.rows[{i}].target"),
                }
            )
    report = ReportConfig(
        rows=tuple(rows),
        class_tables=tuple(
            _str(t, f"report.class_tables[{i}]")
            for i, t in enumerate(_sequence(report_node.get("class_tables"), "report.class_tables"))
        ),
        output=(
            None
            if report_node.get("output") is None
            else _str(report_node.get("output"), "report.output")
        ),
    )

    return RunConfig(
        profile=profile,
        run_name=run_name,
        seed=seed,
        data=data,
        model=model,
        train=train,
        eval=eval_cfg,
        report=report,
    )


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return validate_config(fh.read())
