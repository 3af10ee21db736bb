"""
Run configuration: UTF-8 key=value files with '#' comments, overridable by
--key=value command line flags, resolved into a typed RunConfig.
"""
import logging
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

from bench import RunConfig, SyntheticSource
from data import EpisodeSpec
from errors import ConfigurationError
from model import BackboneConfig
from pipeline import FinetuneConfig, TrainConfig, Variant
from replacement import GridSpec, ReplacementSettings

logger = logging.getLogger(__name__)


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _text(text: str) -> str:
    return text.strip()


def _int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _str_list(text: str) -> Tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


DEFAULT_VARIANTS = ",".join(v.value for v in Variant)

# key -> (converter, default as written in a config file)
SCHEMA: Dict[str, Tuple[Callable[[str], object], str]] = {
    "dataset.root": (_text, ""),
    "dataset.split_file": (_text, ""),
    "dataset.side": (int, "32"),
    "dataset.synthetic.classes": (int, "40"),
    "dataset.synthetic.per_class": (int, "100"),
    "dataset.synthetic.side": (int, "32"),
    "dataset.synthetic.seed": (int, "7"),
    "dataset.synthetic.test_classes": (int, "10"),
    "dataset.synthetic.val_classes": (int, "0"),
    "episode.n": (int, "5"),
    "episode.k": (int, "1"),
    "episode.t": (int, "15"),
    "episode.u": (int, "15"),
    "train.epochs": (int, "30"),
    "train.batch": (int, "64"),
    "train.lr": (float, "0.05"),
    "train.momentum": (float, "0.9"),
    "train.weight_decay": (float, "5e-4"),
    "train.max_blocks": (int, "4"),
    "train.regen_per_epoch": (_bool, "false"),
    "train.seed": (int, "0"),
    "finetune.variant": (_str_list, DEFAULT_VARIANTS),
    "finetune.epochs": (int, "100"),
    "finetune.lr": (float, "0.01"),
    "finetune.max_blocks": (int, "6"),
    "finetune.head": (_text, "linear"),
    "finetune.batch": (int, "0"),
    "finetune.momentum": (float, "0.9"),
    "finetune.dampening": (float, "0.9"),
    "finetune.weight_decay": (float, "1e-3"),
    "finetune.scale": (float, "10"),
    "model.channels": (_int_list, "64,64,64,64"),
    "model.kernel": (int, "3"),
    "replace.method": (_text, "blockaug"),
    "replace.grid_rows": (int, "3"),
    "replace.grid_cols": (int, "3"),
    "replace.randera_area_lo": (float, "0.1"),
    "replace.randera_area_hi": (float, "0.3"),
    "replace.randera_aspect_lo": (float, "0.3"),
    "replace.randera_aspect_hi": (float, "3.3"),
    "replace.blockdef_mix": (float, "0.5"),
    "bench.episodes": (int, "600"),
    "bench.seed": (int, "0"),
    "bench.out_dir": (_text, "results"),
    "bench.checkpoint": (_text, ""),
    "bench.workers": (int, "1"),
    "bench.trace": (_bool, "false"),
    "bench.embeddings": (_bool, "false"),
    "bench.embedding_episodes": (int, "1"),
}

DEFAULTS: Dict[str, str] = {key: default for key, (_, default) in SCHEMA.items()}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Raw key -> value strings; unknown keys and malformed lines raise ConfigurationError"""
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigurationError(f"{source}:{line_no}: expected key=value, got '{line}'")
        if key not in SCHEMA:
            raise ConfigurationError(f"{source}:{line_no}: unknown config key '{key}'")
        values[key] = value.strip()
    return values


def load_config_file(path) -> Dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"could not read config file '{path}': {e}") from e
    return parse_config_text(text, str(path))


def parse_overrides(args: Sequence[str]) -> Dict[str, str]:
    """--key=value flags left over by argparse"""
    values = {}
    for arg in args:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigurationError(f"unrecognized argument '{arg}'; config overrides look like --key=value")
        key, value = arg[2:].split("=", 1)
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown config key '{key}' in '{arg}'")
        values[key] = value
    return values


def typed_values(raw: Dict[str, str]) -> Dict[str, object]:
    merged = {**DEFAULTS, **raw}
    values = {}
    for key, text in merged.items():
        convert = SCHEMA[key][0]
        try:
            values[key] = convert(text)
        except ValueError as e:
            raise ConfigurationError(f"bad value for '{key}': {e}") from e
    return values


def resolve(raw: Dict[str, str], progress: bool = False) -> RunConfig:
    """Build a RunConfig from defaults updated by raw key=value strings"""
    v = typed_values(raw)
    replacement = ReplacementSettings(
        method=v["replace.method"], grid=GridSpec(v["replace.grid_rows"], v["replace.grid_cols"]),
        area_range=(v["replace.randera_area_lo"], v["replace.randera_area_hi"]),
        aspect_range=(v["replace.randera_aspect_lo"], v["replace.randera_aspect_hi"]),
        mix=v["replace.blockdef_mix"], train_max_blocks=v["train.max_blocks"],
        finetune_max_blocks=v["finetune.max_blocks"])
    train_method = replacement.train_method()
    finetune_method = replacement.finetune_method()

    root = v["dataset.root"] or None
    side = v["dataset.side"] if root else v["dataset.synthetic.side"]
    backbone = BackboneConfig(channels=v["model.channels"], kernel=v["model.kernel"], image_side=side)
    variants = tuple(Variant.parse(name) for name in v["finetune.variant"])
    if not variants:
        raise ConfigurationError("finetune.variant names no variant")

    train = TrainConfig(epochs=v["train.epochs"], batch_size=v["train.batch"], lr=v["train.lr"],
                        momentum=v["train.momentum"], weight_decay=v["train.weight_decay"],
                        method=train_method, regenerate_augmented_per_epoch=v["train.regen_per_epoch"],
                        backbone=backbone, progress=progress)
    finetune = FinetuneConfig(variant=variants[0], epochs=v["finetune.epochs"], lr=v["finetune.lr"],
                              momentum=v["finetune.momentum"], dampening=v["finetune.dampening"],
                              weight_decay=v["finetune.weight_decay"],
                              batch_size=v["finetune.batch"] or None, method=finetune_method,
                              head=v["finetune.head"], scale=v["finetune.scale"])
    synthetic = SyntheticSource(classes=v["dataset.synthetic.classes"], per_class=v["dataset.synthetic.per_class"],
                                side=v["dataset.synthetic.side"], seed=v["dataset.synthetic.seed"],
                                test_classes=v["dataset.synthetic.test_classes"],
                                val_classes=v["dataset.synthetic.val_classes"])
    return RunConfig(episode=EpisodeSpec(v["episode.n"], v["episode.k"], v["episode.t"], v["episode.u"]),
                     variants=variants, train=train, finetune=finetune, replacement=replacement,
                     dataset_root=root, split_file=v["dataset.split_file"] or None, side=v["dataset.side"],
                     synthetic=synthetic, train_seed=v["train.seed"], num_episodes=v["bench.episodes"],
                     master_seed=v["bench.seed"], out_dir=v["bench.out_dir"],
                     checkpoint=v["bench.checkpoint"] or None, workers=v["bench.workers"],
                     trace=v["bench.trace"], embeddings=v["bench.embeddings"],
                     embedding_episodes=v["bench.embedding_episodes"], progress=progress)


def load_run_config(config_file: Optional[str] = None, overrides: Sequence[str] = (),
                    progress: bool = False) -> RunConfig:
    raw = load_config_file(config_file) if config_file else {}
    raw.update(parse_overrides(overrides))
    if raw:
        logger.debug("config values: %s", raw)
    return resolve(raw, progress=progress)
