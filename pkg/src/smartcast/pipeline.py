"""End-to-end orchestration: config parsing, staged runs, reports.

A run trains one soil model per depth (windows pooled across sensors,
scaled per depth), produces 14-day forecasts at every sensor, trains
the vegetation-index pixel model, kriges the chosen forecast day into
a per-depth grid stack, and writes all artifacts plus a JSON report.

Every stage failure is wrapped in a StageError naming the stage, and
artifacts are staged under `<out>/.partial` until the run succeeds.
"""

from __future__ import annotations

import dataclasses
import json
import shutil
from dataclasses import dataclass
from datetime import timedelta
from pathlib import Path

import numpy as np

from . import kriging, lstm, timeseries, vegindex
from .errors import (
    ConfigError,
    DataError,
    EmptySplitError,
    NumericError,
    StageError,
)
from .kriging import GridGeometry, SamplePoint, Variogram
from .lstm import ModelShape, Seq2SeqModel, TrainConfig
from .timeseries import DEFAULT_HORIZON, DEFAULT_MAX_GAP, Scaler, WindowSet

_DEFAULT_BAND_MAPPING = {"red": "B04", "nir": "B08", "swir": "B11"}
_VAL_FRACTION = 0.1


@dataclass(frozen=True)
class SoilModelSpec:
    """Soil-architecture sizing (input window and layer widths)."""

    input_length: int = 30
    encoder_hidden: int = 200
    decoder_hidden: int = 200
    dense_hidden: int = 100

    def __post_init__(self):
        if min(self.input_length, self.encoder_hidden, self.decoder_hidden, self.dense_hidden) < 1:
            raise ConfigError("soil model dimensions must be positive")


@dataclass(frozen=True)
class IndexModelSpec:
    """Index-architecture sizing; the input window is fixed at 5 images."""

    encoder_hidden: int = 50
    decoder_hidden: int = 50
    dense_hidden: int = 20

    def __post_init__(self):
        if min(self.encoder_hidden, self.decoder_hidden, self.dense_hidden) < 1:
            raise ConfigError("index model dimensions must be positive")


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; raw path strings resolve against base_dir."""

    base_dir: Path
    seed: int
    sensor_csv: str
    image_manifest: str | None
    output_dir: str
    sensor_locations: dict[str, tuple[float, float]]
    depths_cm: tuple[int, ...] | None
    horizon_days: int
    test_fraction: float
    max_gap_days: int
    forecast_day: int
    index_kind: str
    band_mapping: dict[str, str]
    soil_model: SoilModelSpec
    index_model: IndexModelSpec
    soil_train: TrainConfig
    index_train: TrainConfig
    grid: GridGeometry
    variogram: Variogram | None

    def resolve(self, raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def sensor_csv_path(self) -> Path:
        return self.resolve(self.sensor_csv)

    @property
    def image_manifest_path(self) -> Path | None:
        return self.resolve(self.image_manifest) if self.image_manifest else None

    @property
    def output_path(self) -> Path:
        return self.resolve(self.output_dir)


@dataclass(frozen=True)
class DepthResult:
    """Per-depth training, forecasting, and interpolation outcomes."""

    depth_cm: int
    test_rmse: float
    persistence_rmse: float
    n_train_windows: int
    n_test_windows: int
    forecasts: dict[str, tuple[float, ...]]
    loo_score: float | None
    variogram: Variogram | None
    n_samples: int


@dataclass(frozen=True)
class IndexResult:
    """Index-model evaluation and forecast-target metadata."""

    test_rmse: float
    test_mae: float
    persistence_rmse: float
    n_train_windows: int
    n_test_windows: int
    forecast_target: str


@dataclass(frozen=True)
class ForecastReport:
    """Everything a run produced: metrics per depth, index metrics, artifacts."""

    seed: int
    forecast_day: int
    depths: tuple[DepthResult, ...]
    index: IndexResult | None
    artifacts: dict[str, str]

    def to_dict(self) -> dict:
        """Plain-type payload with every metric checked finite."""

        def finite(name: str, value: float) -> float:
            value = float(value)
            if not np.isfinite(value):
                raise NumericError(f"report metric {name} is not finite: {value}")
            return value

        depths = {}
        for d in self.depths:
            entry = {
                "test_rmse": finite(f"depth {d.depth_cm} test_rmse", d.test_rmse),
                "persistence_rmse": finite(f"depth {d.depth_cm} persistence_rmse", d.persistence_rmse),
                "n_train_windows": d.n_train_windows,
                "n_test_windows": d.n_test_windows,
                "forecasts": {
                    s: [finite(f"forecast {s}@{d.depth_cm}", v) for v in vals]
                    for s, vals in sorted(d.forecasts.items())
                },
                "n_samples": d.n_samples,
                "loo_score": None if d.loo_score is None else finite(f"depth {d.depth_cm} loo", d.loo_score),
                "variogram": None
                if d.variogram is None
                else {
                    "nugget": finite("nugget", d.variogram.nugget),
                    "sill": finite("sill", d.variogram.sill),
                    "range_a": finite("range_a", d.variogram.range_a),
                },
            }
            depths[str(d.depth_cm)] = entry
        index = None
        if self.index is not None:
            index = {
                "test_rmse": finite("index test_rmse", self.index.test_rmse),
                "test_mae": finite("index test_mae", self.index.test_mae),
                "persistence_rmse": finite("index persistence_rmse", self.index.persistence_rmse),
                "n_train_windows": self.index.n_train_windows,
                "n_test_windows": self.index.n_test_windows,
                "forecast_target": self.index.forecast_target,
            }
        return {
            "seed": self.seed,
            "forecast_day": self.forecast_day,
            "soil": {"per_depth": depths},
            "index": index,
            "artifacts": dict(sorted(self.artifacts.items())),
        }


# -- config parsing ---------------------------------------------------------------

def _reject_unknown(section: str, given: dict, allowed: set[str]) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _require(given: dict, key: str, kinds, section: str):
    if key not in given:
        raise ConfigError(f"missing required key '{key}' in {section}")
    value = given[key]
    if not isinstance(value, kinds) or isinstance(value, bool):
        raise ConfigError(f"key '{key}' in {section} has wrong type {type(value).__name__}")
    return value


def _optional(given: dict, key: str, kinds, section: str, default):
    if key not in given or given[key] is None:
        return default
    return _require(given, key, kinds, section)


def _parse_train(section: str, raw: dict, defaults: TrainConfig) -> TrainConfig:
    allowed = {"learning_rate", "epochs", "batch_size", "loss", "adam_beta1", "adam_beta2", "adam_epsilon"}
    _reject_unknown(section, raw, allowed)
    return dataclasses.replace(
        defaults,
        learning_rate=float(_optional(raw, "learning_rate", (int, float), section, defaults.learning_rate)),
        epochs=int(_optional(raw, "epochs", int, section, defaults.epochs)),
        batch_size=int(_optional(raw, "batch_size", int, section, defaults.batch_size)),
        loss=str(_optional(raw, "loss", str, section, defaults.loss)),
        adam_beta1=float(_optional(raw, "adam_beta1", (int, float), section, defaults.adam_beta1)),
        adam_beta2=float(_optional(raw, "adam_beta2", (int, float), section, defaults.adam_beta2)),
        adam_epsilon=float(_optional(raw, "adam_epsilon", (int, float), section, defaults.adam_epsilon)),
    )


def parse_config(path: str | Path) -> RunConfig:
    """Load and validate a JSON run config; defaults fill absent keys.

    Unknown keys anywhere are rejected by name; referenced input paths
    must exist when the file is parsed. The seed is mandatory.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = {
        "seed", "sensor_csv", "image_manifest", "output_dir", "sensor_locations",
        "depths_cm", "horizon_days", "test_fraction", "max_gap_days", "forecast_day",
        "index_kind", "band_mapping", "soil_model", "index_model", "soil_train",
        "index_train", "grid", "variogram",
    }
    _reject_unknown("config", raw, allowed)
    base_dir = path.parent

    seed = int(_require(raw, "seed", int, "config"))
    if seed < 0:
        raise ConfigError("seed must be nonnegative")
    sensor_csv = str(_require(raw, "sensor_csv", str, "config"))
    if not (base_dir / sensor_csv if not Path(sensor_csv).is_absolute() else Path(sensor_csv)).is_file():
        raise ConfigError(f"sensor_csv does not exist: {sensor_csv}")
    image_manifest = _optional(raw, "image_manifest", str, "config", None)
    if image_manifest is not None:
        p = Path(image_manifest)
        if not (p if p.is_absolute() else base_dir / p).is_file():
            raise ConfigError(f"image_manifest does not exist: {image_manifest}")

    locations_raw = _optional(raw, "sensor_locations", dict, "config", {})
    locations: dict[str, tuple[float, float]] = {}
    for sid, xy in locations_raw.items():
        if not (isinstance(xy, list) and len(xy) == 2 and all(isinstance(c, (int, float)) for c in xy)):
            raise ConfigError(f"sensor_locations['{sid}'] must be [x, y]")
        locations[str(sid)] = (float(xy[0]), float(xy[1]))

    depths_raw = _optional(raw, "depths_cm", list, "config", None)
    depths: tuple[int, ...] | None = None
    if depths_raw is not None:
        if not depths_raw or not all(isinstance(d, int) and not isinstance(d, bool) for d in depths_raw):
            raise ConfigError("depths_cm must be a nonempty list of integers")
        depths = tuple(sorted(set(depths_raw)))

    horizon = int(_optional(raw, "horizon_days", int, "config", DEFAULT_HORIZON))
    if horizon < 1:
        raise ConfigError("horizon_days must be >= 1")
    test_fraction = float(_optional(raw, "test_fraction", (int, float), "config", 0.2))
    if not (0.0 < test_fraction < 1.0):
        raise ConfigError("test_fraction must be in (0, 1)")
    max_gap = int(_optional(raw, "max_gap_days", int, "config", DEFAULT_MAX_GAP))
    forecast_day = int(_optional(raw, "forecast_day", int, "config", horizon))
    if not (1 <= forecast_day <= horizon):
        raise ConfigError(f"forecast_day must be in 1..{horizon}")

    index_kind = str(_optional(raw, "index_kind", str, "config", "NDVI"))
    if index_kind not in vegindex.INDEX_KINDS:
        raise ConfigError(f"index_kind must be one of {vegindex.INDEX_KINDS}")
    band_raw = _optional(raw, "band_mapping", dict, "config", dict(_DEFAULT_BAND_MAPPING))
    _reject_unknown("band_mapping", band_raw, {"red", "nir", "swir"})
    band_mapping = {k: str(v) for k, v in band_raw.items()}
    needed = {"red", "nir"} if index_kind == "NDVI" else {"nir", "swir"}
    missing = sorted(needed - set(band_mapping))
    if missing:
        raise ConfigError(f"band_mapping for {index_kind} needs key(s): {', '.join(missing)}")

    soil_raw = _optional(raw, "soil_model", dict, "config", {})
    _reject_unknown("soil_model", soil_raw, {"input_length", "encoder_hidden", "decoder_hidden", "dense_hidden"})
    soil_model = SoilModelSpec(
        input_length=int(_optional(soil_raw, "input_length", int, "soil_model", 30)),
        encoder_hidden=int(_optional(soil_raw, "encoder_hidden", int, "soil_model", 200)),
        decoder_hidden=int(_optional(soil_raw, "decoder_hidden", int, "soil_model", 200)),
        dense_hidden=int(_optional(soil_raw, "dense_hidden", int, "soil_model", 100)),
    )
    index_raw = _optional(raw, "index_model", dict, "config", {})
    _reject_unknown("index_model", index_raw, {"encoder_hidden", "decoder_hidden", "dense_hidden"})
    index_model = IndexModelSpec(
        encoder_hidden=int(_optional(index_raw, "encoder_hidden", int, "index_model", 50)),
        decoder_hidden=int(_optional(index_raw, "decoder_hidden", int, "index_model", 50)),
        dense_hidden=int(_optional(index_raw, "dense_hidden", int, "index_model", 20)),
    )
    soil_train = _parse_train("soil_train", _optional(raw, "soil_train", dict, "config", {}), TrainConfig())
    index_train = _parse_train("index_train", _optional(raw, "index_train", dict, "config", {}), TrainConfig())

    grid_raw = _optional(raw, "grid", dict, "config", {})
    _reject_unknown("grid", grid_raw, {"nx", "ny", "cell_size", "x0", "y0"})
    grid = GridGeometry(
        nx=int(_optional(grid_raw, "nx", int, "grid", 16)),
        ny=int(_optional(grid_raw, "ny", int, "grid", 16)),
        cell_size=float(_optional(grid_raw, "cell_size", (int, float), "grid", 10.0)),
        x0=float(_optional(grid_raw, "x0", (int, float), "grid", 0.0)),
        y0=float(_optional(grid_raw, "y0", (int, float), "grid", 0.0)),
    )
    vario_raw = _optional(raw, "variogram", dict, "config", None)
    variogram = None
    if vario_raw is not None:
        _reject_unknown("variogram", vario_raw, {"nugget", "sill", "range_a"})
        variogram = Variogram(
            nugget=float(_require(vario_raw, "nugget", (int, float), "variogram")),
            sill=float(_require(vario_raw, "sill", (int, float), "variogram")),
            range_a=float(_require(vario_raw, "range_a", (int, float), "variogram")),
        )

    return RunConfig(
        base_dir=base_dir,
        seed=seed,
        sensor_csv=sensor_csv,
        image_manifest=image_manifest,
        output_dir=str(_optional(raw, "output_dir", str, "config", "out")),
        sensor_locations=locations,
        depths_cm=depths,
        horizon_days=horizon,
        test_fraction=test_fraction,
        max_gap_days=max_gap,
        forecast_day=forecast_day,
        index_kind=index_kind,
        band_mapping=band_mapping,
        soil_model=soil_model,
        index_model=index_model,
        soil_train=soil_train,
        index_train=index_train,
        grid=grid,
        variogram=variogram,
    )


def serialize_config(config: RunConfig) -> dict:
    """Canonical JSON-ready form; parse(serialize(c)) reproduces c."""
    payload: dict = {
        "seed": config.seed,
        "sensor_csv": config.sensor_csv,
        "output_dir": config.output_dir,
        "sensor_locations": {k: [x, y] for k, (x, y) in sorted(config.sensor_locations.items())},
        "horizon_days": config.horizon_days,
        "test_fraction": config.test_fraction,
        "max_gap_days": config.max_gap_days,
        "forecast_day": config.forecast_day,
        "index_kind": config.index_kind,
        "band_mapping": dict(sorted(config.band_mapping.items())),
        "soil_model": dataclasses.asdict(config.soil_model),
        "index_model": dataclasses.asdict(config.index_model),
        "soil_train": _train_payload(config.soil_train),
        "index_train": _train_payload(config.index_train),
        "grid": dataclasses.asdict(config.grid),
    }
    if config.image_manifest is not None:
        payload["image_manifest"] = config.image_manifest
    if config.depths_cm is not None:
        payload["depths_cm"] = list(config.depths_cm)
    if config.variogram is not None:
        payload["variogram"] = dataclasses.asdict(config.variogram)
    return payload


def _train_payload(tc: TrainConfig) -> dict:
    return {
        "learning_rate": tc.learning_rate,
        "epochs": tc.epochs,
        "batch_size": tc.batch_size,
        "loss": tc.loss,
        "adam_beta1": tc.adam_beta1,
        "adam_beta2": tc.adam_beta2,
        "adam_epsilon": tc.adam_epsilon,
    }


def _derive_seed(master: int, *parts: int) -> int:
    return int(np.random.SeedSequence((master, *parts)).generate_state(1)[0])


# -- soil stage -------------------------------------------------------------------

@dataclass(frozen=True)
class _DepthData:
    """Scaled window splits for one depth, pooled across sensors."""

    depth_cm: int
    scaler: Scaler
    fit: WindowSet
    val: WindowSet | None
    test: WindowSet
    last_inputs: dict[str, np.ndarray]   # per sensor: scaled (L, 4) tail


def _prepare_depth(
    records, sensor_ids: list[str], depth: int, config: RunConfig
) -> _DepthData:
    length = config.soil_model.input_length
    horizon = config.horizon_days
    series_list = []
    for sid in sensor_ids:
        try:
            series_list.append(timeseries.build_series(records, sid, depth, max_gap=config.max_gap_days))
        except DataError:
            continue
    if not series_list:
        raise DataError(f"no usable sensor series at depth {depth}")

    blocks = []
    for series in series_list:
        n_windows = series.length - length - horizon + 1
        if n_windows < 2:
            raise EmptySplitError(
                f"sensor {series.sensor_id} depth {depth}: {series.length} days give {max(n_windows, 0)} windows; need >= 2"
            )
        n_train = int(np.floor(n_windows * (1.0 - config.test_fraction)))
        if n_train < 1 or n_train >= n_windows:
            raise EmptySplitError(f"test_fraction {config.test_fraction} leaves an empty split at depth {depth}")
        blocks.append(series.features[: n_train + length + horizon - 1])
    scaler = timeseries.fit_scaler_pooled(blocks)

    fit_parts, val_parts, test_parts = [], [], []
    last_inputs: dict[str, np.ndarray] = {}
    for series in series_list:
        scaled = series.with_features(scaler.apply(series.features))
        windows = timeseries.make_windows(scaled, input_length=length, horizon=horizon)
        train_ws, test_ws = timeseries.chrono_split(windows, config.test_fraction)
        n_val = max(1, int(np.floor(train_ws.n_samples * _VAL_FRACTION)))
        if train_ws.n_samples - n_val >= 1:
            fit_parts.append(WindowSet(train_ws.inputs[:-n_val], train_ws.targets[:-n_val]))
            val_parts.append(WindowSet(train_ws.inputs[-n_val:], train_ws.targets[-n_val:]))
        else:
            fit_parts.append(train_ws)
        test_parts.append(test_ws)
        last_inputs[series.sensor_id] = scaled.features[-length:]
    return _DepthData(
        depth_cm=depth,
        scaler=scaler,
        fit=timeseries.concat_windows(fit_parts),
        val=timeseries.concat_windows(val_parts) if val_parts else None,
        test=timeseries.concat_windows(test_parts),
        last_inputs=last_inputs,
    )


def _eval_on_moisture_scale(
    model: Seq2SeqModel, test: WindowSet, scaler: Scaler
) -> tuple[float, float]:
    """(model RMSE, persistence RMSE) on the unscaled moisture scale."""
    preds = lstm.predict_batch(model, test.inputs)
    targets = scaler.invert_feature(test.targets[:, :, 0], 0)
    last = scaler.invert_feature(test.inputs[:, -1, 0], 0)
    persistence = np.repeat(last[:, None], test.horizon, axis=1)
    model_rmse = float(np.sqrt(np.mean((preds - targets) ** 2)))
    persist_rmse = float(np.sqrt(np.mean((persistence - targets) ** 2)))
    return model_rmse, persist_rmse


def run_soil_stage(
    records, config: RunConfig
) -> tuple[list[DepthResult], dict[int, Seq2SeqModel], dict[int, dict[str, tuple[float, ...]]]]:
    """Train, evaluate, and forecast one model per depth.

    Returns per-depth results (metrics + per-sensor 14-day forecasts,
    clipped to the physical moisture range), trained models, and the
    forecast table used by the kriging stage.
    """
    sensor_ids = sorted({r.sensor_id for r in records})
    depths = config.depths_cm or tuple(sorted({r.depth_cm for r in records}))
    results: list[DepthResult] = []
    models: dict[int, Seq2SeqModel] = {}
    forecast_table: dict[int, dict[str, tuple[float, ...]]] = {}
    for depth in depths:
        data = _prepare_depth(records, sensor_ids, depth, config)
        shape = ModelShape(
            input_dim=len(timeseries.FEATURE_NAMES),
            encoder_hidden=config.soil_model.encoder_hidden,
            decoder_hidden=config.soil_model.decoder_hidden,
            dense_hidden=config.soil_model.dense_hidden,
            horizon=config.horizon_days,
        )
        model = lstm.init_params(shape, seed=_derive_seed(config.seed, 11, depth, 0))
        model = dataclasses.replace(model, scaler=data.scaler)
        train_config = dataclasses.replace(config.soil_train, seed=_derive_seed(config.seed, 11, depth, 1))
        model, _history = lstm.train(model, data.fit, data.val, train_config)
        rmse, persist = _eval_on_moisture_scale(model, data.test, data.scaler)

        forecasts: dict[str, tuple[float, ...]] = {}
        for sid in sorted(data.last_inputs):
            raw = lstm.predict(model, data.last_inputs[sid])
            forecasts[sid] = tuple(float(v) for v in np.clip(raw, 0.0, 100.0))
        models[depth] = model
        forecast_table[depth] = forecasts
        results.append(
            DepthResult(
                depth_cm=depth,
                test_rmse=rmse,
                persistence_rmse=persist,
                n_train_windows=data.fit.n_samples + (data.val.n_samples if data.val else 0),
                n_test_windows=data.test.n_samples,
                forecasts=forecasts,
                loo_score=None,
                variogram=None,
                n_samples=0,
            )
        )
    return results, models, forecast_table


# -- index stage ------------------------------------------------------------------

def _split_by_run(windows: WindowSet, run_ids: np.ndarray, test_fraction: float):
    runs = np.unique(run_ids)
    n_train_runs = int(np.floor(len(runs) * (1.0 - test_fraction)))
    if n_train_runs < 1 or n_train_runs >= len(runs):
        raise EmptySplitError(
            f"{len(runs)} window runs cannot split with test_fraction {test_fraction}"
        )
    train_runs = set(runs[:n_train_runs].tolist())
    train_mask = np.array([r in train_runs for r in run_ids])
    train = WindowSet(windows.inputs[train_mask], windows.targets[train_mask])
    test = WindowSet(windows.inputs[~train_mask], windows.targets[~train_mask])
    val = None
    if n_train_runs >= 2:
        last_run = max(train_runs)
        val_mask = train_mask & (run_ids == last_run)
        fit_mask = train_mask & (run_ids != last_run)
        val = WindowSet(windows.inputs[val_mask], windows.targets[val_mask])
        train = WindowSet(windows.inputs[fit_mask], windows.targets[fit_mask])
    return train, val, test


def run_index_stage(
    stack: vegindex.ImageStack, config: RunConfig
) -> tuple[IndexResult, Seq2SeqModel, vegindex.IndexImage]:
    """Train the shared pixel model, evaluate on held-out runs, forecast.

    The forecast target date is the last image date plus the
    configured forecast day; the predicted image reuses the stack's
    validity mask.
    """
    windows, run_ids = vegindex.stack_windows_for_training(stack)
    fit, val, test = _split_by_run(windows, run_ids, config.test_fraction)
    scaler = timeseries.fit_scaler_pooled([fit.inputs.reshape(-1, fit.input_dim)])
    fit = WindowSet(scaler.apply(fit.inputs), scaler.apply_feature(fit.targets, 0))
    test_scaled = WindowSet(scaler.apply(test.inputs), scaler.apply_feature(test.targets, 0))
    if val is not None:
        val = WindowSet(scaler.apply(val.inputs), scaler.apply_feature(val.targets, 0))

    shape = ModelShape(
        input_dim=2,
        encoder_hidden=config.index_model.encoder_hidden,
        decoder_hidden=config.index_model.decoder_hidden,
        dense_hidden=config.index_model.dense_hidden,
        horizon=1,
    )
    model = lstm.init_params(shape, seed=_derive_seed(config.seed, 22, 0))
    model = dataclasses.replace(model, scaler=scaler)
    train_config = dataclasses.replace(config.index_train, seed=_derive_seed(config.seed, 22, 1))
    model, _history = lstm.train(model, fit, val, train_config)

    preds = np.clip(lstm.predict_batch(model, test_scaled.inputs)[:, 0], -1.0, 1.0)
    targets = test.targets[:, 0, 0]
    persistence = test.inputs[:, -1, 0]
    result = IndexResult(
        test_rmse=float(np.sqrt(np.mean((preds - targets) ** 2))),
        test_mae=float(np.mean(np.abs(preds - targets))),
        persistence_rmse=float(np.sqrt(np.mean((persistence - targets) ** 2))),
        n_train_windows=fit.n_samples + (val.n_samples if val is not None else 0),
        n_test_windows=test.n_samples,
        forecast_target=(stack.entries[-1][0] + timedelta(days=config.forecast_day)).isoformat(),
    )

    target_date = stack.entries[-1][0] + timedelta(days=config.forecast_day)
    flat_windows, mask = vegindex.flatten_stack(stack, target_date)
    flat_preds = vegindex.predict_pixels(model, flat_windows, mask)
    image = vegindex.reshape_to_image(
        flat_preds,
        stack.entries[0][1].width,
        stack.entries[0][1].height,
        index_kind=config.index_kind,
    )
    return result, model, image


# -- kriging stage ----------------------------------------------------------------

def run_kriging_stage(
    forecast_table: dict[int, dict[str, tuple[float, ...]]],
    config: RunConfig,
    forecast_day: int,
) -> tuple[kriging.MoistureVolume, dict[int, tuple[float | None, Variogram, int]]]:
    """Krige the chosen forecast day at every depth into a volume.

    Sensors without a configured location are skipped by name in the
    error message when none remain. A configured variogram override is
    used verbatim; otherwise one is fitted from the forecast samples.
    """
    layers: list[kriging.DepthLayer] = []
    stats: dict[int, tuple[float | None, Variogram, int]] = {}
    for depth in sorted(forecast_table):
        forecasts = forecast_table[depth]
        samples = []
        for sid, values in sorted(forecasts.items()):
            if sid not in config.sensor_locations:
                continue
            x, y = config.sensor_locations[sid]
            samples.append(SamplePoint(x=x, y=y, value=values[forecast_day - 1]))
        if not samples:
            known = ", ".join(sorted(config.sensor_locations)) or "(none)"
            raise DataError(
                f"no sensor at depth {depth} has a configured location; locations exist for: {known}"
            )
        if config.variogram is not None:
            variogram = config.variogram
        else:
            variogram = kriging.fit_variogram(kriging.empirical_variogram(samples))
        score: float | None = None
        if len(samples) >= 3:
            try:
                score = kriging.loo_score(samples, variogram)
            except DataError:
                score = None
        model = kriging.build_model(samples, variogram)
        values, variance = kriging.interpolate_grid(model, config.grid)
        layers.append(kriging.DepthLayer(depth_cm=depth, geometry=config.grid, values=values, variance=variance))
        stats[depth] = (score, variogram, len(samples))
    return kriging.stack_depths(layers), stats


# -- orchestration ----------------------------------------------------------------

def _promote_partial(partial: Path, out_dir: Path) -> None:
    # Merge, don't clobber: stages share directories (train-soil and
    # train-index both promote into checkpoints/).
    for child in sorted(partial.iterdir()):
        target = out_dir / child.name
        if child.is_dir() and target.is_dir():
            _promote_partial(child, target)
            continue
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        child.replace(target)
    partial.rmdir()


def _relative_artifacts(paths: dict[str, Path], out_dir: Path) -> dict[str, str]:
    return {k: p.relative_to(out_dir).as_posix() for k, p in paths.items()}


def run_forecast(
    config: RunConfig,
    out_dir: str | Path | None = None,
    forecast_day: int | None = None,
) -> tuple[ForecastReport, Path]:
    """Execute every stage and write artifacts plus report.json.

    Outputs are staged under `<out>/.partial` and promoted only when
    the whole run succeeds, so a failed run never leaves a partial
    final report. Identical (config, seed, inputs) produce
    byte-identical outputs.
    """
    out_dir = Path(out_dir) if out_dir is not None else config.output_path
    day = forecast_day if forecast_day is not None else config.forecast_day
    if not (1 <= day <= config.horizon_days):
        raise ConfigError(f"forecast day must be in 1..{config.horizon_days}")
    out_dir.mkdir(parents=True, exist_ok=True)
    partial = out_dir / ".partial"
    if partial.exists():
        shutil.rmtree(partial)
    partial.mkdir()

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as e:
            raise StageError(name, e) from e

    records = stage("load", timeseries.load_sensor_csv, config.sensor_csv_path)
    stack = None
    if config.image_manifest_path is not None:
        stack = stage(
            "load", vegindex.load_index_stack, config.image_manifest_path, config.index_kind, config.band_mapping
        )

    depth_results, soil_models, forecast_table = stage("soil", run_soil_stage, records, config)

    index_result = None
    index_model = None
    index_image = None
    if stack is not None:
        index_result, index_model, index_image = stage("index", run_index_stage, stack, config)

    volume, kriging_stats = stage("kriging", run_kriging_stage, forecast_table, config, day)
    merged = [
        dataclasses.replace(
            r,
            loo_score=kriging_stats[r.depth_cm][0],
            variogram=kriging_stats[r.depth_cm][1],
            n_samples=kriging_stats[r.depth_cm][2],
        )
        for r in depth_results
    ]

    def export() -> dict[str, Path]:
        paths: dict[str, Path] = {}
        ckpt_dir = partial / "checkpoints"
        ckpt_dir.mkdir()
        for depth, model in sorted(soil_models.items()):
            p = ckpt_dir / f"soil_depth_{depth:03d}.ckpt"
            lstm.save_model(model, p)
            paths[f"checkpoint_soil_{depth}"] = p
        if index_model is not None:
            p = ckpt_dir / "index.ckpt"
            lstm.save_model(index_model, p)
            paths["checkpoint_index"] = p
        forecasts_path = partial / "forecasts.json"
        with forecasts_path.open("w", encoding="utf-8") as fh:
            json.dump(
                {str(d): {s: list(v) for s, v in sorted(t.items())} for d, t in sorted(forecast_table.items())},
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")
        paths["forecasts"] = forecasts_path
        volume_dir = partial / "volume"
        paths["volume_manifest"] = kriging.export_volume(volume, volume_dir)
        grid_csv = partial / "grid.csv"
        kriging.export_grid_csv(volume, grid_csv)
        paths["grid_csv"] = grid_csv
        if index_image is not None:
            img_grid = vegindex.BandGrid(
                width=index_image.width,
                height=index_image.height,
                nodata=index_image.nodata,
                band_names=(config.index_kind,),
                data=index_image.values[None, :, :].astype(np.float32),
            )
            img_path = partial / "index_forecast.bgrid"
            vegindex.write_bandgrid(img_grid, img_path)
            vegindex.write_pgm(index_image.values, partial / "index_forecast.pgm", nodata=index_image.nodata)
            paths["index_forecast"] = img_path
        return paths

    artifact_paths = stage("export", export)
    artifacts = {k: (out_dir / p.relative_to(partial)).relative_to(out_dir).as_posix() for k, p in artifact_paths.items()}
    artifacts["report"] = "report.json"
    report = ForecastReport(
        seed=config.seed,
        forecast_day=day,
        depths=tuple(merged),
        index=index_result,
        artifacts=artifacts,
    )

    def finalize() -> None:
        with (partial / "report.json").open("w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        _promote_partial(partial, out_dir)

    stage("export", finalize)
    return report, out_dir


# -- gradient-check command ---------------------------------------------------------

def cmd_gradcheck(
    seed: int = 0,
    corrupt: bool = False,
    hidden: int = 8,
    dense: int = 6,
    length: int = 6,
    horizon: int = 3,
) -> dict:
    """Finite-difference audit of both toy architectures.

    The soil-shaped toy honors the dimension arguments; the index toy
    is fixed at its production shape scaled down. Probe targets sit
    near the model's own predictions so central differences stay clear
    of cancellation noise. `corrupt` doubles one analytic gradient
    entry to prove the check can fail.
    """
    reports = {}
    configs = {
        "soil": ModelShape(4, hidden, hidden, dense, horizon=horizon),
        "index": ModelShape(2, 5, 5, 4, horizon=1),
    }
    lengths = {"soil": length, "index": 5}
    for name, shape in configs.items():
        rng = np.random.default_rng(np.random.SeedSequence((seed, 33, 1 if name == "soil" else 2)))
        model = lstm.init_params(shape, seed=_derive_seed(seed, 33, shape.encoder_hidden))
        x = rng.normal(0.0, 1.0, size=(lengths[name], shape.input_dim))
        preds, _ = lstm.forward_batch(model, x[None, :, :])
        targets = preds[0] + 0.1 * rng.normal(0.0, 1.0, size=preds[0].shape)
        report = lstm.gradient_check(
            model,
            (x, targets),
            corrupt="encoder.w_i" if corrupt else None,
            seed=seed,
        )
        reports[name] = {
            "max_rel_error": report.max_rel_error,
            "worst_param": report.worst_param,
            "n_checked": report.n_checked,
            "tolerance": report.tolerance,
            "passed": report.passed,
        }
    reports["passed"] = all(reports[k]["passed"] for k in ("soil", "index"))
    return reports
