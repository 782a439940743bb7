"""
Línea de comandos del pipeline de severidad de heridas.

Subcomandos:
    fixture   genera un conjunto sintético separable por color
    prepare   particiona, recorta y aumenta los ROIs de un experimento
    train     entrena el modelo y guarda los dos checkpoints y el historial
    evaluate  evalúa un checkpoint sobre el test (o predicciones inyectadas)
    report    agrega los informes en tablas modelo x tarea
    rubric    aplica la tabla Rojo-Amarillo-Verde a una observación
    grid      escribe un fichero de configuración por experimento de las tablas

Códigos de salida: 0 correcto, 2 configuración, 3 datos, 4 modelo, 1 otros.
"""

import argparse
import json
import logging
import os
import shutil
import sys

import pandas as pd

from heridas import rubric
from heridas.config import CONFIG_FILE, ExperimentConfig, derive_seed, load_config, save_config
from heridas.dataset_core import FixtureSpec, SeverityClass, filter_classes, generate_fixture, load_manifest, \
    load_raster, write_fixture
from heridas.errors import EXIT_OK, EXIT_UNEXPECTED, ArtifactSpecMismatch, HeridasError, InvalidConfig, \
    MalformedPredictions, ObservationError, UnknownLabel
from heridas.model_zoo import MULTIZOOM_PRESETS, STACKED_PRESETS, Family, ModelHandle, build_model, list_backbones
from heridas.results_store import REPORT_FILE, ResultsStore
from heridas.roi_prep import MULTIZOOM, ZoomChannel, align_channels, load_samples, prepare_partitions, \
    write_prepared
from heridas.train_eval import HEADLINE_POLICY, CheckpointPolicy, evaluate, evaluate_predictions, format_percent, \
    train

logger = logging.getLogger(__name__)

PREPARED_DIR = "prepared"
MODEL_DIR = "model"
EVAL_DIR = "eval"
HISTORY_FILE = "history.csv"

# Modelos que se repiten en zoom-out y en las tareas binarias
GRID_SINGLES = ("VGG16", "VGG19", "InceptionV3", "NasNetLarge", "Xception")
GRID_STACKED = ("M1", "M3", "M4")
GRID_TABLES = ("2", "3", "4", "5")


def _load(args):
    if not args.config:
        raise InvalidConfig("Falta --config")
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _output_dir(args, config):
    return os.path.abspath(args.out) if args.out else config.output_dir


def _pairs(root, split, config):
    """Pares (entrada, índice de clase) de un split preparado"""
    task = config.task_def
    if config.channel == MULTIZOOM:
        aligned = align_channels({c: load_samples(root, split, c) for c in ZoomChannel})
        return [(rasters, task.index_of(label)) for rasters, label, _ in aligned]
    channel = "Z0" if split == "test" else config.channel
    return [(s.raster, task.index_of(s.label)) for s in load_samples(root, split, channel)]


def cmd_fixture(args):
    """Escribe un conjunto sintético y su manifiesto"""
    seed = args.seed if args.seed is not None else 0
    spec = FixtureSpec(per_class=args.per_class, width=args.size, height=args.size)
    fixture = generate_fixture(spec, derive_seed(seed, "fixture"))
    out = args.out or "fixture"
    path = write_fixture(fixture, out)
    print(path)
    return EXIT_OK


def cmd_prepare(args):
    """Particiona, recorta y aumenta; rehace el directorio prepared desde cero"""
    config = _load(args)
    out = os.path.join(_output_dir(args, config), PREPARED_DIR)
    records = load_manifest(config.manifest_path)
    task = config.task_def
    if task.is_binary:
        records = filter_classes(records, task.classes)
    base_dir = os.path.dirname(config.manifest_path)

    prepared = prepare_partitions(
        records, config.channel, lambda record: load_raster(record, base_dir),
        ratio=config.ratio, val_fraction=config.val_fraction,
        split_seed=config.seed_for("split"), val_seed=config.seed_for("val"),
        fill=config.fill, workers=config.workers,
    )
    if os.path.exists(out):
        shutil.rmtree(out)
    os.makedirs(out)
    index = write_prepared(prepared, out, workers=config.workers)
    save_config(config, os.path.join(out, CONFIG_FILE))
    print(f"{len(index)} muestras preparadas en {out}")
    return EXIT_OK


def cmd_train(args):
    """Entrena y guarda un artefacto por política de checkpoint"""
    config = _load(args)
    root = _output_dir(args, config)
    prepared = os.path.join(root, PREPARED_DIR)
    train_set = _pairs(prepared, "train", config)
    val_set = _pairs(prepared, "val", config)

    handle = build_model(config.model)
    result = train(handle, train_set, val_set, config.training)

    model_dir = os.path.join(root, MODEL_DIR)
    for policy, trained in result.handles.items():
        trained.save(os.path.join(model_dir, policy.value))
    result.history.to_csv(os.path.join(model_dir, HISTORY_FILE))
    save_config(config, os.path.join(model_dir, CONFIG_FILE))
    with open(os.path.join(model_dir, "checkpoints.json"), "w", encoding="utf-8") as f:
        json.dump({p.value: e for p, e in result.history.checkpoints.items()}, f, indent=2, sort_keys=True)

    for policy, epoch in result.history.checkpoints.items():
        print(f"{policy.value}: época {epoch}, val_acc {format_percent(result.history.val_accuracy[epoch - 1])}")
    return EXIT_OK


def _label_indices(path, column, values, task):
    indices = []
    # la fila 1 es la cabecera
    for line, value in enumerate(values, start=2):
        try:
            indices.append(task.index_of(SeverityClass.from_label(value)))
        except UnknownLabel as e:
            raise MalformedPredictions(f"{path}, línea {line}, columna {column}: {e}") from None
    return indices


def _read_predictions(path, task, gold_pairs):
    """Índices (predicho, real) de un CSV con columnas predicted[,gold]"""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if "predicted" not in df.columns:
        raise MalformedPredictions(f"{path}: falta la columna 'predicted'")
    predicted = _label_indices(path, "predicted", df["predicted"], task)
    if "gold" in df.columns:
        gold = _label_indices(path, "gold", df["gold"], task)
    else:
        gold = [y for _, y in gold_pairs()]
    if len(predicted) != len(gold):
        raise MalformedPredictions(f"{path}: {len(predicted)} predicciones para {len(gold)} muestras de test")
    return predicted, gold


def cmd_evaluate(args):
    """Evalúa un checkpoint (o predicciones de un CSV) sobre el test"""
    config = _load(args)
    root = _output_dir(args, config)
    policy = CheckpointPolicy(args.checkpoint)
    channel = config.channel
    test_pairs = lambda: _pairs(os.path.join(root, PREPARED_DIR), "test", config)  # noqa: E731

    if args.predictions:
        predicted, gold = _read_predictions(args.predictions, config.task_def, test_pairs)
        report = evaluate_predictions(predicted, gold, config.task_def, channel,
                                      config.model.to_dict(), policy)
    else:
        handle = ModelHandle.load(os.path.join(root, MODEL_DIR, policy.value))
        if handle.spec != config.model:
            raise ArtifactSpecMismatch("El checkpoint no corresponde al modelo de la configuración")
        report = evaluate(handle, test_pairs(), config.task_def, channel, policy)

    out = os.path.join(root, EVAL_DIR, policy.value)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, REPORT_FILE), "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    with open(os.path.join(out, "confusion.txt"), "w", encoding="utf-8") as f:
        f.write(report.render() + "\n")
    report.metrics_frame().to_csv(os.path.join(out, "metrics.csv"), index=False, lineterminator="\n")

    print(report.render())
    print(f"Accuracy: {format_percent(report.accuracy, 2)}")
    return EXIT_OK


def cmd_report(args):
    """Agrega los report.json de un directorio en una tabla"""
    store = ResultsStore()
    try:
        store.ingest_dir(args.results)
        checkpoint = None if args.checkpoint == "all" else args.checkpoint
        text = store.render(args.format, checkpoint)
    finally:
        store.close()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text if text.endswith("\n") else text + "\n")
    print(text)
    return EXIT_OK


def cmd_rubric(args):
    """Clasifica una observación con la tabla Rojo-Amarillo-Verde"""
    try:
        with open(args.observation, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ObservationError(str(e)) from None
    aggregate, verdicts = rubric.stratify(rubric.parse_observation(text))
    print(rubric.render(aggregate, verdicts))
    return EXIT_OK


def grid_experiments(tables=GRID_TABLES):
    """(nombre, tarea, canal, familia, backbones) de cada experimento de las tablas"""
    singles = [b.name for b in list_backbones() if not b.is_toy]
    experiments = []
    if "2" in tables:
        experiments += [(f"t2-z0-{b}", "multiclass3", "Z0", Family.SINGLE, (b,)) for b in singles]
        experiments += [(f"t2-z0-{m}", "multiclass3", "Z0", Family.STACKED2, bs) for m, bs in STACKED_PRESETS.items()]
    if "3" in tables:
        for channel in ("Z1", "Z2", "Z3"):
            experiments += [(f"t3-{channel.lower()}-{b}", "multiclass3", channel, Family.SINGLE, (b,))
                            for b in GRID_SINGLES]
            experiments += [(f"t3-{channel.lower()}-{m}", "multiclass3", channel, Family.STACKED2, STACKED_PRESETS[m])
                            for m in GRID_STACKED]
    if "4" in tables:
        experiments += [(f"t4-{m}", "multiclass3", MULTIZOOM, Family.MULTIZOOM4, bs)
                        for m, bs in MULTIZOOM_PRESETS.items()]
    if "5" in tables:
        for task in ("green_vs_yellow", "green_vs_red", "yellow_vs_red"):
            experiments += [(f"t5-{task}-{b}", task, "Z0", Family.SINGLE, (b,)) for b in GRID_SINGLES]
            experiments += [(f"t5-{task}-{m}", task, "Z0", Family.STACKED2, STACKED_PRESETS[m]) for m in GRID_STACKED]
    return experiments


def cmd_grid(args):
    """Escribe y valida una configuración por experimento de la rejilla"""
    base = _load(args)
    out = os.path.abspath(args.out or "grid")
    tables = GRID_TABLES if args.table == "all" else (args.table,)
    os.makedirs(out, exist_ok=True)
    written = 0
    for name, task, channel, family, backbones in grid_experiments(tables):
        data = base.to_dict()
        data.update(name=name, task=task, channel=channel, manifest=base.manifest_path,
                    output=os.path.join("runs", name))
        model = dict(data["model"], family=family.value, backbones=list(backbones))
        model.pop("head", None)
        data["model"] = model
        training = data["training"]
        training.pop("loss", None)
        path = os.path.join(out, f"{name}.yaml")
        # valida cada experimento antes de escribirlo
        config = ExperimentConfig.from_dict(data, out)
        save_config(config, path)
        written += 1
    print(f"{written} configuraciones escritas en {out}")
    return EXIT_OK


COMMANDS = {
    "fixture": cmd_fixture,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "rubric": cmd_rubric,
    "grid": cmd_grid,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="heridas", description="Clasificación de severidad de heridas")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="fichero YAML del experimento")
        p.add_argument("--out", help="directorio de salida")
        p.add_argument("--seed", type=int, default=None, help="sustituye la semilla de la configuración")
        return p

    p = common(sub.add_parser("fixture", help="genera datos sintéticos"), config=False)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=128)

    common(sub.add_parser("prepare", help="prepara los ROIs"))
    common(sub.add_parser("train", help="entrena un modelo"))

    p = common(sub.add_parser("evaluate", help="evalúa un checkpoint"))
    p.add_argument("--checkpoint", default=HEADLINE_POLICY.value, choices=[c.value for c in CheckpointPolicy])
    p.add_argument("--predictions", help="CSV con columnas predicted[,gold] en lugar del modelo")

    p = sub.add_parser("report", help="tablas de resultados")
    p.add_argument("results", help="directorio con informes report.json")
    p.add_argument("--format", default="md", choices=["md", "csv"])
    p.add_argument("--checkpoint", default=HEADLINE_POLICY.value,
                   choices=[c.value for c in CheckpointPolicy] + ["all"])
    p.add_argument("--out", help="fichero donde guardar la tabla")

    p = sub.add_parser("rubric", help="tabla Rojo-Amarillo-Verde")
    p.add_argument("observation", help="observación en YAML o JSON")

    p = common(sub.add_parser("grid", help="configuraciones de las tablas de experimentos"))
    p.add_argument("--table", default="all", choices=list(GRID_TABLES) + ["all"])
    return parser


def main(argv=None):
    """Punto de entrada; devuelve el código de salida"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except HeridasError as e:
        logger.debug("Error en %s", args.command, exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:  # noqa: BLE001
        logger.exception("Error inesperado en %s", args.command)
        print(f"error inesperado: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
