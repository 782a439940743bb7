"""
Agregación de informes de evaluación en tablas modelo x tarea.

Los ``report.json`` de cada experimento se cargan en una base SQLite en
memoria (SQLAlchemy ORM) y se consultan en el orden de las tablas de
resultados: primero transfer learning, luego modelos apilados y por último
multi-zoom, y dentro de cada familia en el orden del registro de backbones.
"""

import json
import logging
import os

import pandas as pd
from sqlalchemy import Column, Float, Integer, String, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
from tabulate import tabulate

from heridas.errors import NoResults
from heridas.model_zoo import MULTIZOOM_PRESETS, STACKED_PRESETS, Family, ModelSpec, list_backbones, model_label, \
    model_type
from heridas.train_eval import TASKS, EvalReport, format_percent

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
_TASK_ORDER = list(TASKS)
_CHANNEL_ORDER = ["Z0", "Z1", "Z2", "Z3", "multizoom"]
_FAMILY_RANK = {Family.SINGLE: 0, Family.STACKED2: 1, Family.MULTIZOOM4: 2}

Base = declarative_base()


class EvalRun(Base):
    __tablename__ = "eval_runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    source = Column(String, nullable=True)
    task = Column(String, nullable=False)
    task_title = Column(String, nullable=False)
    channel = Column(String, nullable=False)
    checkpoint = Column(String, nullable=True)
    model_type = Column(String, nullable=False)
    model_label = Column(String, nullable=False)
    family_rank = Column(Integer, nullable=False)
    model_rank = Column(Integer, nullable=False)
    accuracy = Column(Float, nullable=False)

    def __repr__(self):
        return f"<EvalRun {self.model_label} {self.task}/{self.channel} {self.accuracy:.4f}>"


def _model_rank(spec):
    if spec.family is Family.SINGLE:
        names = [b.name for b in list_backbones()]
        return names.index(spec.backbones[0]) if spec.backbones[0] in names else len(names)
    presets = list((STACKED_PRESETS if spec.family is Family.STACKED2 else MULTIZOOM_PRESETS).values())
    return presets.index(spec.backbones) if spec.backbones in presets else len(presets)


def column_label(task_title, channel, binary):
    """Cabecera de columna: tarea binaria, canal o 'Accuracy'"""
    if binary:
        return task_title if channel == "Z0" else f"{task_title} ({channel})"
    return "Accuracy" if channel == "Z0" else channel


class ResultsStore:
    """Informes de evaluación en una sesión SQLAlchemy"""

    def __init__(self, url="sqlite:///:memory:"):
        self.engine = create_engine(url, echo=False)
        Base.metadata.create_all(self.engine)
        self.session = sessionmaker(bind=self.engine)()

    def close(self):
        self.session.close()
        Base.metadata.drop_all(self.engine)

    def add_report(self, report, source=None):
        """Guarda un EvalReport; el modelo sale de ``report.model`` (dict de ModelSpec)"""
        if report.model is not None:
            spec = ModelSpec.from_dict(report.model)
            label, kind = model_label(spec), model_type(spec)
            family_rank, rank = _FAMILY_RANK[spec.family], _model_rank(spec)
        else:
            label, kind, family_rank, rank = "?", "?", len(_FAMILY_RANK), 0
        run = EvalRun(source=source, task=report.task.name, task_title=report.task.title,
                      channel=report.channel, checkpoint=report.checkpoint, model_type=kind,
                      model_label=label, family_rank=family_rank, model_rank=rank,
                      accuracy=report.accuracy)
        self.session.add(run)
        self.session.commit()
        return run

    def ingest_file(self, path):
        with open(path, "r", encoding="utf-8") as f:
            return self.add_report(EvalReport.from_dict(json.load(f)), source=path)

    def ingest_dir(self, root):
        """Carga todos los ``report.json`` bajo ``root`` en orden de ruta"""
        paths = []
        for dirpath, _, files in os.walk(root):
            if REPORT_FILE in files:
                paths.append(os.path.join(dirpath, REPORT_FILE))
        for path in sorted(paths):
            self.ingest_file(path)
        logger.info("%d informes cargados desde %s", len(paths), root)
        return len(paths)

    def runs(self, checkpoint=None):
        """Informes en el orden de las filas de la tabla"""
        query = self.session.query(EvalRun)
        if checkpoint is not None:
            query = query.filter_by(checkpoint=checkpoint)
        return query.order_by(EvalRun.family_rank, EvalRun.model_rank, EvalRun.model_label, EvalRun.id).all()

    def table(self, checkpoint=None):
        """
        DataFrame con una fila por modelo y una columna por tarea/canal.

        Si hay varios informes para la misma celda gana el último cargado.
        """
        runs = self.runs(checkpoint)
        if not runs:
            raise NoResults("No hay informes de evaluación")
        rows = {}
        columns = {}
        for run in runs:
            col = column_label(run.task_title, run.channel, run.task != "multiclass3")
            columns.setdefault(col, (_TASK_ORDER.index(run.task), _CHANNEL_ORDER.index(run.channel)))
            row = rows.setdefault((run.model_type, run.model_label), {})
            previous = row.get(col)
            if previous is None or previous[0] < run.id:
                row[col] = (run.id, run.accuracy)

        columns = sorted(columns, key=columns.get)
        data = [{"Model Type": kind, "Model": label, **{c: v[1] for c, v in cells.items()}}
                for (kind, label), cells in rows.items()]
        return pd.DataFrame(data, columns=["Model Type", "Model"] + columns)

    def render(self, fmt="md", checkpoint=None):
        """Tabla con porcentajes a dos decimales, en markdown o CSV"""
        df = self.table(checkpoint)
        for col in df.columns[2:]:
            df[col] = df[col].map(lambda v: "" if pd.isna(v) else format_percent(v, 2))
        if fmt == "csv":
            return df.to_csv(index=False, lineterminator="\n")
        return tabulate(df, headers="keys", tablefmt="github", showindex=False)
