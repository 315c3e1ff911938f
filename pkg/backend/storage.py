import io
import json
import logging
import math
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sqlalchemy import Column, DateTime, Integer, Text, create_engine, text
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session, declarative_base
from sqlalchemy.types import JSON

from services.path_sim_service import PathRecord
from services.pde_1d_service import Grid1D, TruncationCertificate
from services.pde_sv_service import Grid2D
from services.stats_service import RunSummary, figure_tables

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

FLOAT_FMT = "%.17g"

Base = declarative_base()


class RunRecord(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    created_at = Column(DateTime, nullable=False)
    command = Column(Text, nullable=False)
    config_hash = Column(Text, nullable=False, index=True)
    output_dir = Column(Text, nullable=False)
    request_payload = Column(JSON, nullable=False)
    response_payload = Column(JSON, nullable=False)


# --------------------------------------------------------------------------- grids


def _meta_number(value: Optional[float]) -> Optional[Union[float, str]]:
    if value is None:
        return None
    return "inf" if math.isinf(value) else float(value)


def _read_number(value: Optional[Union[float, str]]) -> Optional[float]:
    if value is None:
        return None
    return math.inf if value == "inf" else float(value)


def _grid_meta(grid: Union[Grid1D, Grid2D]) -> Dict[str, Any]:
    meta: Dict[str, Any] = {
        "kind": "sv" if isinstance(grid, Grid2D) else "1d",
        "label": grid.label,
        "p": grid.p,
        "trunc_level": _meta_number(grid.trunc_level),
        "detrunc_n": _meta_number(grid.detrunc_n),
    }
    if isinstance(grid, Grid1D):
        meta["vol"] = grid.vol
        meta["horizon"] = grid.horizon
    if grid.certificate is not None:
        meta["certificate"] = grid.certificate.as_dict()
    return meta


def _certificate(meta: Dict[str, Any]) -> Optional[TruncationCertificate]:
    c = meta.get("certificate")
    if not c:
        return None
    return TruncationCertificate(
        schedule=tuple(float(v) for v in c["schedule"]),
        deltas=tuple(float(v) for v in c["deltas"]),
        monotone=bool(c["monotone"]),
        min_increment=float(c["min_increment"]),
        n_final=float(c["n_final"]),
        converged=bool(c["converged"]),
    )


def _axis_line(name: str, values: np.ndarray) -> str:
    return ",".join([name] + [FLOAT_FMT % v for v in values])


def write_grid(grid: Union[Grid1D, Grid2D], path: Union[str, Path], fmt: str = "csv") -> Path:
    """CSV: a JSON metadata comment, one header row per axis, then row-major values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = _grid_meta(grid)
    try:
        if fmt == "npz":
            path = path.with_suffix(".npz")
            arrays = {"t": grid.t, "values": grid.values}
            if isinstance(grid, Grid2D):
                arrays.update(nu=grid.nu, s=grid.s)
            else:
                arrays["x"] = grid.x
            np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
        else:
            path = path.with_suffix(".csv")
            axes = [("t", grid.t)]
            if isinstance(grid, Grid2D):
                axes += [("nu", grid.nu), ("s", grid.s)]
            else:
                axes.append(("x", grid.x))
            values = grid.values.reshape(-1, grid.values.shape[-1])
            buf = io.StringIO()
            buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
            for name, axis in axes:
                buf.write(_axis_line(name, axis) + "\n")
            np.savetxt(buf, values, fmt=FLOAT_FMT, delimiter=",")
            path.write_text(buf.getvalue(), encoding="utf-8")
    except OSError as e:
        logger.error(f"❌ Failed to write grid {path}: {e}")
        raise
    logger.debug(f"grid {grid.label} written to {path}")
    return path


def read_grid(path: Union[str, Path]) -> Union[Grid1D, Grid2D]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"grid file not found: {path}")
    if path.suffix == ".npz":
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            arrays = {k: np.array(data[k]) for k in data.files if k != "meta"}
    else:
        lines = path.read_text(encoding="utf-8").splitlines()
        meta = json.loads(lines[0][2:])
        n_axes = 3 if meta["kind"] == "sv" else 2
        arrays = {}
        for line in lines[1 : 1 + n_axes]:
            name, *vals = line.split(",")
            arrays[name] = np.array([float(v) for v in vals])
        arrays["values"] = np.loadtxt(io.StringIO("\n".join(lines[1 + n_axes :])), delimiter=",", ndmin=2)

    common = dict(
        trunc_level=_read_number(meta["trunc_level"]),
        p=float(meta["p"]),
        label=meta["label"],
        certificate=_certificate(meta),
        detrunc_n=_read_number(meta.get("detrunc_n")),
    )
    if meta["kind"] == "sv":
        shape = (arrays["t"].size, arrays["nu"].size, arrays["s"].size)
        return Grid2D(t=arrays["t"], nu=arrays["nu"], s=arrays["s"], values=arrays["values"].reshape(shape), **common)
    return Grid1D(t=arrays["t"], x=arrays["x"], values=arrays["values"].reshape(arrays["t"].size, arrays["x"].size),
                  vol=float(meta.get("vol", 1.0)), horizon=meta.get("horizon"), **common)


# --------------------------------------------------------------------------- manifests and results


def write_json(payload: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    except OSError as e:
        logger.error(f"❌ Failed to write {path}: {e}")
        raise
    return path


def read_json(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def write_records(records: Sequence[PathRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([r.as_row() for r in records])
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FMT, lineterminator="\n")
    except OSError as e:
        logger.error(f"❌ Failed to write records {path}: {e}")
        raise
    logger.info(f"✅ {len(frame)} path records written to {path}")
    return path


def read_records(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"records file not found: {path}")
    if path.stat().st_size == 0:
        return pd.DataFrame()
    try:
        return pd.read_csv(path)
    except pd.errors.EmptyDataError:
        return pd.DataFrame()


def write_trajectories(records: Sequence[PathRecord], sigma: float, directory: Union[str, Path]) -> List[Path]:
    """One CSV per dumped path: t, w, S_bar = sigma w, indicator, q."""
    directory = Path(directory)
    written = []
    for r in records:
        if r.trajectory is None:
            continue
        tr = r.trajectory
        frame = pd.DataFrame({"t": tr.t, "w": tr.w, "S_bar": sigma * tr.w, "indicator": tr.indicator, "q": tr.q})
        path = directory / f"trajectory_{r.path_index:06d}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FMT, lineterminator="\n")
        written.append(path)
    return written


def write_summary(summary: RunSummary, directory: Union[str, Path]) -> Dict[str, Path]:
    """summary.json plus one CSV per figure table."""
    directory = Path(directory)
    out = {"summary": write_json(summary.as_dict(), directory / "summary.json")}
    for name, frame in figure_tables(summary).items():
        path = directory / "tables" / f"{name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FMT, lineterminator="\n")
        out[name] = path
    return out


def write_table(frame: pd.DataFrame, path: Union[str, Path], index: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format=FLOAT_FMT, lineterminator="\n")
    return path


# --------------------------------------------------------------------------- run registry


def _engine(database_url: str):
    """Create and return a SQLAlchemy engine for the run registry."""
    try:
        engine = create_engine(database_url, future=True, echo=False)
        logger.debug(f"🔧 registry engine created for {database_url}")
        return engine
    except Exception as e:
        logger.error(f"❌ Failed to create database engine: {e}")
        raise


def init_db(database_url: str) -> None:
    try:
        engine = _engine(database_url)
        Base.metadata.create_all(engine)
        with Session(engine) as session:
            session.execute(text("SELECT 1"))
        logger.info("✅ run registry initialized")
    except SQLAlchemyError as e:
        logger.error(f"❌ Failed to initialize run registry: {e}")
        raise


def save_run(
    database_url: str,
    command: str,
    config_hash: str,
    output_dir: str,
    request_payload: Dict[str, Any],
    response_payload: Dict[str, Any],
) -> int:
    try:
        engine = _engine(database_url)
        with Session(engine) as session:
            record = RunRecord(
                created_at=datetime.utcnow(),
                command=command,
                config_hash=config_hash,
                output_dir=str(output_dir),
                request_payload=json.loads(json.dumps(request_payload, default=str)),
                response_payload=json.loads(json.dumps(response_payload, default=str)),
            )
            session.add(record)
            session.commit()
            session.refresh(record)
            run_id = int(record.id)
            logger.info(f"Run saved to registry with ID: {run_id}")
            return run_id
    except SQLAlchemyError as e:
        logger.error(f"Database error while saving run: {e}")
        raise


def _row(row: RunRecord) -> Dict[str, Any]:
    return {
        "id": row.id,
        "created_at": row.created_at.isoformat(),
        "command": row.command,
        "config_hash": row.config_hash,
        "output_dir": row.output_dir,
        "request_payload": row.request_payload,
        "response_payload": row.response_payload,
    }


def list_runs(database_url: str, limit: int = 20, command: Optional[str] = None) -> List[Dict[str, Any]]:
    try:
        engine = _engine(database_url)
        with Session(engine) as session:
            query = session.query(RunRecord)
            if command:
                query = query.filter(RunRecord.command == command)
            rows = query.order_by(RunRecord.id.desc()).limit(limit).all()
            return [_row(r) for r in rows]
    except SQLAlchemyError as e:
        logger.error(f"Database error while listing runs: {e}")
        raise


def get_run(database_url: str, run_id: int) -> Optional[Dict[str, Any]]:
    engine = _engine(database_url)
    with Session(engine) as session:
        row = session.get(RunRecord, run_id)
        return _row(row) if row else None


def check_database_health(database_url: str) -> Dict[str, Any]:
    try:
        engine = _engine(database_url)
        with Session(engine) as session:
            session.execute(text("SELECT 1"))
            runs_count = session.query(RunRecord).count()
        return {"status": "healthy", "tables": {"runs": runs_count}, "last_check": datetime.utcnow().isoformat()}
    except SQLAlchemyError as e:
        logger.error(f"Run registry health check failed: {e}")
        return {
            "status": "unhealthy",
            "error": str(e),
            "error_type": "database_error",
            "tables": {},
            "last_check": datetime.utcnow().isoformat(),
        }
