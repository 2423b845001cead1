# storage.py
# LeaSE Engine - Checkpoint, Genotype & Metrics Storage
# Created by Digital COE Gen AI Team

from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Type, TypeVar, Union

import numpy as np
import orjson
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ValidationError

from leasenas.ai.autodiff import ParamSet
from leasenas.exceptions import ConfigError, GenotypeSchemaError
from leasenas.models.schemas import CellSpec, Genotype


CHECKPOINT_FORMAT = "leasenas.checkpoint/1"
GENOTYPE_FORMAT = "leasenas.genotype/1"
JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY

P = TypeVar("P", bound=ParamSet)
PathLike = Union[str, Path]


class StorageService:
    """File I/O for run artifacts: JSON documents through orjson, tables through pandas."""

    @classmethod
    def write_json(cls, path: PathLike, document) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(orjson.dumps(document, option=JSON_OPTIONS) + b"\n")
        return path

    @classmethod
    def read_json(cls, path: PathLike):
        path = Path(path)
        try:
            return orjson.loads(path.read_bytes())
        except FileNotFoundError:
            raise ConfigError(f"file not found: {path}") from None
        except orjson.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None

    # Weight checkpoints

    @classmethod
    def save_params(cls, path: PathLike, params: ParamSet, kind: str) -> Path:
        """
        Write named tensors as a checkpoint document.

        Args:
            path: Output file
            params: Tensors to store
            kind: Free-form tag, e.g. "explainer", "audience", "arch", "saliency"

        Returns:
            The written path
        """
        tensors = [
            {"name": name, "shape": list(params[name].shape), "values": np.ascontiguousarray(params[name]).reshape(-1)}
            for name in sorted(params)
        ]
        return cls.write_json(path, {"format": CHECKPOINT_FORMAT, "kind": kind, "tensors": tensors})

    @classmethod
    def load_params(
        cls,
        path: PathLike,
        param_cls: Type[P] = ParamSet,
        template: Optional[ParamSet] = None,
        kind: Optional[str] = None,
    ) -> P:
        """
        Read a checkpoint document back into a ParamSet.

        With a template, tensors are reordered to match it and every name and shape is checked.
        """
        document = cls.read_json(path)
        if not isinstance(document, dict) or document.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} document")
        if kind is not None and document.get("kind") != kind:
            raise ConfigError(f"{path}: checkpoint kind {document.get('kind')!r}, expected {kind!r}")

        arrays = {}
        for record in document.get("tensors", []):
            shape = tuple(record["shape"])
            values = np.asarray(record["values"], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise ConfigError(f"{path}: tensor {record['name']} has {values.size} values for shape {shape}")
            arrays[record["name"]] = values.reshape(shape)

        if template is not None:
            if set(arrays) != set(template):
                raise ConfigError(f"{path}: tensor names do not match the network")
            for name in template:
                if arrays[name].shape != template[name].shape:
                    raise ConfigError(f"{path}: tensor {name} has shape {arrays[name].shape}, expected {template[name].shape}")
            arrays = {name: arrays[name] for name in template}
        return param_cls(arrays)

    # Genotypes

    @classmethod
    def save_genotype(cls, path: PathLike, genotype: Genotype) -> Path:
        written = cls.write_json(path, genotype.model_dump(mode="json"))
        logger.info(f"Genotype written to {written}")
        return written

    @classmethod
    def load_genotype(cls, path: PathLike, spec: Optional[CellSpec] = None) -> Genotype:
        """
        Read and validate a genotype document, optionally against the configured cell.

        Raises:
            GenotypeSchemaError: malformed document or a cell that does not match spec
        """
        document = cls.read_json(path)
        try:
            genotype = Genotype.model_validate(document)
        except ValidationError as e:
            first = e.errors()[0]
            field = ".".join(str(part) for part in first["loc"])
            raise GenotypeSchemaError(f"{path}: {first['msg']}", field=field or None) from None
        if genotype.format != GENOTYPE_FORMAT:
            raise GenotypeSchemaError(f"{path}: format {genotype.format!r}, expected {GENOTYPE_FORMAT!r}")
        if spec is not None:
            if genotype.n_nodes != spec.n_nodes:
                raise GenotypeSchemaError(f"{path}: {genotype.n_nodes} nodes, config cell has {spec.n_nodes}")
            if list(genotype.candidate_ops) != list(spec.candidate_ops):
                raise GenotypeSchemaError(f"{path}: candidate ops differ from the configured cell")
        return genotype

    # Tables

    @classmethod
    def write_rows(cls, path: PathLike, rows: Iterable[BaseModel], columns: Sequence[str]) -> Path:
        """Write pydantic rows as CSV with a fixed column order; None becomes an empty cell."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        records: List[dict] = [row.model_dump(mode="json") for row in rows]
        frame = pd.DataFrame.from_records(records, columns=list(columns))
        frame.to_csv(path, index=False, na_rep="", float_format=None)
        return path

    @classmethod
    def read_rows(cls, path: PathLike) -> pd.DataFrame:
        return pd.read_csv(path)
