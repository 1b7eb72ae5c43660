"""Model checkpoints: module library, proposal encoder and the generating config."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .fileio import (FORMAT_VERSION, ParseError, atomic_write, check_version, float_array_json,
                     read_json, require)
from .gnn import ModuleLibrary
from .nn import MlpSpec
from .proposal import _PARTS, ProposalParams
from .sim import KINDS


class CheckpointMismatch(ValueError):
    """The checkpoint was produced for a different domain than requested."""


@dataclass
class Checkpoint:
    kind: str
    library: ModuleLibrary
    proposal: ProposalParams | None
    config: dict


def _library_json(lib: ModuleLibrary) -> str:
    return ('{"edge_spec":%s,"node_spec":%s,"in_scale":%s,"out_scale":%s,"edge_params":[%s],"node_params":[%s]}'
            % (json.dumps(lib.edge_spec.to_dict()), json.dumps(lib.node_spec.to_dict()),
               float_array_json(lib.in_scale), float_array_json(lib.out_scale),
               ",".join(float_array_json(p) for p in lib.edge_params),
               ",".join(float_array_json(p) for p in lib.node_params)))


def _proposal_json(p: ProposalParams | None) -> str:
    if p is None:
        return "null"
    specs = {k: p.specs[k].to_dict() for k in _PARTS}
    return ('{"specs":%s,"horizon":%d,"state_dim":%d,"values":%s}'
            % (json.dumps(specs), p.horizon, p.state_dim, float_array_json(p.values)))


def dumps_checkpoint(ck: Checkpoint) -> str:
    return ('{"format_version":%d,"kind":%s,"config":%s,"library":%s,"proposal":%s}\n'
            % (FORMAT_VERSION, json.dumps(ck.kind), json.dumps(ck.config, sort_keys=True),
               _library_json(ck.library), _proposal_json(ck.proposal)))


def save_checkpoint(path, kind: str, library: ModuleLibrary, proposal: ProposalParams | None,
                    config: dict) -> None:
    atomic_write(path, dumps_checkpoint(Checkpoint(kind, library, proposal, config)))


def load_checkpoint(path, expect_kind: str | None = None) -> Checkpoint:
    """Read a checkpoint; refuse it when ``expect_kind`` differs from the stored domain."""
    doc = read_json(path)
    check_version(path, doc)
    kind = require(path, doc, "kind")
    if kind not in KINDS:
        raise ParseError(path, f"unknown domain {kind!r}")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointMismatch(f"{path}: checkpoint is for {kind!r}, config asks for {expect_kind!r}")
    try:
        ld = require(path, doc, "library")
        lib = ModuleLibrary(MlpSpec.from_dict(ld["edge_spec"]), MlpSpec.from_dict(ld["node_spec"]),
                            [np.asarray(p, dtype=np.float64) for p in ld["edge_params"]],
                            [np.asarray(p, dtype=np.float64) for p in ld["node_params"]],
                            np.asarray(ld["in_scale"], dtype=np.float64),
                            np.asarray(ld["out_scale"], dtype=np.float64))
        pd = doc.get("proposal")
        prop = None
        if pd is not None:
            specs = {k: MlpSpec.from_dict(pd["specs"][k]) for k in _PARTS}
            values = np.asarray(pd["values"], dtype=np.float64)
            if values.shape != (sum(s.n_params for s in specs.values()),):
                raise ValueError("proposal parameter count does not match its specs")
            prop = ProposalParams(specs, values, int(pd["horizon"]), int(pd["state_dim"]))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ParseError):
            raise
        raise ParseError(path, f"invalid checkpoint content: {e}") from None
    return Checkpoint(kind, lib, prop, doc.get("config", {}))
