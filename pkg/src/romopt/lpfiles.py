"""MILP text formats: fixed-form MPS and CPLEX-dialect LP, plus readers.

Both writers are deterministic (identical model -> identical bytes) and the
readers reproduce the written model exactly: repr-precision coefficients,
variable and constraint order preserved, binaries and SOS2 groups intact.
The LP Bounds section lists every variable so the reader can rebuild the
variable order without scanning expressions; numeric MPS fields wider than
their fixed columns overflow rightward with a single separating space and
the reader splits on whitespace. Semantic variable groups (``model.groups``) are not
serialized.
"""

from __future__ import annotations

import numpy as np

from .milp import MilpModel

_SENSE_TO_ROW = {"<=": "L", ">=": "G", "=": "E"}
_ROW_TO_SENSE = {v: k for k, v in _SENSE_TO_ROW.items()}


def _check_names(model: MilpModel) -> None:
    if not model.variables:
        raise ValueError("cannot serialize a model with no variables")
    seen = set()
    for v in model.variables:
        if (not v.name) or any(ch.isspace() for ch in v.name) or ":" in v.name:
            raise ValueError(f"unserializable variable name {v.name!r}")
        if v.name in seen:
            raise ValueError(f"duplicate variable name {v.name!r}")
        seen.add(v.name)
    seen = set()
    for c in model.constraints:
        if (not c.name) or any(ch.isspace() for ch in c.name) or ":" in c.name:
            raise ValueError(f"unserializable constraint name {c.name!r}")
        if c.name in seen or c.name == "OBJ":
            raise ValueError(f"duplicate or reserved constraint name {c.name!r}")
        seen.add(c.name)


def _clean_name(model: MilpModel) -> str:
    name = model.name
    if not name or any(ch.isspace() for ch in name):
        return "model"
    return name


def _num(v: float) -> str:
    return repr(float(v))


def _terms(model: MilpModel, coeffs: dict[int, float], const: float = 0.0) -> str:
    parts = []
    for idx in sorted(coeffs):
        v = coeffs[idx]
        name = model.variables[idx].name
        if not parts:
            parts.append(f"{_num(v)} {name}")
        elif v >= 0:
            parts.append(f"+ {_num(v)} {name}")
        else:
            parts.append(f"- {_num(-v)} {name}")
    if const != 0.0 or not parts:
        if not parts:
            parts.append(_num(const))
        elif const >= 0:
            parts.append(f"+ {_num(const)}")
        else:
            parts.append(f"- {_num(-const)}")
    return " ".join(parts)


def write_lp(model: MilpModel, path) -> None:
    """CPLEX-dialect LP text."""
    _check_names(model)
    lines = [f"\\ Problem: {_clean_name(model)}"]
    lines.append("Maximize" if model.sense == "max" else "Minimize")
    lines.append(f" obj: {_terms(model, model.objective, model.objective_const)}")
    lines.append("Subject To")
    for c in model.constraints:
        lines.append(f" {c.name}: {_terms(model, c.coeffs)} {c.sense} {_num(c.rhs)}")
    lines.append("Bounds")
    for v in model.variables:
        if v.lb == -np.inf and v.ub == np.inf:
            lines.append(f" {v.name} free")
        elif v.lb == v.ub:
            lines.append(f" {v.name} = {_num(v.lb)}")
        elif v.lb == -np.inf:
            lines.append(f" {v.name} <= {_num(v.ub)}")
        elif v.ub == np.inf:
            lines.append(f" {v.name} >= {_num(v.lb)}")
        else:
            lines.append(f" {_num(v.lb)} <= {v.name} <= {_num(v.ub)}")
    binaries = [v.name for v in model.variables if v.kind == "binary"]
    if binaries:
        lines.append("Binaries")
        for i in range(0, len(binaries), 8):
            lines.append(" " + " ".join(binaries[i : i + 8]))
    if model.sos2_groups:
        lines.append("SOS")
        for g, idx in enumerate(model.sos2_groups):
            members = " ".join(
                f"{model.variables[i].name}:{w + 1}" for w, i in enumerate(idx)
            )
            lines.append(f" s{g}: S2:: {members}")
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _scan_terms(tokens: list[str], names: dict[str, int]):
    """Parse ``[sign] num [name] ...`` into (coeffs dict, constant)."""
    coeffs: dict[int, float] = {}
    const = 0.0
    sign = 1.0
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok == "+":
            sign = 1.0
            i += 1
            continue
        if tok == "-":
            sign = -1.0
            i += 1
            continue
        val = sign * float(tok)
        sign = 1.0
        if i + 1 < len(tokens) and tokens[i + 1] not in ("+", "-"):
            name = tokens[i + 1]
            if name not in names:
                raise ValueError(f"unknown variable {name!r} in LP expression")
            coeffs[names[name]] = coeffs.get(names[name], 0.0) + val
            i += 2
        else:
            const += val
            i += 1
    return coeffs, const


def read_lp(path) -> MilpModel:
    with open(path) as fh:
        raw = [ln.rstrip("\n") for ln in fh]
    model = MilpModel()
    if raw and raw[0].startswith("\\ Problem: "):
        model.name = raw[0][len("\\ Problem: ") :].strip()
    lines = [ln.strip() for ln in raw if ln.strip() and not ln.lstrip().startswith("\\")]

    sense = "min"
    idx = 0
    if lines[idx].lower() in ("maximize", "maximise", "max"):
        sense = "max"
        idx += 1
    elif lines[idx].lower() in ("minimize", "minimise", "min"):
        idx += 1
    obj_txt = []
    while idx < len(lines) and lines[idx].lower() not in ("subject to", "st", "s.t."):
        obj_txt.append(lines[idx])
        idx += 1
    idx += 1

    con_txt, bounds_txt, bin_txt, sos_txt = [], [], [], []
    section = None
    while idx < len(lines):
        low = lines[idx].lower()
        if low == "bounds":
            section = "bounds"
        elif low in ("binaries", "binary"):
            section = "bin"
        elif low == "sos":
            section = "sos"
        elif low == "end":
            break
        elif section is None:
            con_txt.append(lines[idx])
        elif section == "bounds":
            bounds_txt.append(lines[idx])
        elif section == "bin":
            bin_txt.append(lines[idx])
        elif section == "sos":
            sos_txt.append(lines[idx])
        idx += 1

    # the Bounds section lists every variable in model order
    names: dict[str, int] = {}
    for ln in bounds_txt:
        toks = ln.split()
        if len(toks) == 2 and toks[1].lower() == "free":
            names[toks[0]] = model.add_var(toks[0])
        elif len(toks) == 3 and toks[1] in ("=", "<=", ">="):
            name = toks[0]
            val = float(toks[2])
            if toks[1] == "=":
                names[name] = model.add_var(name, val, val)
            elif toks[1] == "<=":
                names[name] = model.add_var(name, -np.inf, val)
            else:
                names[name] = model.add_var(name, val, np.inf)
        elif len(toks) == 5 and toks[1] == "<=" and toks[3] == "<=":
            names[toks[2]] = model.add_var(toks[2], float(toks[0]), float(toks[4]))
        else:
            raise ValueError(f"unparseable bounds line: {ln!r}")
    for ln in bin_txt:
        for name in ln.split():
            if name not in names:
                raise ValueError(f"binary {name!r} missing from Bounds")
            v = model.variables[names[name]]
            v.kind, v.lb, v.ub = "binary", 0.0, 1.0

    obj_tokens = " ".join(obj_txt).split()
    if obj_tokens and obj_tokens[0].endswith(":"):
        obj_tokens = obj_tokens[1:]
    obj_coeffs, obj_const = _scan_terms(obj_tokens, names)
    model.set_objective(obj_coeffs, sense, obj_const)

    for ln in con_txt:
        tokens = ln.split()
        cname = ""
        if tokens and tokens[0].endswith(":"):
            cname = tokens[0][:-1]
            tokens = tokens[1:]
        sense_pos = next(
            (i for i, t in enumerate(tokens) if t in ("<=", ">=", "=")), -1
        )
        if sense_pos < 0:
            raise ValueError(f"constraint line without sense: {ln!r}")
        coeffs, const = _scan_terms(tokens[:sense_pos], names)
        rhs = float(tokens[sense_pos + 1]) - const
        model.add_constraint(coeffs, tokens[sense_pos], rhs, cname)

    for ln in sos_txt:
        toks = ln.split()
        if len(toks) < 3 or toks[1] != "S2::":
            raise ValueError(f"unparseable SOS line: {ln!r}")
        members = []
        for pair in toks[2:]:
            name, weight = pair.rsplit(":", 1)
            members.append((int(weight), names[name]))
        members.sort()
        model.add_sos2([i for _, i in members])
    return model


def _mps_line(f1="", f2="", f3="", f4="", f5="", f6="") -> str:
    starts = (1, 4, 14, 24, 39, 49)
    out = ""
    for fld, start in zip((f1, f2, f3, f4, f5, f6), starts):
        if not fld:
            continue
        if len(out) < start:
            out = out.ljust(start)
        else:
            out += " "
        out += fld
    return out


def write_mps(model: MilpModel, path) -> None:
    """Fixed-form MPS with OBJSENSE, integer markers, and SOS sections."""
    _check_names(model)
    lines = [f"NAME          {_clean_name(model)}"]
    lines.append("OBJSENSE")
    lines.append("    MAX" if model.sense == "max" else "    MIN")
    lines.append("ROWS")
    lines.append(_mps_line("N", "OBJ"))
    for c in model.constraints:
        lines.append(_mps_line(_SENSE_TO_ROW[c.sense], c.name))
    lines.append("COLUMNS")
    col_entries: dict[int, list[tuple[str, float]]] = {
        i: [] for i in range(model.n_vars)
    }
    for i, v in model.objective.items():
        col_entries[i].append(("OBJ", v))
    for c in model.constraints:
        for i, v in c.coeffs.items():
            col_entries[i].append((c.name, v))
    in_int = False
    marker = 0
    for i, var in enumerate(model.variables):
        want_int = var.kind == "binary"
        if want_int != in_int:
            tag = "'INTORG'" if want_int else "'INTEND'"
            lines.append(_mps_line("", f"M{marker}", "'MARKER'", tag))
            marker += 1
            in_int = want_int
        entries = col_entries[i] or [("OBJ", 0.0)]
        for row, val in entries:
            lines.append(_mps_line("", var.name, row, _num(val)))
    if in_int:
        lines.append(_mps_line("", f"M{marker}", "'MARKER'", "'INTEND'"))
    lines.append("RHS")
    if model.objective_const != 0.0:
        lines.append(_mps_line("", "RHS", "OBJ", _num(-model.objective_const)))
    for c in model.constraints:
        if c.rhs != 0.0:
            lines.append(_mps_line("", "RHS", c.name, _num(c.rhs)))
    lines.append("BOUNDS")
    for v in model.variables:
        if v.kind == "binary":
            lines.append(_mps_line("BV", "BND", v.name))
        elif v.lb == -np.inf and v.ub == np.inf:
            lines.append(_mps_line("FR", "BND", v.name))
        elif v.lb == v.ub:
            lines.append(_mps_line("FX", "BND", v.name, _num(v.lb)))
        else:
            if v.lb == -np.inf:
                lines.append(_mps_line("MI", "BND", v.name))
            else:
                lines.append(_mps_line("LO", "BND", v.name, _num(v.lb)))
            if v.ub != np.inf:
                lines.append(_mps_line("UP", "BND", v.name, _num(v.ub)))
    if model.sos2_groups:
        lines.append("SOS")
        for g, idx in enumerate(model.sos2_groups):
            lines.append(_mps_line("S2", "SOS", f"s{g}"))
            for w, i in enumerate(idx):
                lines.append(_mps_line("", model.variables[i].name, _num(float(w + 1))))
    lines.append("ENDATA")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mps(path) -> MilpModel:
    with open(path) as fh:
        raw = [ln.rstrip("\n") for ln in fh if ln.strip()]
    model = MilpModel()
    section = None
    sense = "min"
    row_sense: dict[str, str] = {}
    row_order: list[str] = []
    names: dict[str, int] = {}
    col_data: dict[str, list[tuple[str, float]]] = {}
    col_kind: dict[str, str] = {}
    rhs: dict[str, float] = {}
    obj_const = 0.0
    bounds_lines: list[list[str]] = []
    sos_groups: list[list[tuple[str, float]]] = []
    in_int = False

    for ln in raw:
        toks = ln.split()
        if not ln.startswith(" ") and toks:
            head = toks[0].upper()
            if head == "NAME":
                model.name = toks[1] if len(toks) > 1 else "model"
                section = None
            elif head in ("OBJSENSE", "ROWS", "COLUMNS", "RHS", "BOUNDS", "SOS"):
                section = head
            elif head == "ENDATA":
                break
            else:
                raise ValueError(f"unknown MPS section header: {ln!r}")
            continue
        if section == "OBJSENSE":
            sense = "max" if toks[0].upper() == "MAX" else "min"
        elif section == "ROWS":
            kind, rname = toks[0].upper(), toks[1]
            if kind == "N":
                continue
            row_sense[rname] = _ROW_TO_SENSE[kind]
            row_order.append(rname)
        elif section == "COLUMNS":
            if len(toks) >= 3 and toks[1] == "'MARKER'":
                in_int = toks[2] == "'INTORG'"
                continue
            cname = toks[0]
            if cname not in names:
                names[cname] = len(names)
                col_data[cname] = []
                col_kind[cname] = "binary" if in_int else "continuous"
            j = 1
            while j + 1 < len(toks):
                col_data[cname].append((toks[j], float(toks[j + 1])))
                j += 2
        elif section == "RHS":
            j = 1
            while j + 1 < len(toks):
                rname, val = toks[j], float(toks[j + 1])
                if rname == "OBJ":
                    obj_const = -val
                else:
                    rhs[rname] = val
                j += 2
        elif section == "BOUNDS":
            bounds_lines.append(toks)
        elif section == "SOS":
            if toks[0].upper() == "S2":
                sos_groups.append([])
            else:
                sos_groups[-1].append((toks[0], float(toks[1])))

    for cname in names:
        model.add_var(cname, kind=col_kind[cname])
    obj: dict[int, float] = {}
    row_coeffs: dict[str, dict[int, float]] = {r: {} for r in row_order}
    for cname, entries in col_data.items():
        ci = names[cname]
        for rname, val in entries:
            if rname == "OBJ":
                obj[ci] = obj.get(ci, 0.0) + val
            else:
                row_coeffs[rname][ci] = row_coeffs[rname].get(ci, 0.0) + val
    model.set_objective(obj, sense, obj_const)
    for rname in row_order:
        model.add_constraint(
            row_coeffs[rname], row_sense[rname], rhs.get(rname, 0.0), rname
        )
    for toks in bounds_lines:
        btype = toks[0].upper()
        vname = toks[2]
        v = model.variables[names[vname]]
        if btype == "BV":
            v.kind, v.lb, v.ub = "binary", 0.0, 1.0
        elif btype == "FR":
            v.lb, v.ub = -np.inf, np.inf
        elif btype == "FX":
            v.lb = v.ub = float(toks[3])
        elif btype == "MI":
            v.lb = -np.inf
        elif btype == "LO":
            v.lb = float(toks[3])
        elif btype == "UP":
            v.ub = float(toks[3])
        else:
            raise ValueError(f"unknown bound type {btype!r}")
    for grp in sos_groups:
        grp_sorted = sorted(grp, key=lambda t: t[1])
        model.add_sos2([names[n] for n, _ in grp_sorted])
    return model
