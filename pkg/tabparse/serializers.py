import json
import os
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

import numpy as np

from .annotation import CellAnnotation, DocAnnotation, TableAnnotation, TextBox, WarpParams
from .geometry import QuadBox, points_hull
from .merger import StructureCell, TableStructure


def now_iso8601() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def _r(value: float) -> float:
    # 3 decimals keeps serialize -> parse -> serialize byte-identical
    return round(float(value), 3) + 0.0


def _points_json(points) -> List[List[float]]:
    return [[_r(x), _r(y)] for x, y in points]


def _points(data) -> tuple:
    return tuple((float(x), float(y)) for x, y in data)


def make_quad_json(quad: QuadBox) -> List[float]:
    return [_r(v) for v in quad.flat()]


def make_detection_json(detection) -> Dict[str, Any]:
    return {"quad": make_quad_json(detection.quad), "score": _r(detection.score)}


def make_cell_json(cell: StructureCell) -> Dict[str, Any]:
    return {
        "start_row": int(cell.start_row),
        "end_row": int(cell.end_row),
        "start_col": int(cell.start_col),
        "end_col": int(cell.end_col),
        "quad": make_quad_json(cell.quad) if cell.quad is not None else None,
        "content_ids": [int(i) for i in cell.content_ids],
    }


def make_table_json(table) -> Dict[str, Any]:
    # table: TableResult(detection, structure)
    structure = table.structure
    cells = sorted(structure.cells, key=lambda c: (c.start_row, c.start_col))
    return {
        **make_detection_json(table.detection),
        "grid": {"rows": int(structure.rows), "cols": int(structure.cols)},
        "cells": [make_cell_json(c) for c in cells],
    }


def make_page_json(page) -> Dict[str, Any]:
    return {"image": page.image, "tables": [make_table_json(t) for t in page.tables]}


def parse_page_json(data: Dict[str, Any], width: int = 0, height: int = 0):
    from .detector import Detection
    from .pipeline import PageResult, TableResult

    page = PageResult(str(data["image"]), width, height)
    for t in data.get("tables", []):
        cells = [
            StructureCell(
                int(c["start_row"]), int(c["end_row"]), int(c["start_col"]), int(c["end_col"]),
                QuadBox.from_flat(c["quad"]) if c.get("quad") is not None else None,
                tuple(int(i) for i in c.get("content_ids", [])),
            )
            for c in t.get("cells", [])
        ]
        structure = TableStructure(int(t["grid"]["rows"]), int(t["grid"]["cols"]), cells)
        page.tables.append(TableResult(Detection(QuadBox.from_flat(t["quad"]), float(t["score"])), structure))
    return page


def make_table_html(structure: TableStructure) -> str:
    rows = []
    for r in range(structure.rows):
        tds = []
        for cell in sorted((c for c in structure.cells if c.start_row == r), key=lambda c: c.start_col):
            attrs = ""
            if cell.rowspan > 1:
                attrs += f' rowspan="{cell.rowspan}"'
            if cell.colspan > 1:
                attrs += f' colspan="{cell.colspan}"'
            tds.append(f"<td{attrs}></td>")
        rows.append("<tr>" + "".join(tds) + "</tr>")
    return "<table>" + "".join(rows) + "</table>"


# ---------------------------------------------------------------- annotations

def make_text_json(text: TextBox) -> Dict[str, Any]:
    return {"id": int(text.id), "polygon": _points_json(text.polygon)}


def make_table_annotation_json(table: TableAnnotation) -> Dict[str, Any]:
    outline = _points_json(table.outline)
    box = points_hull(np.asarray(outline))
    return {
        "quad": make_quad_json(table.quad),
        "bbox": [_r(box.x), _r(box.y), _r(box.w), _r(box.h)],
        "outline": outline,
        "rows": table.rows,
        "cols": table.cols,
        "ruling": table.ruling,
        "row_separators": [_points_json(line) for line in table.row_separators],
        "col_separators": [_points_json(line) for line in table.col_separators],
        "cells": [
            {
                "start_row": c.start_row, "end_row": c.end_row,
                "start_col": c.start_col, "end_col": c.end_col,
                "texts": [make_text_json(t) for t in c.texts],
            }
            for c in table.cells
        ],
        "warp": None if table.warp is None else {
            "amplitude": table.warp.amplitude, "wavelength": table.warp.wavelength,
            "phase_x": table.warp.phase_x, "phase_y": table.warp.phase_y,
        },
    }


def make_annotation_json(doc: DocAnnotation) -> Dict[str, Any]:
    return {
        "image": doc.image,
        "width": doc.width,
        "height": doc.height,
        "tables": [make_table_annotation_json(t) for t in doc.tables],
        "page_text": [make_text_json(t) for t in doc.page_text],
    }


def _parse_text(data: Dict[str, Any]) -> TextBox:
    return TextBox(int(data["id"]), _points(data["polygon"]))


def parse_annotation_json(data: Dict[str, Any]) -> DocAnnotation:
    tables = []
    for t in data.get("tables", []):
        warp = t.get("warp")
        tables.append(TableAnnotation(
            quad=QuadBox.from_flat(t["quad"]),
            outline=_points(t["outline"]),
            rows=int(t["rows"]),
            cols=int(t["cols"]),
            row_separators=tuple(_points(line) for line in t["row_separators"]),
            col_separators=tuple(_points(line) for line in t["col_separators"]),
            cells=tuple(
                CellAnnotation(int(c["start_row"]), int(c["end_row"]), int(c["start_col"]), int(c["end_col"]),
                               tuple(_parse_text(x) for x in c.get("texts", [])))
                for c in t["cells"]
            ),
            ruling=t.get("ruling", "none"),
            warp=None if warp is None else WarpParams(**warp),
        ))
    return DocAnnotation(
        image=str(data["image"]),
        width=int(data["width"]),
        height=int(data["height"]),
        tables=tuple(tables),
        page_text=tuple(_parse_text(x) for x in data.get("page_text", [])),
    )


# ---------------------------------------------------------------- run records

def make_manifest_json(command: str, config_path: Optional[str], seed: Optional[int], inputs: List[str],
                       outputs: List[str], checkpoints: Optional[Dict[str, str]] = None,
                       config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    from . import __version__

    return {
        "command": command,
        "config": config_path,
        "configValues": config or {},
        "seed": seed,
        "inputs": list(inputs),
        "outputs": list(outputs),
        "checkpoints": dict(checkpoints or {}),
        "version": __version__,
        "createdAt": now_iso8601(),
    }


def make_corpus_json(config: Dict[str, Any], seed: int, pages: List[str]) -> Dict[str, Any]:
    return {
        "config": config,
        "seed": seed,
        "count": len(pages),
        "pages": list(pages),
    }


def dump_json(path: str, payload: Any) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, ensure_ascii=False)
        fh.write("\n")


def load_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def make_report_json(report) -> Dict[str, Any]:
    # report: metrics.EvaluationReport
    return {
        "detection": {
            f"{t:.1f}": {"precision": _r(r.precision), "recall": _r(r.recall), "f1": _r(r.f1)}
            for t, r in report.detection.items()
        },
        "wavgF1": _r(report.wavg_f1),
        "adjacencyF1": _r(report.adjacency_f1),
        "tedsStruct": _r(report.teds_struct),
        "pages": [
            {
                "image": p.image,
                "detection": {f"{t:.1f}": {"matches": c[0], "predicted": c[1], "expected": c[2]}
                              for t, c in p.counts.items()},
                "adjacencyF1": [_r(v) for v in p.adjacency],
                "tedsStruct": [_r(v) for v in p.teds],
            }
            for p in report.pages
        ],
        "createdAt": now_iso8601(),
    }
