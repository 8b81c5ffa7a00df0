"""Line-delimited JSON traces.

Line 1 is a header::

    {"type": "header", "format": "kvcompact-trace", "version": 1, "seed": ...,
     "layers": L, "kv_heads": H, "queries_per_kv": g, "head_dim": d,
     "zipf": [[...]], "requests": [{"id": ..., "arrival": ..., "prompt_len": ..., "gen_len": ...}]}

Every other line is one record per (request, layer, kv_head, step)::

    {"request_id": ..., "layer": ..., "kv_head": ..., "kind": "prompt" | "gen", "step": s,
     "queries": A, "keys": A, "values": A, ["forced": [...]], ["scores": A]}

Step 0 is the prompt (arrays ``(g, N, d)`` and ``(N, d)``); steps ``1..gen_len``
carry one token (``(g, d)`` and ``(d,)``). An array ``A`` is either a nested
list or ``{"dtype": "f4", "shape": [...], "b64": ...}`` holding little-endian
float32 bytes.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from ..errors import ConfigError, TraceError
from ..policy import TokenClass
from .workload import RequestTrace, Workload, WorkloadShape

FORMAT = "kvcompact-trace"
VERSION = 1


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f4")
    return {"dtype": "f4", "shape": list(a.shape), "b64": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj, line: int) -> np.ndarray:
    if isinstance(obj, list):
        try:
            arr = np.asarray(obj, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise TraceError(f"ragged or non-numeric inline array: {exc}", line) from None
        return arr.astype(np.float32)
    if not isinstance(obj, dict) or obj.get("dtype") != "f4" or "b64" not in obj or "shape" not in obj:
        raise TraceError("array must be a list or a {dtype: f4, shape, b64} object", line)
    try:
        raw = base64.b64decode(obj["b64"], validate=True)
        shape = tuple(int(x) for x in obj["shape"])
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    except (ValueError, TypeError) as exc:
        raise TraceError(f"bad encoded array: {exc}", line) from None


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def write_trace(workload: Workload, path) -> None:
    s = workload.shape
    header = {
        "type": "header", "format": FORMAT, "version": VERSION, "seed": workload.seed,
        "layers": s.layers, "kv_heads": s.kv_heads, "queries_per_kv": s.queries_per_kv, "head_dim": s.head_dim,
        "zipf": np.asarray(workload.zipf, dtype=np.float64).tolist(),
        "requests": [{"id": r.request_id, "arrival": r.arrival, "prompt_len": r.prompt_len, "gen_len": r.gen_len}
                     for r in workload.requests],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header) + "\n")
        for r in workload.requests:
            n = r.prompt_len
            for step in range(r.gen_len + 1):
                for layer in range(s.layers):
                    for h in range(s.kv_heads):
                        i = layer * s.kv_heads + h
                        if step == 0:
                            rec = {"request_id": r.request_id, "layer": layer, "kv_head": h, "kind": "prompt",
                                   "step": 0, "queries": encode_array(r.queries[i, :, :n]),
                                   "keys": encode_array(r.keys[i, :n]), "values": encode_array(r.values[i, :n])}
                            if r.forced is not None:
                                rec["forced"] = [c.value for c in r.forced[i]]
                            if r.scores is not None:
                                rec["scores"] = encode_array(r.scores[i])
                        else:
                            t = n + step - 1
                            rec = {"request_id": r.request_id, "layer": layer, "kv_head": h, "kind": "gen",
                                   "step": step, "queries": encode_array(r.queries[i, :, t]),
                                   "keys": encode_array(r.keys[i, t]), "values": encode_array(r.values[i, t])}
                        fh.write(_dumps(rec) + "\n")


def _require(obj: dict, key: str, kind, line: int):
    if key not in obj:
        raise TraceError(f"missing field {key!r}", line)
    val = obj[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise TraceError(f"field {key!r} must be an integer", line)
    if kind is str and not isinstance(val, str):
        raise TraceError(f"field {key!r} must be a string", line)
    return val


def read_trace(path) -> Workload:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise TraceError(f"cannot read trace: {exc}") from None
    if not lines:
        raise TraceError("empty trace", 1)

    def parse(i: int) -> dict:
        try:
            obj = json.loads(lines[i])
        except json.JSONDecodeError as exc:
            raise TraceError(f"invalid JSON: {exc.msg}", i + 1) from None
        if not isinstance(obj, dict):
            raise TraceError("record is not an object", i + 1)
        return obj

    hdr = parse(0)
    if hdr.get("type") != "header" or hdr.get("format") != FORMAT:
        raise TraceError("first line is not a trace header", 1)
    if hdr.get("version") != VERSION:
        raise TraceError(f"unsupported trace version {hdr.get('version')}", 1)
    try:
        shape = WorkloadShape(_require(hdr, "layers", int, 1), _require(hdr, "kv_heads", int, 1),
                              _require(hdr, "queries_per_kv", int, 1), _require(hdr, "head_dim", int, 1))
    except ConfigError as exc:
        raise TraceError(str(exc), 1) from None
    g, d, heads = shape.queries_per_kv, shape.head_dim, shape.heads
    metas = hdr.get("requests")
    if not isinstance(metas, list) or not metas:
        raise TraceError("header lists no requests", 1)

    reqs: dict[str, dict] = {}
    order = []
    for m in metas:
        rid = _require(m, "id", str, 1)
        if rid in reqs:
            raise TraceError(f"duplicate request id {rid!r}", 1)
        n, gl = _require(m, "prompt_len", int, 1), _require(m, "gen_len", int, 1)
        if n < 1 or gl < 0:
            raise TraceError(f"bad lengths for request {rid!r}", 1)
        t = n + gl
        reqs[rid] = {"meta": m, "n": n, "gen": gl, "next": [0] * heads, "forced": [None] * heads,
                     "scores": [None] * heads,
                     "q": np.zeros((heads, g, t, d), np.float32), "k": np.zeros((heads, t, d), np.float32),
                     "v": np.zeros((heads, t, d), np.float32)}
        order.append(rid)

    for i in range(1, len(lines)):
        line = i + 1
        if not lines[i].strip():
            continue
        rec = parse(i)
        rid = _require(rec, "request_id", str, line)
        if rid not in reqs:
            raise TraceError(f"unknown request {rid!r}", line)
        st = reqs[rid]
        layer, h, step = (_require(rec, "layer", int, line), _require(rec, "kv_head", int, line),
                          _require(rec, "step", int, line))
        kind = _require(rec, "kind", str, line)
        if not (0 <= layer < shape.layers and 0 <= h < shape.kv_heads):
            raise TraceError(f"layer/head ({layer}, {h}) out of range", line)
        idx = layer * shape.kv_heads + h
        if step != st["next"][idx]:
            raise TraceError(f"expected step {st['next'][idx]} for ({rid}, {layer}, {h}), got {step}", line)
        if step > st["gen"]:
            raise TraceError(f"step {step} beyond gen_len {st['gen']}", line)
        want = "prompt" if step == 0 else "gen"
        if kind != want:
            raise TraceError(f"step {step} must have kind {want!r}", line)
        q = decode_array(_require(rec, "queries", object, line), line)
        k = decode_array(_require(rec, "keys", object, line), line)
        v = decode_array(_require(rec, "values", object, line), line)
        n = st["n"]
        if step == 0:
            if q.shape != (g, n, d) or k.shape != (n, d) or v.shape != (n, d):
                raise TraceError("prompt array shapes do not match the header", line)
            st["q"][idx, :, :n], st["k"][idx, :n], st["v"][idx, :n] = q, k, v
            if "forced" in rec:
                try:
                    forced = [TokenClass(c) for c in rec["forced"]]
                except (ValueError, TypeError):
                    raise TraceError("forced classes must be 'high', 'low' or 'pruned'", line) from None
                if len(forced) != n:
                    raise TraceError("forced classes must cover the prompt", line)
                st["forced"][idx] = forced
            if "scores" in rec:
                sc = decode_array(rec["scores"], line)
                if sc.shape != (n, n):
                    raise TraceError("score rows must form an N x N matrix", line)
                st["scores"][idx] = sc.astype(np.float64)
        else:
            if q.shape != (g, d) or k.shape != (d,) or v.shape != (d,):
                raise TraceError("generation array shapes do not match the header", line)
            t = n + step - 1
            st["q"][idx, :, t], st["k"][idx, t], st["v"][idx, t] = q, k, v
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k)) and np.all(np.isfinite(v))):
            raise TraceError("non-finite values", line)
        st["next"][idx] = step + 1

    wl = Workload(shape, int(hdr.get("seed", 0)), np.asarray(hdr.get("zipf", np.zeros((shape.layers, shape.kv_heads)))))
    last = len(lines)
    for rid in order:
        st = reqs[rid]
        if any(nx != st["gen"] + 1 for nx in st["next"]):
            raise TraceError(f"request {rid!r} is missing records", last)
        forced = st["forced"]
        if any(f is not None for f in forced) and not all(f is not None for f in forced):
            raise TraceError(f"request {rid!r} forces classes on only some heads", last)
        scores = st["scores"]
        if any(s is not None for s in scores) and not all(s is not None for s in scores):
            raise TraceError(f"request {rid!r} has score rows on only some heads", last)
        wl.requests.append(RequestTrace(
            rid, int(st["meta"].get("arrival", 0)), st["n"], st["q"], st["k"], st["v"],
            forced=forced if forced[0] is not None else None,
            scores=np.stack(scores) if scores[0] is not None else None))
    return wl
