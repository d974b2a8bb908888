#!/usr/bin/env python3
"""Regenerates the golden wire fixtures with `protoc --encode`.

Each fixture in fixtures.json names a flat proto3 message, its field values,
and whether repeated numerics should be written unpacked. For every fixture
this script writes <name>.bin, the bytes protoc produces for those values.
"""
import json
import math
import os
import subprocess
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))

KIND_RE = ("double", "float", "int32", "int64", "bool", "string")


def text_value(kind, v):
    if kind in ("double", "float"):
        if isinstance(v, str):
            return {"NaN": "nan", "Infinity": "inf", "-Infinity": "-inf"}[v]
        return repr(float(v))
    if kind == "bool":
        return "true" if v else "false"
    if kind == "string":
        return json.dumps(v)
    return str(int(v))


def main():
    with open(os.path.join(HERE, "fixtures.json")) as f:
        fixtures = json.load(f)
    for fx in fixtures:
        fields = fx["fields"]
        lines = []
        for fd in fields:
            label = "repeated " if fd.get("repeated") else ""
            opt = " [packed = false]" if fd.get("repeated") and fx.get("unpacked") and fd["kind"] != "string" else ""
            lines.append(f"  {label}{fd['kind']} {fd['name']} = {fd['tag']}{opt};")
        proto = 'syntax = "proto3";\nmessage M {\n' + "\n".join(lines) + "\n}\n"
        kinds = {fd["name"]: fd["kind"] for fd in fields}
        text = []
        for name, v in fx["values"].items():
            items = v if isinstance(v, list) else [v]
            for item in items:
                text.append(f"{name}: {text_value(kinds[name], item)}")
        with tempfile.TemporaryDirectory() as tmp:
            with open(os.path.join(tmp, "m.proto"), "w") as f:
                f.write(proto)
            out = subprocess.run(
                ["protoc", f"--proto_path={tmp}", "--encode=M", "m.proto"],
                input="\n".join(text).encode(),
                capture_output=True,
                check=True,
            ).stdout
        with open(os.path.join(HERE, fx["name"] + ".bin"), "wb") as f:
            f.write(out)
        print(fx["name"], out.hex())


if __name__ == "__main__":
    main()
