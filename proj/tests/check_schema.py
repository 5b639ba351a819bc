"""Validate every golden scenario against docs/scenario.schema.json.

Usage: check_schema.py SCHEMA SCENARIO_DIR

Files under SCENARIO_DIR/invalid are deliberately broken inputs; they must
still be JSON objects with a known kind, but are otherwise not checked here
(their errors are semantic and caught by `defham validate`).
"""

import json
import pathlib
import sys

import jsonschema


def main() -> int:
    schema = json.loads(pathlib.Path(sys.argv[1]).read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    validator = jsonschema.Draft202012Validator(schema)
    root = pathlib.Path(sys.argv[2])
    failures = 0
    files = sorted(root.glob("*.json"))
    for path in files:
        errors = sorted(validator.iter_errors(json.loads(path.read_text())), key=lambda e: list(e.path))
        for err in errors:
            pointer = "/" + "/".join(str(p) for p in err.path)
            print(f"{path.name}: {pointer}: {err.message}")
        failures += bool(errors)
    for path in sorted((root / "invalid").glob("*.json")):
        doc = json.loads(path.read_text())
        if not isinstance(doc, dict) or "kind" not in doc:
            print(f"{path.name}: not a scenario object")
            failures += 1
    print(f"{len(files) - failures}/{len(files)} scenarios match the schema")
    return 1 if failures or not files else 0


if __name__ == "__main__":
    sys.exit(main())
